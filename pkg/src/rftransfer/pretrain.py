"""Pre-training the descriptor network on rigid fragment pairs.

Two objectives are available. The contrastive loss scores each known
correspondence against all other correspondences in the minibatch. The
cycle loss needs no labels: soft feature matches drive a weighted rigid fit
from P to Q and another from Q to P, and the two fits are pushed to compose
to the identity.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import NumericalError, RankDeficientError
from .extract import Checkpoint, PatchParams, Surface, compute_features, patch_grids
from .geom import RigidTransform
from .net import AdamState, Architecture, ConvNetParams, adam_step, cnn_backward, cnn_forward

RANK_TOL = 1e-9
DEGENERATE_TOL = 1e-6


# ---------------------------------------------------------------------------
# Contrastive loss


def nce_loss(F_P: np.ndarray, F_Q: np.ndarray, omega: np.ndarray | None = None, tau: float = 0.07):
    """Contrastive loss summed over correspondences.

    Row ``i`` of ``F_P`` is the anchor and row ``i`` of ``F_Q`` its positive;
    every other row of ``F_Q`` is a negative. With ``omega`` given, rows are
    first gathered as ``F_P[omega[:, 0]]`` and ``F_Q[omega[:, 1]]`` and the
    gradients are scattered back to the full arrays.

    Returns ``(loss, dL/dF_P, dL/dF_Q)``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    F_P = np.asarray(F_P, dtype=np.float64)
    F_Q = np.asarray(F_Q, dtype=np.float64)
    if omega is not None:
        omega = np.asarray(omega, dtype=np.int64)
        A, B = F_P[omega[:, 0]], F_Q[omega[:, 1]]
    else:
        if F_P.shape != F_Q.shape:
            raise ValueError("row-matched features must have equal shapes")
        A, B = F_P, F_Q
    n = len(A)
    if n < 2:
        raise ValueError("need at least two correspondences (no negatives otherwise)")
    logits = A @ B.T / tau
    logp = log_softmax(logits, axis=1)
    loss = -float(np.trace(logp))
    g = np.exp(logp)
    g[np.diag_indices(n)] -= 1.0
    g /= tau
    dA, dB = g @ B, g.T @ A
    if omega is None:
        return loss, dA, dB
    dP = np.zeros_like(F_P)
    dQ = np.zeros_like(F_Q)
    np.add.at(dP, omega[:, 0], dA)
    np.add.at(dQ, omega[:, 1], dB)
    return loss, dP, dQ


# ---------------------------------------------------------------------------
# Soft correspondence


def soft_correspondence(F_P: np.ndarray, F_Q: np.ndarray, temp: float) -> np.ndarray:
    """Row-stochastic (n, m) matrix, softmax over ``-|f_i - g_j|^2 / temp``."""
    if temp <= 0:
        raise ValueError("temperature must be positive")
    d2 = (F_P * F_P).sum(1)[:, None] - 2.0 * F_P @ F_Q.T + (F_Q * F_Q).sum(1)[None, :]
    return softmax(-d2 / temp, axis=1)


def soft_correspondence_backward(F_P: np.ndarray, F_Q: np.ndarray, S: np.ndarray,
                                 dS: np.ndarray, temp: float) -> tuple[np.ndarray, np.ndarray]:
    dl = S * (dS - (dS * S).sum(1, keepdims=True))
    c = 2.0 / temp
    dP = c * (dl @ F_Q - dl.sum(1)[:, None] * F_P)
    dQ = c * (dl.T @ F_P - dl.sum(0)[:, None] * F_Q)
    return dP, dQ


# ---------------------------------------------------------------------------
# Weighted rigid fit


@dataclass
class _FitCache:
    X: np.ndarray
    Y: np.ndarray
    w: np.ndarray
    xbar: np.ndarray
    ybar: np.ndarray
    U: np.ndarray
    sig: np.ndarray
    V: np.ndarray
    R: np.ndarray


def _fit(X, Y, w):
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise ValueError("X and Y must both be (n, 3)")
    w = np.ones(len(X)) if w is None else np.asarray(w, dtype=np.float64)
    if np.any(w < 0) or not w.sum() > 0:
        raise ValueError("weights must be non-negative with a positive sum")
    W = w.sum()
    xbar = w @ X / W
    ybar = w @ Y / W
    H = (X - xbar).T @ (w[:, None] * (Y - ybar))
    U, sig, Vt = np.linalg.svd(H)
    if sig[1] <= RANK_TOL * max(sig[0], 1e-300) or sig[0] == 0:
        raise RankDeficientError("cross-covariance has rank < 2 (points collinear or coincident)")
    V = Vt.T
    d = np.sign(np.linalg.det(V @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = V @ D @ U.T
    U = U @ D
    sig = sig * np.diag(D)
    return _FitCache(X, Y, w, xbar, ybar, U, sig, V, R)


def weighted_rigid_fit(X: np.ndarray, Y: np.ndarray, w: np.ndarray | None = None) -> RigidTransform:
    """``argmin_{R,t} sum_i w_i |R x_i + t - y_i|^2`` over proper rotations."""
    c = _fit(X, Y, w)
    return RigidTransform(c.R, c.ybar - c.R @ c.xbar)


def _rotation_grad_wrt_H(c: _FitCache, dR: np.ndarray) -> np.ndarray:
    """dL/dH for ``R = polar factor of H^T`` given dL/dR.

    With signed singular vectors ``H = U diag(sig) V^T`` and ``R = V U^T``,
    a perturbation ``dR = R Omega`` solves ``Omega S + S Omega = R^T dA -
    dA^T R`` (``A = H^T``, ``S = U diag(sig) U^T``), which is diagonal in the
    basis ``U``.
    """
    B = c.U.T @ c.R.T @ dR @ c.U
    den = c.sig[:, None] + c.sig[None, :]
    if np.min(np.abs(den[~np.eye(3, dtype=bool)])) <= DEGENERATE_TOL * abs(c.sig[0]):
        return _rotation_grad_fd(c, dR)
    Z = (B - B.T) / np.where(np.eye(3, dtype=bool), 1.0, den)
    np.fill_diagonal(Z, 0.0)
    return c.U @ Z.T @ c.V.T


def _rotation_from_H(H: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    return Vt.T @ np.diag([1.0, 1.0, d]) @ U.T


def _rotation_grad_fd(c: _FitCache, dR: np.ndarray) -> np.ndarray:
    """Central differences over the nine entries of H; used near degeneracy."""
    H = c.U @ np.diag(c.sig) @ c.V.T
    h = 1e-6 * max(np.abs(H).max(), 1e-12)
    out = np.zeros((3, 3))
    for a in range(3):
        for b in range(3):
            E = np.zeros((3, 3))
            E[a, b] = h
            out[a, b] = np.sum(dR * (_rotation_from_H(H + E) - _rotation_from_H(H - E))) / (2 * h)
    return out


def weighted_rigid_fit_vjp(X: np.ndarray, Y: np.ndarray, w: np.ndarray | None = None):
    """Fit plus a closure mapping ``(dL/dR, dL/dt)`` to ``(dL/dX, dL/dY)``."""
    c = _fit(X, Y, w)
    T = RigidTransform(c.R, c.ybar - c.R @ c.xbar)

    def vjp(dR: np.ndarray, dt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dR = np.asarray(dR, dtype=np.float64) - np.outer(dt, c.xbar)
        dxbar = -c.R.T @ dt
        dybar = np.asarray(dt, dtype=np.float64)
        dH = _rotation_grad_wrt_H(c, dR)
        Xc, Yc = c.X - c.xbar, c.Y - c.ybar
        W = c.w.sum()
        dX = c.w[:, None] * (Yc @ dH.T) + np.outer(c.w / W, dxbar)
        dY = c.w[:, None] * (Xc @ dH) + np.outer(c.w / W, dybar)
        return dX, dY

    return T, vjp


# ---------------------------------------------------------------------------
# Cycle loss


def cycle_loss(T: RigidTransform, T_back: RigidTransform) -> tuple[float, dict[str, np.ndarray]]:
    """``|R R' - I|_1 + |R t' + t|_1`` with gradients to R, t, R', t'.

    The subgradient of ``|x|`` at zero is taken as zero.
    """
    E = T.R @ T_back.R - np.eye(3)
    e = T.R @ T_back.t + T.t
    loss = float(np.abs(E).sum() + np.abs(e).sum())
    sE, se = np.sign(E), np.sign(e)
    grads = {
        "R": sE @ T_back.R.T + np.outer(se, T_back.t),
        "t": se,
        "R_back": T.R.T @ sE,
        "t_back": T.R.T @ se,
    }
    return loss, grads


def cycle_objective(F_P: np.ndarray, F_Q: np.ndarray, X: np.ndarray, Y: np.ndarray,
                    temp: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Cycle loss of a fragment pair as a function of its features.

    ``X`` and ``Y`` are the anchor coordinates in P and Q. Forward fit maps
    ``X`` onto soft targets ``S_PQ Y``; the backward fit maps ``Y`` onto
    ``S_QP X``. Returns ``(loss, dL/dF_P, dL/dF_Q)``.
    """
    S_pq = soft_correspondence(F_P, F_Q, temp)
    S_qp = soft_correspondence(F_Q, F_P, temp)
    T, vjp_f = weighted_rigid_fit_vjp(X, S_pq @ Y)
    T_b, vjp_b = weighted_rigid_fit_vjp(Y, S_qp @ X)
    loss, g = cycle_loss(T, T_b)
    _, dYhat = vjp_f(g["R"], g["t"])
    _, dXhat = vjp_b(g["R_back"], g["t_back"])
    dP1, dQ1 = soft_correspondence_backward(F_P, F_Q, S_pq, dYhat @ Y.T, temp)
    dQ2, dP2 = soft_correspondence_backward(F_Q, F_P, S_qp, dXhat @ X.T, temp)
    return loss, dP1 + dP2, dQ1 + dQ2


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class PretrainConfig:
    loss: str = "nce"
    tau: float = 0.07
    n_points: int = 300
    steps: int = 2000
    lr: float = 1e-3
    match_temp: float = 0.1
    seed: int = 0
    init_seed: int | None = None
    patch: PatchParams = PatchParams()

    def __post_init__(self):
        if self.loss not in ("nce", "cycle"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.tau <= 0 or self.match_temp <= 0:
            raise ValueError("temperatures must be positive")
        if self.n_points < 2 or self.steps < 0 or self.lr < 0:
            raise ValueError("n_points >= 2, steps >= 0 and lr >= 0 required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch"] = self.patch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        if "patch" in d:
            d["patch"] = PatchParams(**d["patch"])
        return cls(**d)


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    losses: np.ndarray
    wall_times: np.ndarray = field(default_factory=lambda: np.zeros(0))


class _PairGeometry:
    """Spatial indices for one fragment pair, built lazily and reused."""

    def __init__(self, pair):
        self.pair = pair
        self.P = Surface.from_cloud(pair.P)
        self.Q = Surface.from_cloud(pair.Q)


def _step_inputs(geo: _PairGeometry, cfg: PretrainConfig, rng: np.random.Generator):
    P, Q = geo.P.points, geo.Q.points
    if cfg.loss == "nce":
        omega = geo.pair.correspondences
        n = min(cfg.n_points, len(omega))
        sel = omega[rng.choice(len(omega), size=n, replace=False)]
        return P[sel[:, 0]], Q[sel[:, 1]]
    n_p, n_q = min(cfg.n_points, len(P)), min(cfg.n_points, len(Q))
    return P[rng.choice(len(P), n_p, replace=False)], Q[rng.choice(len(Q), n_q, replace=False)]


def training_loss(theta: ConvNetParams, geo: _PairGeometry, xp: np.ndarray, xq: np.ndarray,
                  cfg: PretrainConfig, need_grads: bool = True):
    """Loss of one step; with ``need_grads`` also parameter gradients.

    The contrastive loss is reported per anchor (mean), so that uniform
    features give ``log n``; its gradient is scaled the same way.
    """
    pp = cfg.patch
    gp, _ = patch_grids(geo.P, xp, pp.s, pp.r_lrf, pp)
    gq, _ = patch_grids(geo.Q, xq, pp.s, pp.r_lrf, pp)
    f, tape = cnn_forward(np.concatenate([gp, gq]), theta)
    f = np.asarray(f, dtype=np.float64)
    fp, fq = f[:len(xp)], f[len(xp):]
    if cfg.loss == "nce":
        loss, dp, dq = nce_loss(fp, fq, tau=cfg.tau)
        loss, dp, dq = loss / len(xp), dp / len(xp), dq / len(xp)
    else:
        loss, dp, dq = cycle_objective(fp, fq, xp, xq, cfg.match_temp)
    if not need_grads:
        return loss, None
    grads, _ = cnn_backward(tape, np.concatenate([dp, dq]), need_param_grads=True, need_grid_grad=False)
    return loss, grads


def pretrain_run(pairs: Sequence, cfg: PretrainConfig = PretrainConfig(),
                 theta: ConvNetParams | None = None,
                 callback: Callable[[int, float], None] | None = None) -> PretrainResult:
    """Train the descriptor network for ``cfg.steps`` steps.

    Pairs are visited in a seeded random order; anchors are resampled every
    step. A non-finite loss or gradient raises :class:`NumericalError`
    naming the step.
    """
    if len(pairs) == 0:
        raise ValueError("no training pairs")
    rng = np.random.default_rng(cfg.seed)
    if theta is None:
        init = cfg.seed if cfg.init_seed is None else cfg.init_seed
        theta = ConvNetParams.initialize(Architecture(resolution=cfg.patch.resolution), init)
    else:
        theta = theta.copy()
    state = AdamState(lr=cfg.lr)
    geos: dict[int, _PairGeometry] = {}
    losses = np.zeros(cfg.steps)
    times = np.zeros(cfg.steps)
    t0 = time.perf_counter()
    order = np.zeros(0, dtype=np.int64)
    for step in range(cfg.steps):
        if step % len(pairs) == 0:
            order = rng.permutation(len(pairs))
        k = int(order[step % len(pairs)])
        if k not in geos:
            geos[k] = _PairGeometry(pairs[k])
        xp, xq = _step_inputs(geos[k], cfg, rng)
        try:
            loss, grads = training_loss(theta, geos[k], xp, xq, cfg)
        except RankDeficientError as exc:
            raise NumericalError(f"step {step}: degenerate rigid fit ({exc})") from exc
        if not np.isfinite(loss):
            raise NumericalError(f"step {step}: non-finite loss {loss}")
        try:
            adam_step(theta.params, grads, state)
        except NumericalError as exc:
            raise NumericalError(f"step {step}: {exc}") from exc
        losses[step] = loss
        times[step] = time.perf_counter() - t0
        if callback is not None:
            callback(step, loss)
    ckpt = Checkpoint(theta, cfg.patch, meta={"loss": cfg.loss, "steps": cfg.steps, "seed": cfg.seed,
                                               "train_config": cfg.to_dict()})
    return PretrainResult(ckpt, losses, times)


# ---------------------------------------------------------------------------
# Evaluation


def loss_ratio(losses: np.ndarray, window: float = 0.1) -> float:
    """Mean loss over the last ``window`` fraction of steps over that of the first."""
    losses = np.asarray(losses, dtype=np.float64)
    if len(losses) == 0:
        raise ValueError("no losses recorded")
    w = max(1, int(len(losses) * window))
    return float(np.mean(losses[-w:]) / np.mean(losses[:w]))


def inlier_rate(theta: ConvNetParams, pairs: Sequence, pp: PatchParams = PatchParams(),
                n_anchors: int = 256, max_candidates: int = 2000, seed: int = 0) -> float:
    """Fraction of feature nearest-neighbor matches that land within tolerance.

    Anchors are drawn from P points that have a ground-truth partner; the
    match of each is the Q point (among up to ``max_candidates``) with the
    closest feature. A match is an inlier when ``|T_gt(p) - q|`` is within the
    pair's tolerance.
    """
    from .geom import nearest_neighbors

    rng = np.random.default_rng(seed)
    hits = total = 0
    for pair in pairs:
        geo = _PairGeometry(pair)
        omega = pair.correspondences
        ia = omega[rng.choice(len(omega), size=min(n_anchors, len(omega)), replace=False), 0]
        iq = np.arange(len(pair.Q))
        if len(iq) > max_candidates:
            iq = np.sort(rng.choice(len(iq), max_candidates, replace=False))
        fa, _ = compute_features(theta, geo.P, geo.P.points[ia], pp.s, pp.r_lrf, pp)
        fq, _ = compute_features(theta, geo.Q, geo.Q.points[iq], pp.s, pp.r_lrf, pp)
        nn = iq[nearest_neighbors(fq, fa, 1)[:, 0]]
        err = np.linalg.norm(pair.T_gt.apply(geo.P.points[ia]) - geo.Q.points[nn], axis=1)
        hits += int((err <= pair.tolerance).sum())
        total += len(ia)
    return hits / max(total, 1)


def chance_inlier_rate(pairs: Sequence, n_anchors: int = 256, seed: int = 0) -> float:
    """Inlier rate of matching every anchor to a uniformly random Q point."""
    from scipy.spatial import cKDTree

    rng = np.random.default_rng(seed)
    rates = []
    for pair in pairs:
        omega = pair.correspondences
        ia = omega[rng.choice(len(omega), size=min(n_anchors, len(omega)), replace=False), 0]
        tp = pair.T_gt.apply(pair.P.points[ia])
        counts = np.array([len(x) for x in cKDTree(pair.Q.points).query_ball_point(tp, pair.tolerance)])
        rates.append(counts.mean() / len(pair.Q))
    return float(np.mean(rates))
