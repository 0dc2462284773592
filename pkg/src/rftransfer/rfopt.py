"""Receptive-field optimization: match target feature statistics to a source bank.

The network is frozen. Only the patch half-width ``s`` changes, optimized in
log space with Adam so that the squared maximum mean discrepancy between
target features and a fixed bank of source features decreases.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateTargetError
from .extract import Checkpoint, Surface, extract_features, features_with_scale_grad
from .net import AdamState, adam_step

FLAG_RATE_LIMIT = 0.5


def _sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d2 = (A * A).sum(1)[:, None] - 2.0 * A @ B.T + (B * B).sum(1)[None, :]
    return np.maximum(d2, 0.0)


def mmd(F_s: np.ndarray, F_t: np.ndarray, bandwidth: float) -> tuple[float, np.ndarray]:
    """Squared MMD with kernel ``exp(-|a - b|^2 / bandwidth^2)`` and its gradient in ``F_t``.

    Uses the biased estimator (all pairs, diagonals included), which is
    non-negative and exactly zero for identical sets.
    """
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    F_s = np.atleast_2d(np.asarray(F_s, dtype=np.float64))
    F_t = np.atleast_2d(np.asarray(F_t, dtype=np.float64))
    if F_s.shape[1] != F_t.shape[1]:
        raise ValueError("feature dimensions differ")
    if len(F_s) == 0 or len(F_t) == 0:
        raise ValueError("empty feature set")
    a, b = len(F_s), len(F_t)
    h2 = bandwidth * bandwidth
    K_ss = np.exp(-_sqdist(F_s, F_s) / h2)
    K_st = np.exp(-_sqdist(F_s, F_t) / h2)
    K_tt = np.exp(-_sqdist(F_t, F_t) / h2)
    value = K_ss.mean() - 2.0 * K_st.mean() + K_tt.mean()
    # d/dt_j of K(x, t_j) = K * 2 (x - t_j) / h2
    g_st = (K_st.T @ F_s - K_st.sum(0)[:, None] * F_t) * (2.0 / h2)
    g_tt = (K_tt @ F_t - K_tt.sum(1)[:, None] * F_t) * (2.0 / h2)
    grad = -2.0 / (a * b) * g_st + 2.0 / (b * b) * g_tt
    return float(value), grad


def median_bandwidth(F: np.ndarray, max_rows: int = 4000, seed: int = 0) -> float:
    """Square root of the median pairwise squared distance (distinct pairs)."""
    F = np.asarray(F, dtype=np.float64)
    if len(F) > max_rows:
        F = F[np.random.default_rng(seed).choice(len(F), max_rows, replace=False)]
    d2 = _sqdist(F, F)[np.triu_indices(len(F), 1)]
    med = float(np.median(d2))
    if not med > 0:
        raise ValueError("median pairwise distance is zero; bandwidth undefined")
    return float(np.sqrt(med))


def checkpoint_id(ckpt: Checkpoint) -> str:
    h = hashlib.sha256()
    for name in sorted(ckpt.theta.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(ckpt.theta.params[name], dtype="<f4").tobytes())
    return h.hexdigest()[:16]


@dataclass
class FeatureBank:
    features: np.ndarray
    checkpoint_id: str
    n_s: int
    seed: int
    s: float
    bandwidth: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.features)):
            raise ValueError("bank features must be finite")
        if len(self.features) != self.n_s:
            raise ValueError("bank size does not match n_s")

    def provenance(self) -> dict:
        return {"checkpoint_id": self.checkpoint_id, "n_s": self.n_s, "seed": self.seed,
                "s": self.s, "bandwidth": self.bandwidth}


def sample_centers(surfaces: Sequence[Surface], n: int, rng: np.random.Generator) -> list[tuple[int, np.ndarray]]:
    """``n`` points drawn uniformly from the union of all surfaces, grouped per surface."""
    sizes = np.array([len(s) for s in surfaces])
    flat = rng.choice(int(sizes.sum()), size=n, replace=n > sizes.sum())
    which = np.searchsorted(np.cumsum(sizes), flat, side="right")
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    groups = []
    for k in np.unique(which):
        idx = np.sort(flat[which == k] - offsets[k])
        groups.append((int(k), surfaces[k].points[idx]))
    return groups


def build_bank(ckpt: Checkpoint, sources: Sequence[Surface], n_s: int = 2000, seed: int = 0,
               bandwidth: float | None = None) -> FeatureBank:
    """Source features at the pre-training scale ``s0`` (fixed once per checkpoint)."""
    rng = np.random.default_rng(seed)
    feats = []
    for k, centers in sample_centers(sources, n_s, rng):
        f, _ = extract_features(ckpt, sources[k], centers, s=ckpt.s0)
        feats.append(f)
    F = np.concatenate(feats)
    bw = median_bandwidth(F, seed=seed) if bandwidth is None else float(bandwidth)
    return FeatureBank(F, checkpoint_id(ckpt), n_s, seed, ckpt.s0, bw)


@dataclass(frozen=True)
class RfOptConfig:
    n_t: int = 16
    lr: float = 0.05
    lr_final: float = 0.1
    max_iter: int = 150
    tol: float = 1e-3
    patience: int = 20
    source_batch: int = 512
    eval_every: int = 50
    n_eval: int = 256
    s_init: float | None = None
    s_min: float = 0.01
    s_max: float = 2.0
    bandwidth: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_t < 1 or self.source_batch < 1 or self.max_iter < 0 or self.patience < 1:
            raise ValueError("counts must be positive")
        if self.lr < 0 or self.tol < 0 or not 0 < self.s_min <= self.s_max:
            raise ValueError("invalid lr, tol or clamp range")
        if not 0 <= self.lr_final <= 1:
            raise ValueError("lr_final is a fraction of lr in [0, 1]")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("fixed bandwidth must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RfOptConfig":
        return cls(**d)


@dataclass
class RfOptResult:
    s: float
    s0: float
    trace: list[tuple[int, float, float]]
    evaluations: list[tuple[int, float, float]] = field(default_factory=list)
    converged: bool = False

    @property
    def ratio(self) -> float:
        return self.s / self.s0


def _target_features(ckpt, targets, groups, s, with_grad: bool):
    feats, flags, backs = [], [], []
    for k, centers in groups:
        if with_grad:
            f, fl, back = features_with_scale_grad(ckpt.theta, targets[k], centers, s, ckpt.r_lrf_at(s), ckpt.patch)
            backs.append(back)
        else:
            f, fl = extract_features(ckpt, targets[k], centers, s=s)
        feats.append(f)
        flags.append(fl)
    return np.concatenate(feats), np.concatenate(flags), backs


def _check_flags(flags: np.ndarray, s: float) -> None:
    rate = float(np.mean(flags != 0))
    if rate > FLAG_RATE_LIMIT:
        raise DegenerateTargetError(
            f"{rate:.0%} of target patches have degenerate or sparse local frames at s={s:.4g}; "
            "the target sampling is too coarse for this receptive field")


def mmd_at_scale(ckpt: Checkpoint, bank: FeatureBank, targets: Sequence[Surface], s: float,
                 n_eval: int = 256, seed: int = 0) -> float:
    """Full-bank discrepancy for a fixed, seeded target sample at scale ``s``."""
    groups = sample_centers(targets, n_eval, np.random.default_rng(seed))
    F_t, _, _ = _target_features(ckpt, targets, groups, s, with_grad=False)
    return mmd(bank.features, F_t, bank.bandwidth)[0]


def scale_objective(ckpt: Checkpoint, F_s: np.ndarray, bandwidth: float, targets: Sequence[Surface],
                    groups, s: float) -> tuple[float, float, np.ndarray]:
    """Minibatch discrepancy and its derivative in ``s`` (frames held fixed)."""
    F_t, flags, backs = _target_features(ckpt, targets, groups, s, with_grad=True)
    value, dF = mmd(F_s, F_t, bandwidth)
    grad, row = 0.0, 0
    for (k, centers), back in zip(groups, backs):
        grad += back(dF[row:row + len(centers)])
        row += len(centers)
    return value, grad, flags


def cosine_lr(lr: float, final: float, it: int, n: int) -> float:
    return lr * (final + (1.0 - final) * 0.5 * (1.0 + np.cos(np.pi * it / max(n, 1))))


def optimize_receptive_field(ckpt: Checkpoint, bank: FeatureBank, targets: Sequence[Surface],
                             cfg: RfOptConfig = RfOptConfig()) -> RfOptResult:
    """Gradient descent on ``log s`` with the network frozen.

    The step size follows a cosine from ``lr`` down to ``lr * lr_final``.
    Each iteration draws ``n_t`` fresh target centers and up to
    ``source_batch`` bank rows. Stops after ``max_iter`` iterations or once
    the relative change of ``s`` stays below ``tol`` for ``patience``
    consecutive iterations.
    """
    if not targets:
        raise ValueError("no target shapes")
    if bank.checkpoint_id != checkpoint_id(ckpt):
        raise ValueError("feature bank was built from a different checkpoint")
    rng = np.random.default_rng(cfg.seed)
    s = float(np.clip(ckpt.s if cfg.s_init is None else cfg.s_init, cfg.s_min, cfg.s_max))
    params = {"log_s": np.array([np.log(s)])}
    state = AdamState(lr=cfg.lr)
    trace, evals = [], []
    quiet = 0
    converged = False

    def bank_batch():
        if len(bank.features) <= cfg.source_batch:
            return bank.features
        return bank.features[rng.choice(len(bank.features), cfg.source_batch, replace=False)]

    for it in range(cfg.max_iter + 1):
        groups = sample_centers(targets, cfg.n_t, rng)
        F_s = bank_batch()
        if it == cfg.max_iter or converged:
            value, _, flags = scale_objective(ckpt, F_s, bank.bandwidth, targets, groups, s)
            _check_flags(flags, s)
            trace.append((it, s, value))
            break
        value, grad_s, flags = scale_objective(ckpt, F_s, bank.bandwidth, targets, groups, s)
        _check_flags(flags, s)
        trace.append((it, s, value))
        if cfg.eval_every and it % cfg.eval_every == 0:
            evals.append((it, s, mmd_at_scale(ckpt, bank, targets, s, cfg.n_eval, cfg.seed + 1)))
        state.lr = cosine_lr(cfg.lr, cfg.lr_final, it, cfg.max_iter)
        adam_step(params, {"log_s": np.array([grad_s * s])}, state)
        s_new = float(np.clip(np.exp(params["log_s"][0]), cfg.s_min, cfg.s_max))
        params["log_s"][0] = np.log(s_new)
        quiet = quiet + 1 if abs(s_new - s) / s_new < cfg.tol else 0
        converged = quiet >= cfg.patience
        s = s_new
    return RfOptResult(s, ckpt.s0, trace, evals, converged)
