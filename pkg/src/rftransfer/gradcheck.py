"""Central finite-difference checks for every differentiable stage.

Each check compares an analytic directional derivative with a central
difference along the same random direction and reports the relative error
``|analytic - fd| / max(|fd|, floor)``. Networks are evaluated in float64 with
a small step so that ReLU activation patterns stay fixed across the stencil.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .net import ConvNetParams, MLPParams, cnn_backward, cnn_forward, mlp_backward, mlp_forward
from .net import layers as L

TOL = 1e-4
CHAIN_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)


def _directional(f: Callable[[], float], arrays, grads, rng, h: float, floor: float) -> float:
    """Worst relative error over one random direction per array."""
    worst = 0.0
    for arr, g in zip(arrays, grads):
        v = rng.normal(size=arr.shape)
        an = float(np.sum(g * v))
        arr += h * v
        fp = f()
        arr -= 2 * h * v
        fm = f()
        arr += h * v
        fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(an - fd) / max(abs(fd), floor))
    return worst


def _layer_checks(rng):
    x = rng.normal(size=(2, 4, 4, 4, 3))
    w = rng.normal(size=(3, 3, 3, 3, 2))
    b = rng.normal(size=2)
    out = {}
    for stride in (1, 2):
        up = rng.normal(size=L.conv3d_forward(x, w, b, stride)[0].shape)
        _, cache = L.conv3d_forward(x, w, b, stride)
        dx, dw, db = L.conv3d_backward(up, cache)
        out[f"conv3d_stride{stride}"] = _directional(
            lambda: float(np.sum(L.conv3d_forward(x, w, b, stride)[0] * up)), [x, w, b], [dx, dw, db],
            rng, 1e-6, 1e-8)
    sc, sh = rng.normal(size=3), rng.normal(size=3)
    up = rng.normal(size=x.shape)
    dx, dsc, dsh = L.instance_norm_backward(up, L.instance_norm_forward(x, sc, sh)[1])
    out["instance_norm"] = _directional(lambda: float(np.sum(L.instance_norm_forward(x, sc, sh)[0] * up)),
                                        [x, sc, sh], [dx, dsc, dsh], rng, 1e-6, 1e-8)
    z = rng.normal(size=(5, 6))
    z[np.abs(z) < 0.05] = 0.5  # keep away from the kink
    up = rng.normal(size=z.shape)
    out["relu"] = _directional(lambda: float(np.sum(L.relu_forward(z)[0] * up)), [z],
                               [L.relu_backward(up, L.relu_forward(z)[1])], rng, 1e-7, 1e-8)
    up = rng.normal(size=(2, 3))
    out["global_average"] = _directional(lambda: float(np.sum(L.global_avg_forward(x)[0] * up)), [x],
                                         [L.global_avg_backward(up, x.shape)], rng, 1e-6, 1e-8)
    W, bb = rng.normal(size=(6, 4)), rng.normal(size=4)
    up = rng.normal(size=(5, 4))
    dz, dW, dbb = L.dense_backward(up, L.dense_forward(z, W, bb)[1])
    out["dense"] = _directional(lambda: float(np.sum(L.dense_forward(z, W, bb)[0] * up)), [z, W, bb],
                                [dz, dW, dbb], rng, 1e-6, 1e-8)
    up = rng.normal(size=z.shape)
    out["l2_normalize"] = _directional(lambda: float(np.sum(L.l2_normalize_forward(z)[0] * up)), [z],
                                       [L.l2_normalize_backward(up, L.l2_normalize_forward(z)[1])],
                                       rng, 1e-6, 1e-8)
    return out


def check_layers(rng) -> float:
    return max(_layer_checks(rng).values())


def check_network(rng, n_probes: int = 50) -> float:
    """Full descriptor network, parameters and input grid, ``n_probes`` directions."""
    theta = ConvNetParams.initialize(seed=int(rng.integers(1 << 30)), dtype=np.float64)
    for k, v in theta.params.items():
        if "bias" in k or "shift" in k:
            theta.params[k] = rng.normal(scale=0.1, size=v.shape)
        elif "scale" in k:
            theta.params[k] = 1 + rng.normal(scale=0.1, size=v.shape)
    grid = rng.uniform(size=(16, 16, 16))
    up = rng.normal(size=theta.arch.out_dim)
    _, tape = cnn_forward(grid, theta)
    grads, dgrid = cnn_backward(tape, up)
    names = list(theta.params)
    f = lambda: float(cnn_forward(grid, theta)[0] @ up)
    worst = 0.0
    for i in range(n_probes):
        if i % 5 == 0:
            worst = max(worst, _directional(f, [grid], [dgrid], rng, 1e-7, 1e-3))
        else:
            name = names[rng.integers(len(names))]
            worst = max(worst, _directional(f, [theta.params[name]], [grads[name]], rng, 1e-7, 1e-3))
    return worst


def check_mlp(rng) -> float:
    theta = MLPParams.initialize((8, 16, 16, 4), seed=int(rng.integers(1 << 30)), residual=True)
    x = rng.normal(size=(6, 8))
    up = rng.normal(size=(6, 4))
    grads, dx = mlp_backward(mlp_forward(x, theta)[1], up)
    f = lambda: float(np.sum(mlp_forward(x, theta)[0] * up))
    names = list(theta.params)
    return _directional(f, [x] + [theta.params[n] for n in names], [dx] + [grads[n] for n in names],
                        rng, 1e-7, 1e-6)


def check_voxelization(rng) -> float:
    from .patch import voxelize, voxelize_backward

    worst = 0.0
    for _ in range(3):
        s = rng.uniform(0.2, 0.6)
        pts = rng.uniform(-1.2 * s, 1.2 * s, (200, 3))
        up = rng.normal(size=(16, 16, 16))
        an = voxelize_backward(pts, s, 1e-3, up)
        h = 1e-4 * s
        fd = (np.sum(voxelize(pts, s + h).values * up) - np.sum(voxelize(pts, s - h).values * up)) / (2 * h)
        worst = max(worst, abs(an - fd) / abs(fd))
    return worst


def check_nce(rng) -> float:
    from .pretrain import nce_loss

    A, B = rng.normal(size=(7, 5)), rng.normal(size=(7, 5))
    _, dA, dB = nce_loss(A, B, tau=0.3)
    return _directional(lambda: nce_loss(A, B, tau=0.3)[0], [A, B], [dA, dB], rng, 1e-6, 1e-8)


def check_mmd(rng) -> float:
    from .rfopt import mmd

    A, B = rng.normal(size=(9, 4)), rng.normal(size=(6, 4))
    _, g = mmd(A, B, 1.5)
    return _directional(lambda: mmd(A, B, 1.5)[0], [B], [g], rng, 1e-6, 1e-10)


def check_soft_correspondence(rng) -> float:
    from .pretrain import soft_correspondence, soft_correspondence_backward

    P, Q = rng.normal(size=(5, 3)), rng.normal(size=(6, 3))
    dS = rng.normal(size=(5, 6))
    dP, dQ = soft_correspondence_backward(P, Q, soft_correspondence(P, Q, 0.7), dS, 0.7)
    return _directional(lambda: float(np.sum(soft_correspondence(P, Q, 0.7) * dS)), [P, Q], [dP, dQ],
                        rng, 1e-6, 1e-8)


def check_rigid_fit(rng) -> float:
    from .geom import RigidTransform
    from .pretrain import weighted_rigid_fit, weighted_rigid_fit_vjp

    X = rng.normal(size=(10, 3))
    Y = RigidTransform.random(rng).apply(X) + rng.normal(scale=0.3, size=X.shape)
    w = rng.uniform(0.2, 1, 10)
    dR, dt = rng.normal(size=(3, 3)), rng.normal(size=3)
    _, vjp = weighted_rigid_fit_vjp(X, Y, w)
    dX, dY = vjp(dR, dt)

    def f():
        T = weighted_rigid_fit(X, Y, w)
        return float(np.sum(T.R * dR) + T.t @ dt)

    return _directional(f, [X, Y], [dX, dY], rng, 1e-6, 1e-8)


def check_cycle_loss(rng) -> float:
    from .geom import RigidTransform
    from .pretrain import cycle_loss

    T, U = RigidTransform.random(rng), RigidTransform.random(rng)
    R, t, Rb, tb = T.R.copy(), T.t.copy(), U.R.copy(), U.t.copy()
    _, g = cycle_loss(T, U)

    def f():
        return float(np.abs(R @ Rb - np.eye(3)).sum() + np.abs(R @ tb + t).sum())

    return _directional(f, [R, t, Rb, tb], [g["R"], g["t"], g["R_back"], g["t_back"]], rng, 1e-7, 1e-8)


def check_cycle_chain(rng) -> float:
    """Cycle loss through both rigid fits and soft correspondences into features."""
    from .geom import RigidTransform
    from .pretrain import cycle_objective

    X = rng.normal(size=(12, 3))
    Y = RigidTransform.random(rng).apply(X) + rng.normal(scale=0.05, size=X.shape)
    F_P = rng.normal(size=(12, 4))
    F_Q = F_P + rng.normal(scale=0.5, size=F_P.shape)
    _, dP, dQ = cycle_objective(F_P, F_Q, X, Y, 0.5)
    return _directional(lambda: cycle_objective(F_P, F_Q, X, Y, 0.5)[0], [F_P, F_Q], [dP, dQ],
                        rng, 1e-7, 1e-8)


def check_scale_chain(rng) -> float:
    """d E_mmd / d s through voxelization, the network and the discrepancy."""
    from .data.synthetic import FragmentConfig, gen_rigid_fragment_pair
    from .extract import PatchParams, Surface, features_with_scale_grad
    from .rfopt import mmd

    pair = gen_rigid_fragment_pair(int(rng.integers(1 << 20)), FragmentConfig(n_primitives=(3, 4)))
    surf = Surface.from_cloud(pair.Q)
    theta = ConvNetParams.initialize(seed=int(rng.integers(1 << 30)), dtype=np.float64)
    F_s = rng.normal(size=(40, theta.arch.out_dim)) * 0.2
    centers = surf.points[rng.choice(len(surf), 12, replace=False)]
    pp = PatchParams()

    def energy(s):
        F, _, back = features_with_scale_grad(theta, surf, centers, s, pp.r_lrf, pp)
        v, dF = mmd(F_s, F, 0.8)
        return v, back(dF)

    s = pp.s
    _, an = energy(s)
    # hundreds of ReLUs switch somewhere near s; a stencil straddling one is
    # not a gradient error, so the best of two step sizes is reported
    errs = []
    for rel_h in (1e-7, 1e-8):
        h = rel_h * s
        fd = (energy(s + h)[0] - energy(s - h)[0]) / (2 * h)
        errs.append(abs(an - fd) / max(abs(fd), 1e-10))
    return min(errs)


CHECKS: dict[str, tuple[Callable, float]] = {
    "voxelize_scale": (check_voxelization, TOL),
    "layers": (check_layers, TOL),
    "network": (check_network, TOL),
    "mlp": (check_mlp, TOL),
    "nce_loss": (check_nce, TOL),
    "soft_correspondence": (check_soft_correspondence, TOL),
    "rigid_fit": (check_rigid_fit, TOL),
    "cycle_loss": (check_cycle_loss, TOL),
    "cycle_chain": (check_cycle_chain, TOL),
    "mmd": (check_mmd, TOL),
    "mmd_scale_chain": (check_scale_chain, CHAIN_TOL),
}


def run_checks(names=None, seed: int = 0) -> list[CheckResult]:
    names = list(CHECKS) if names is None else list(names)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown gradient checks {unknown}; available: {sorted(CHECKS)}")
    results = []
    for i, name in enumerate(names):
        fn, tol = CHECKS[name]
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        err = float(fn(rng))
        results.append(CheckResult(name, err, tol, time.perf_counter() - t0))
    return results
