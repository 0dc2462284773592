"""Point-wise MLP head used to refine per-vertex features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import TapeError
from . import layers as L


@dataclass
class MLPParams:
    """Dense layers with ReLU between them (none after the last).

    With ``residual=True`` every hidden layer whose input and output widths
    match adds its input back after the activation.
    """

    dims: tuple[int, ...]
    params: dict[str, np.ndarray]
    residual: bool = False

    @classmethod
    def initialize(cls, dims, seed: int = 0, residual: bool = False, dtype=np.float64) -> "MLPParams":
        rng = np.random.default_rng(seed)
        p = {}
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            bound = np.sqrt(6.0 / a)
            p[f"fc{i}.weight"] = rng.uniform(-bound, bound, (a, b)).astype(dtype)
            p[f"fc{i}.bias"] = np.zeros(b, dtype=dtype)
        return cls(tuple(dims), p, residual)

    @classmethod
    def identity(cls, d: int, dtype=np.float64) -> "MLPParams":
        return cls((d, d), {"fc0.weight": np.eye(d, dtype=dtype), "fc0.bias": np.zeros(d, dtype=dtype)})

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1


@dataclass
class MLPTape:
    caches: list
    used: bool = False


def mlp_forward(x: np.ndarray, theta: MLPParams) -> tuple[np.ndarray, MLPTape]:
    x = np.asarray(x, dtype=theta.params["fc0.weight"].dtype)
    single = x.ndim == 1
    h = x[None] if single else x
    caches = []
    last = theta.n_layers - 1
    for i in range(theta.n_layers):
        z, c_dense = L.dense_forward(h, theta.params[f"fc{i}.weight"], theta.params[f"fc{i}.bias"])
        c_relu = None
        skip = False
        if i < last:
            z, c_relu = L.relu_forward(z)
            skip = theta.residual and z.shape == h.shape
            if skip:
                z = z + h
        caches.append((c_dense, c_relu, skip))
        h = z
    return (h[0] if single else h), MLPTape(caches + [single])


def mlp_backward(tape: MLPTape, upstream: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    if tape.used:
        raise TapeError("tape already consumed by a previous backward call")
    tape.used = True
    single = tape.caches[-1]
    g = np.asarray(upstream)
    g = g[None] if single else g
    grads = {}
    for i in range(len(tape.caches) - 2, -1, -1):
        c_dense, c_relu, skip = tape.caches[i]
        g_skip = g if skip else None
        if c_relu is not None:
            g = L.relu_backward(g, c_relu)
        g, grads[f"fc{i}.weight"], grads[f"fc{i}.bias"] = L.dense_backward(g, c_dense)
        if g_skip is not None:
            g = g + g_skip
    return grads, (g[0] if single else g)
