"""Six-layer 3D convolutional descriptor network with a fixed reverse tape."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import TapeError
from . import layers as L

DEFAULT_CHANNELS = (8, 16, 32, 32, 64, 64)
DEFAULT_STRIDES = (1, 2, 1, 2, 1, 2)


@dataclass(frozen=True)
class Architecture:
    in_channels: int = 1
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    strides: tuple[int, ...] = DEFAULT_STRIDES
    out_dim: int = 32
    resolution: int = 16
    normalize_output: bool = True

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "channels": list(self.channels),
            "strides": list(self.strides),
            "out_dim": self.out_dim,
            "resolution": self.resolution,
            "normalize_output": self.normalize_output,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(d["in_channels"], tuple(d["channels"]), tuple(d["strides"]),
                   d["out_dim"], d["resolution"], d["normalize_output"])


@dataclass
class ConvNetParams:
    """Parameters of the descriptor network, keyed by block name."""

    arch: Architecture
    params: dict[str, np.ndarray]
    seed: int | None = None

    @classmethod
    def initialize(cls, arch: Architecture = Architecture(), seed: int = 0,
                   dtype=np.float32) -> "ConvNetParams":
        rng = np.random.default_rng(seed)
        p: dict[str, np.ndarray] = {}
        cin = arch.in_channels
        for i, cout in enumerate(arch.channels, start=1):
            bound = np.sqrt(6.0 / (27 * cin))
            p[f"conv{i}.weight"] = rng.uniform(-bound, bound, (3, 3, 3, cin, cout))
            p[f"conv{i}.bias"] = np.zeros(cout)
            p[f"norm{i}.scale"] = np.ones(cout)
            p[f"norm{i}.shift"] = np.zeros(cout)
            cin = cout
        bound = np.sqrt(6.0 / cin)
        p["dense.weight"] = rng.uniform(-bound, bound, (cin, arch.out_dim))
        p["dense.bias"] = np.zeros(arch.out_dim)
        return cls(arch, {k: v.astype(dtype) for k, v in p.items()}, seed)

    def astype(self, dtype) -> "ConvNetParams":
        return ConvNetParams(self.arch, {k: v.astype(dtype) for k, v in self.params.items()}, self.seed)

    def copy(self) -> "ConvNetParams":
        return ConvNetParams(self.arch, {k: v.copy() for k, v in self.params.items()}, self.seed)

    @property
    def dtype(self):
        return self.params["dense.weight"].dtype

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def block_names(self) -> list[str]:
        return list(self.params.keys())


@dataclass
class Tape:
    caches: list = field(default_factory=list)
    n_layers: int = 0
    input_shape: tuple = ()
    used: bool = False


def _as_batch(grid, arch: Architecture, dtype) -> np.ndarray:
    x = np.asarray(getattr(grid, "values", grid), dtype=dtype)
    r = arch.resolution
    if x.shape == (r, r, r):
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (r, r, r):
        raise ValueError(f"expected grid(s) of shape (B, {r}, {r}, {r}), got {x.shape}")
    return x[..., None]


def cnn_forward(grid, theta: ConvNetParams) -> tuple[np.ndarray, Tape]:
    """Features for one grid (returns a vector) or a batch (returns (B, out_dim))."""
    p = theta.params
    single = np.ndim(getattr(grid, "values", grid)) == 3
    x = _as_batch(grid, theta.arch, theta.dtype)
    tape = Tape(input_shape=x.shape, n_layers=len(theta.arch.channels))
    for i, stride in enumerate(theta.arch.strides, start=1):
        x, c_conv = L.conv3d_forward(x, p[f"conv{i}.weight"], p[f"conv{i}.bias"], stride)
        x, c_norm = L.instance_norm_forward(x, p[f"norm{i}.scale"], p[f"norm{i}.shift"])
        x, c_relu = L.relu_forward(x)
        tape.caches.append((c_conv, c_norm, c_relu))
    x, c_pool = L.global_avg_forward(x)
    x, c_dense = L.dense_forward(x, p["dense.weight"], p["dense.bias"])
    c_l2 = None
    if theta.arch.normalize_output:
        x, c_l2 = L.l2_normalize_forward(x)
    tape.caches.append((c_pool, c_dense, c_l2, single))
    return (x[0] if single else x), tape


def cnn_backward(tape: Tape, upstream: np.ndarray, need_param_grads: bool = True,
                 need_grid_grad: bool = True
                 ) -> tuple[dict[str, np.ndarray] | None, np.ndarray | None]:
    """Reverse pass. Returns ``(dL/dTheta, dL/dgrid)``; a tape is single-use.

    Either gradient can be skipped: parameter gradients are unnecessary when
    optimizing the receptive field, grid gradients when training weights.
    """
    if not (need_param_grads or need_grid_grad):
        raise ValueError("nothing to compute")
    if tape.used:
        raise TapeError("tape already consumed by a previous backward call")
    tape.used = True
    c_pool, c_dense, c_l2, single = tape.caches[-1]
    g = np.asarray(upstream)
    if single:
        g = g[None]
    dtype = c_dense[1].dtype
    g = g.astype(dtype, copy=False)
    grads: dict[str, np.ndarray] = {}
    if c_l2 is not None:
        g = L.l2_normalize_backward(g, c_l2)
    g, grads["dense.weight"], grads["dense.bias"] = L.dense_backward(g, c_dense)
    g = L.global_avg_backward(g, c_pool)
    for i in range(tape.n_layers, 0, -1):
        c_conv, c_norm, c_relu = tape.caches[i - 1]
        g = L.relu_backward(g, c_relu)
        g, grads[f"norm{i}.scale"], grads[f"norm{i}.shift"] = L.instance_norm_backward(g, c_norm)
        g, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = L.conv3d_backward(
            g, c_conv, need_input_grad=(i > 1 or need_grid_grad), need_param_grad=need_param_grads)
    if not need_grid_grad:
        return grads, None
    dgrid = g[..., 0]
    if single:
        dgrid = dgrid[0]
    return (grads if need_param_grads else None), dgrid
