"""Local patch extraction: reference frames, cropping and soft voxelization.

A patch around a center point is cropped, expressed in its local reference
frame (LRF), and rasterized into a ``res^3`` grid whose values are a smooth
function of the receptive-field half-width ``s``. Every voxel value is
differentiable in ``s``; :func:`voxelize_backward` returns the exact
derivative.

Voxelization model. A canonical point ``x`` maps into the unit cube through
``u = (x / s + 1) / 2``; voxel ``c`` has center ``g_c = (i + 0.5) / res``.
Each point contributes ``w = exp(-|u - g_c|^2 / sigma)`` and contributions are
combined as a probabilistic union ``v_c = 1 - prod_p (1 - w_pc)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import InsufficientNeighborsError
from .geom import PointCloud

DEFAULT_RESOLUTION = 16
DEFAULT_SIGMA = 1e-3
DEFAULT_MARGIN = 1.5
MIN_LRF_NEIGHBORS = 5
WEIGHT_FLOOR = 1e-12

FLAG_ISOTROPIC = 1
FLAG_SPARSE = 2


@dataclass(frozen=True, eq=False)
class LocalReferenceFrame:
    """Orthonormal frame; columns of ``rotation`` are the x, y, z axes."""

    rotation: np.ndarray
    center: np.ndarray
    flags: int = 0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))

    @property
    def degenerate(self) -> bool:
        return bool(self.flags & FLAG_ISOTROPIC)

    def to_local(self, points: np.ndarray) -> np.ndarray:
        return (points - self.center) @ self.rotation


@dataclass(frozen=True)
class ReceptiveField:
    s: float
    s_min: float = 0.01
    s_max: float = 2.0

    def __post_init__(self):
        if not (0 < self.s_min <= self.s_max):
            raise ValueError("need 0 < s_min <= s_max")
        if not (self.s_min <= self.s <= self.s_max):
            raise ValueError(f"s={self.s} outside [{self.s_min}, {self.s_max}]")

    def with_s(self, s: float) -> "ReceptiveField":
        return ReceptiveField(float(np.clip(s, self.s_min, self.s_max)), self.s_min, self.s_max)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    values: np.ndarray
    extent: float
    sigma: float = DEFAULT_SIGMA

    @property
    def resolution(self) -> int:
        return self.values.shape[0]


# ---------------------------------------------------------------------------
# Local reference frames


def _segments(lists) -> tuple[np.ndarray, np.ndarray]:
    counts = np.fromiter((len(x) for x in lists), dtype=np.int64, count=len(lists))
    flat = np.fromiter((i for x in lists for i in x), dtype=np.int64, count=int(counts.sum()))
    seg = np.repeat(np.arange(len(lists)), counts)
    return flat, seg


def _majority_sign(proj: np.ndarray, w: np.ndarray, seg: np.ndarray, n: int, eps: float) -> np.ndarray:
    pos = np.bincount(seg, weights=(proj > eps).astype(np.float64), minlength=n)
    neg = np.bincount(seg, weights=(proj < -eps).astype(np.float64), minlength=n)
    sign = np.sign(pos - neg)
    tie = sign == 0
    if np.any(tie):
        wsum = np.bincount(seg, weights=w * proj, minlength=n)
        sign[tie] = np.sign(wsum[tie])
    sign[sign == 0] = 1.0
    return sign


def estimate_lrfs(points: np.ndarray, centers: np.ndarray, r_lrf: float,
                  tree: cKDTree | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Batched LRF estimation.

    Returns ``(rotations, flags)`` with rotations of shape (B, 3, 3). The z
    axis is the least-variance direction of the ``(r - d)``-weighted
    covariance around the center, the x axis the dominant direction, both
    sign-disambiguated toward the side holding the majority of neighbors.
    Frames with fewer than five neighbors carry ``FLAG_SPARSE``; nearly
    isotropic neighborhoods fall back to the identity with ``FLAG_ISOTROPIC``.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    B = len(centers)
    if tree is None:
        tree = cKDTree(points)
    flat, seg = _segments(tree.query_ball_point(centers, r_lrf))
    diff = points[flat] - centers[seg]
    dist = np.linalg.norm(diff, axis=1)
    w = np.maximum(r_lrf - dist, 0.0)
    counts = np.bincount(seg, minlength=B)
    wsum = np.bincount(seg, weights=w, minlength=B)
    cov = np.empty((B, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            cov[:, a, b] = np.bincount(seg, weights=w * diff[:, a] * diff[:, b], minlength=B)
            cov[:, b, a] = cov[:, a, b]
    cov /= np.maximum(wsum, 1e-300)[:, None, None]
    lam, vec = np.linalg.eigh(cov)

    eps = 1e-9 * r_lrf
    z = vec[:, :, 0]
    x = vec[:, :, 2]
    z = z * _majority_sign(np.einsum("ij,ij->i", diff, z[seg]), w, seg, B, eps)[:, None]
    x = x * _majority_sign(np.einsum("ij,ij->i", diff, x[seg]), w, seg, B, eps)[:, None]
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=2)

    flags = np.zeros(B, dtype=np.int64)
    top = np.maximum(lam[:, 2], 1e-300)
    iso = ((lam[:, 1] - lam[:, 0]) < 1e-9 * top) | ((lam[:, 2] - lam[:, 1]) < 1e-9 * top) | (lam[:, 2] <= 0)
    sparse_ = counts < MIN_LRF_NEIGHBORS
    bad = iso | sparse_
    rot[bad] = np.eye(3)
    flags[iso] |= FLAG_ISOTROPIC
    flags[sparse_] |= FLAG_SPARSE
    return rot, flags


def estimate_lrf(cloud: PointCloud, center, r_lrf: float, tree: cKDTree | None = None) -> LocalReferenceFrame:
    center = np.asarray(center, dtype=np.float64)
    rot, flags = estimate_lrfs(cloud.points, center[None], r_lrf, tree)
    if flags[0] & FLAG_SPARSE:
        n = len((tree or cKDTree(cloud.points)).query_ball_point(center, r_lrf))
        raise InsufficientNeighborsError(
            f"{n} neighbor(s) within r_lrf={r_lrf}, need at least {MIN_LRF_NEIGHBORS}")
    return LocalReferenceFrame(rot[0], center, int(flags[0]))


# ---------------------------------------------------------------------------
# Cropping


def extract_patches(points: np.ndarray, centers: np.ndarray, rotations: np.ndarray, s: float,
                    margin: float = DEFAULT_MARGIN, tree: cKDTree | None = None
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Crop ``margin * s`` cubes around each center, in LRF coordinates.

    Returns ``(local, seg)``: stacked canonical coordinates and the patch
    index of every row.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if tree is None:
        tree = cKDTree(points)
    half = margin * s
    flat, seg = _segments(tree.query_ball_point(centers, half * np.sqrt(3.0)))
    local = np.einsum("ni,nij->nj", points[flat] - centers[seg], rotations[seg])
    keep = np.all(np.abs(local) <= half, axis=1)
    return local[keep], seg[keep]


def extract_patch(cloud: PointCloud, center, rf: ReceptiveField, lrf: LocalReferenceFrame,
                  margin: float = DEFAULT_MARGIN, tree: cKDTree | None = None) -> np.ndarray:
    local, _ = extract_patches(cloud.points, np.asarray(center, dtype=np.float64)[None],
                               lrf.rotation[None], rf.s, margin, tree)
    return local


# ---------------------------------------------------------------------------
# Voxelization


def _cutoff(sigma: float) -> float:
    return float(np.sqrt(sigma * np.log(1.0 / WEIGHT_FLOOR)))


def _splat(local: np.ndarray, seg: np.ndarray, s: float, sigma: float, res: int, with_grad: bool):
    """Sparse point-to-voxel weights above ``WEIGHT_FLOOR``.

    Returns flat voxel ids (patch-major), weights and, optionally, dw/ds.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if len(local) == 0:
        empty = np.zeros(0)
        return np.zeros(0, dtype=np.int64), empty, (empty if with_grad else None)
    rc = _cutoff(sigma)
    K = int(np.ceil(2 * rc * res)) + 1
    u = (local / s + 1.0) * 0.5
    start = np.ceil((u - rc) * res - 0.5).astype(np.int64)
    idx = start[:, :, None] + np.arange(K)[None, None, :]
    valid = (idx >= 0) & (idx < res)
    g = (idx + 0.5) / res
    du = u[:, :, None] - g
    e = np.exp(-du * du / sigma) * valid
    w = e[:, 0, :, None, None] * e[:, 1, None, :, None] * e[:, 2, None, None, :]
    keep = w >= WEIGHT_FLOOR
    pi, a, b, c = np.nonzero(keep)
    vox = ((seg[pi] * res + idx[pi, 0, a]) * res + idx[pi, 1, b]) * res + idx[pi, 2, c]
    wk = w[keep]
    dw = None
    if with_grad:
        q = du * local[:, :, None]
        Q = q[pi, 0, a] + q[pi, 1, b] + q[pi, 2, c]
        dw = wk * Q / (sigma * s * s)
    return vox, wk, dw


def _log1m(w: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(1.0 - w, np.finfo(np.float64).tiny))


def voxelize_batch(local: np.ndarray, seg: np.ndarray, n_patches: int, s: float,
                   sigma: float = DEFAULT_SIGMA, res: int = DEFAULT_RESOLUTION) -> np.ndarray:
    """Voxelize many patches at once; returns (n_patches, res, res, res)."""
    vox, w, _ = _splat(local, seg, s, sigma, res, with_grad=False)
    logc = np.bincount(vox, weights=_log1m(w), minlength=n_patches * res ** 3)
    return (-np.expm1(logc)).reshape(n_patches, res, res, res)


def voxelize_batch_backward(local: np.ndarray, seg: np.ndarray, n_patches: int, s: float,
                            upstream: np.ndarray, sigma: float = DEFAULT_SIGMA,
                            res: int = DEFAULT_RESOLUTION) -> np.ndarray:
    """Per-patch dL/ds given ``upstream = dL/dgrid`` of shape (n_patches, res, res, res)."""
    vox, w, dw = _splat(local, seg, s, sigma, res, with_grad=True)
    if len(vox) == 0:
        return np.zeros(n_patches)
    lw = _log1m(w)
    logc = np.bincount(vox, weights=lw, minlength=n_patches * res ** 3)
    # d v_c / d w_p = prod_{q != p} (1 - w_q)
    dv_dw = np.exp(logc[vox] - lw)
    up = np.asarray(upstream, dtype=np.float64).reshape(-1)
    contrib = up[vox] * dv_dw * dw
    return np.bincount(vox // res ** 3, weights=contrib, minlength=n_patches)


def voxelize(patch: np.ndarray, rf: ReceptiveField | float, sigma: float = DEFAULT_SIGMA,
             res: int = DEFAULT_RESOLUTION) -> VoxelGrid:
    s = rf.s if isinstance(rf, ReceptiveField) else float(rf)
    patch = np.asarray(patch, dtype=np.float64).reshape(-1, 3)
    seg = np.zeros(len(patch), dtype=np.int64)
    return VoxelGrid(voxelize_batch(patch, seg, 1, s, sigma, res)[0], s, sigma)


def voxelize_backward(patch: np.ndarray, rf: ReceptiveField | float, sigma: float,
                      upstream: np.ndarray, res: int = DEFAULT_RESOLUTION) -> float:
    s = rf.s if isinstance(rf, ReceptiveField) else float(rf)
    patch = np.asarray(patch, dtype=np.float64).reshape(-1, 3)
    seg = np.zeros(len(patch), dtype=np.int64)
    return float(voxelize_batch_backward(patch, seg, 1, s, upstream[None], sigma, res)[0])
