"""Per-point local features: LRF, cropping, voxelization and the descriptor network.

A :class:`Checkpoint` bundles network parameters with the patch settings they
were trained at. A :class:`Surface` is the geometry patches are cropped from
(a point set plus its spatial index).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .geom import PointCloud, TriMesh
from .net import ConvNetParams, cnn_backward, cnn_forward
from .patch import (DEFAULT_MARGIN, DEFAULT_RESOLUTION, DEFAULT_SIGMA, estimate_lrfs,
                    extract_patches, voxelize_batch, voxelize_batch_backward)

INFERENCE_BATCH = 64


@dataclass(frozen=True)
class PatchParams:
    """Patch settings; ``s`` is the cube half-width, ``r_lrf`` the LRF support radius."""

    s: float = 0.3
    r_lrf: float = 0.3
    sigma: float = DEFAULT_SIGMA
    margin: float = DEFAULT_MARGIN
    resolution: int = DEFAULT_RESOLUTION

    def __post_init__(self):
        if self.s <= 0 or self.r_lrf <= 0 or self.sigma <= 0 or self.margin < 1:
            raise ValueError("patch parameters must be positive (margin >= 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    """Trained descriptor network plus the receptive field it expects.

    ``patch.s`` is the pre-training scale ``s0``; ``s`` is the scale to use at
    inference (equal to ``s0`` until receptive-field optimization sets it).
    With ``co_scale_lrf`` the LRF radius follows ``s`` proportionally.
    """

    theta: ConvNetParams
    patch: PatchParams = PatchParams()
    s: float | None = None
    co_scale_lrf: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.s is None:
            self.s = self.patch.s

    @property
    def s0(self) -> float:
        return self.patch.s

    def r_lrf_at(self, s: float) -> float:
        return self.patch.r_lrf * (s / self.patch.s) if self.co_scale_lrf else self.patch.r_lrf

    def with_s(self, s: float) -> "Checkpoint":
        return replace(self, s=float(s), meta=dict(self.meta))


class Surface:
    """Point set that patches are cropped from, with a cached k-d tree."""

    def __init__(self, points: np.ndarray):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) == 0:
            raise ValueError("surface needs a non-empty (n, 3) point array")
        self.tree = cKDTree(self.points)

    @classmethod
    def from_cloud(cls, cloud: PointCloud) -> "Surface":
        return cls(cloud.points)

    @classmethod
    def from_mesh(cls, mesh: TriMesh, n_samples: int = 0, seed: int = 0) -> "Surface":
        """Mesh vertices plus ``n_samples`` area-uniform surface samples."""
        pts = mesh.vertices
        if n_samples:
            pts = np.concatenate([pts, mesh.sample_surface(n_samples, seed)])
        return cls(pts)

    def scaled(self, factor: float) -> "Surface":
        return Surface(self.points * factor)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class PatchBatch:
    """Canonical patch points for a batch of centers at a fixed LRF."""

    local: np.ndarray
    seg: np.ndarray
    n: int
    flags: np.ndarray
    rotations: np.ndarray


def crop_patches(surface: Surface, centers: np.ndarray, s: float, r_lrf: float,
                 margin: float = DEFAULT_MARGIN) -> PatchBatch:
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    rot, flags = estimate_lrfs(surface.points, centers, r_lrf, surface.tree)
    local, seg = extract_patches(surface.points, centers, rot, s, margin, surface.tree)
    return PatchBatch(local, seg, len(centers), flags, rot)


def patch_grids(surface: Surface, centers: np.ndarray, s: float, r_lrf: float,
                pp: PatchParams = PatchParams()) -> tuple[np.ndarray, PatchBatch]:
    """Voxel grids (B, r, r, r) for all centers at scale ``s``."""
    pb = crop_patches(surface, centers, s, r_lrf, pp.margin)
    return voxelize_batch(pb.local, pb.seg, pb.n, s, pp.sigma, pp.resolution), pb


def compute_features(theta: ConvNetParams, surface: Surface, centers: np.ndarray, s: float,
                     r_lrf: float, pp: PatchParams = PatchParams(),
                     batch: int = INFERENCE_BATCH) -> tuple[np.ndarray, np.ndarray]:
    """Features (B, d) in float64 and LRF flags for every center (inference only)."""
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    out, flags = [], []
    for i in range(0, len(centers), batch):
        grids, pb = patch_grids(surface, centers[i:i + batch], s, r_lrf, pp)
        f, _ = cnn_forward(grids, theta)
        out.append(np.asarray(f, dtype=np.float64))
        flags.append(pb.flags)
    if not out:
        return np.zeros((0, theta.arch.out_dim)), np.zeros(0, dtype=np.int64)
    return np.concatenate(out), np.concatenate(flags)


def extract_features(ckpt: Checkpoint, surface: Surface, centers: np.ndarray,
                     s: float | None = None, batch: int = INFERENCE_BATCH):
    s = ckpt.s if s is None else float(s)
    return compute_features(ckpt.theta, surface, centers, s, ckpt.r_lrf_at(s), ckpt.patch, batch)


def features_with_scale_grad(theta: ConvNetParams, surface: Surface, centers: np.ndarray,
                             s: float, r_lrf: float, pp: PatchParams = PatchParams()):
    """Features plus a closure mapping dL/dF to dL/ds.

    The LRFs and the crop are held fixed (no gradient through frame
    estimation); only the voxel values depend on ``s`` differentiably.
    Returns ``(F, flags, backward)``.
    """
    grids, pb = patch_grids(surface, centers, s, r_lrf, pp)
    f, tape = cnn_forward(grids, theta)

    def backward(dF: np.ndarray) -> float:
        _, dgrid = cnn_backward(tape, dF, need_param_grads=False, need_grid_grad=True)
        per_patch = voxelize_batch_backward(pb.local, pb.seg, pb.n, s, dgrid.astype(np.float64),
                                            pp.sigma, pp.resolution)
        return float(per_patch.sum())

    return np.asarray(f, dtype=np.float64), pb.flags, backward
