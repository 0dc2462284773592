"""Evaluation: geodesic map error, feature smoothness, patch-set PCA."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sparse

from .geom import TriMesh, _edge_graph
from .match import PointToPointMap

N_THRESHOLDS = 100
MAX_THRESHOLD = 0.25


@dataclass
class ErrorReport:
    errors: np.ndarray
    thresholds: np.ndarray
    accuracy: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.errors.mean()) if len(self.errors) else 0.0


def accuracy_curve(errors: np.ndarray, n: int = N_THRESHOLDS, max_threshold: float = MAX_THRESHOLD):
    """Fraction of errors within each threshold of ``linspace(0, max_threshold, n)``.

    If some error exceeds ``max_threshold`` a final sample at the largest
    error is appended so that the curve always ends at 1.
    """
    thr = np.linspace(0.0, max_threshold, n)
    if len(errors) and errors.max() > max_threshold:
        thr = np.append(thr, errors.max())
    srt = np.sort(errors)
    acc = np.searchsorted(srt, thr, side="right") / max(len(errors), 1)
    return thr, acc


def geodesic_error(pred: PointToPointMap, gt: PointToPointMap, target_mesh: TriMesh,
                   virtual_edges: bool = False, chunk: int = 512) -> ErrorReport:
    """Per-vertex on-surface distance between predicted and true images.

    Distances are edge-graph shortest paths on ``target_mesh``, run once per
    distinct ground-truth target vertex. Masked entries of either map are
    left out.
    """
    from scipy.sparse.csgraph import dijkstra

    if len(pred) != len(gt):
        raise ValueError("maps have different numbers of source vertices")
    m = target_mesh.n_vertices
    if pred.n_target != m or gt.n_target != m:
        raise ValueError("maps do not land on the target mesh")
    valid = np.flatnonzero(pred.valid & gt.valid)
    p, g = pred.target[valid], gt.target[valid]
    graph = _edge_graph(target_mesh, virtual_edges)
    uniq, inv = np.unique(g, return_inverse=True)
    err = np.empty(len(valid))
    for start in range(0, len(uniq), chunk):
        src = uniq[start:start + chunk]
        D = dijkstra(graph, directed=False, indices=src)
        sel = np.flatnonzero((inv >= start) & (inv < start + len(src)))
        err[sel] = D[inv[sel] - start, p[sel]]
    if not np.all(np.isfinite(err)):
        raise ValueError("predicted and true images lie in disconnected components")
    thr, acc = accuracy_curve(err)
    return ErrorReport(err, thr, acc)


def dirichlet_energy(F: np.ndarray, W: sparse.spmatrix) -> float:
    """Mean over feature channels of ``f^T W f``."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    if W.shape != (len(F), len(F)):
        raise ValueError(f"stiffness is {W.shape}, features have {len(F)} rows")
    return float(np.einsum("ij,ij->", F, W @ F) / F.shape[1])


@dataclass
class PcaReport:
    eigenvalues: np.ndarray
    unexplained: np.ndarray
    projections: np.ndarray
    total_variance: float

    def components_for(self, explained: float = 0.9) -> int:
        """Smallest number of components explaining at least ``explained`` of the variance."""
        return int(np.argmax(self.unexplained <= 1.0 - explained + 1e-12))


def patch_pca(grids, n_proj: int = 2) -> PcaReport:
    """Centered PCA of flattened voxel grids.

    Uses the smaller of the feature covariance and the sample Gram matrix.
    ``unexplained[c]`` is the variance fraction left after ``c`` components.
    """
    if isinstance(grids, np.ndarray):
        X = grids.reshape(len(grids), -1).astype(np.float64)
    else:
        shapes = {g.values.shape for g in grids}
        if len(shapes) != 1:
            raise ValueError("grids differ in resolution")
        X = np.stack([g.values.ravel() for g in grids]).astype(np.float64)
    n, d = X.shape
    if n < 2:
        raise ValueError("need at least two grids")
    X = X - X.mean(axis=0)
    if n <= d:
        lam, vec = scipy.linalg.eigh(X @ X.T)
        lam, vec = lam[::-1], vec[:, ::-1]
        lam = np.maximum(lam, 0.0)
        proj = vec[:, :n_proj] * np.sqrt(lam[:n_proj])
    else:
        cov = X.T @ X
        lam, vec = scipy.linalg.eigh(cov)
        lam, vec = np.maximum(lam[::-1], 0.0), vec[:, ::-1]
        proj = X @ vec[:, :n_proj]
    lam = lam / (n - 1)
    total = float(lam.sum())
    if not total > 0:
        raise ValueError("all grids are identical; variance is zero")
    # deterministic sign: largest-magnitude projection of each axis positive
    idx = np.argmax(np.abs(proj), axis=0)
    proj = proj * np.sign(proj[idx, np.arange(proj.shape[1])])
    unexplained = np.clip(1.0 - np.concatenate([[0.0], np.cumsum(lam)]) / total, 0.0, 1.0)
    return PcaReport(lam, unexplained, proj, total)
