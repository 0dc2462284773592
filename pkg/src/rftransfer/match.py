"""Dense correspondence from per-vertex features, refined spectrally.

Conventions. A point-to-point map ``T21`` assigns every vertex of shape 2 a
vertex of shape 1. A functional map ``C`` (k2 x k1) carries spectral
coefficients of functions on shape 1 to shape 2 (``C a1 ~ a2``); for a
vertex map it is the mass-weighted projection of the pulled-back basis,
``C = Phi2^T M2 Phi1[T21]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RankDeficientError
from .geom import SpectralBasis, nearest_neighbors


@dataclass(frozen=True, eq=False)
class PointToPointMap:
    """``target[i]`` is the image of source vertex ``i``; masked-out entries are ignored."""

    target: np.ndarray
    n_target: int
    mask: np.ndarray | None = None
    degenerate: bool = False

    def __post_init__(self):
        t = np.asarray(self.target, dtype=np.int64)
        if t.ndim != 1:
            raise ValueError("target must be one-dimensional")
        if len(t) and (t.min() < 0 or t.max() >= self.n_target):
            raise ValueError("target index out of range")
        object.__setattr__(self, "target", t)
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != t.shape:
                raise ValueError("mask must match target in shape")
            object.__setattr__(self, "mask", m)

    def __len__(self) -> int:
        return len(self.target)

    @property
    def valid(self) -> np.ndarray:
        return np.ones(len(self.target), dtype=bool) if self.mask is None else self.mask

    @classmethod
    def identity(cls, n: int) -> "PointToPointMap":
        return cls(np.arange(n), n)


def pointwise_map(F1: np.ndarray, F2: np.ndarray) -> tuple[PointToPointMap, PointToPointMap]:
    """Feature nearest-neighbor maps ``(T12, T21)``; ties go to the lower index."""
    F1 = np.atleast_2d(np.asarray(F1, dtype=np.float64))
    F2 = np.atleast_2d(np.asarray(F2, dtype=np.float64))
    if len(F1) == 0 or len(F2) == 0:
        raise ValueError("empty feature set")
    if F1.shape[1] != F2.shape[1]:
        raise ValueError("feature dimensions differ")
    t12 = nearest_neighbors(F2, F1, 1)[:, 0]
    t21 = nearest_neighbors(F1, F2, 1)[:, 0]
    return PointToPointMap(t12, len(F2)), PointToPointMap(t21, len(F1))


def mutual_filter(T12: PointToPointMap, T21: PointToPointMap) -> np.ndarray:
    """Pairs ``(x, y)`` with ``T12(x) = y`` and ``T21(y) = x``, as a (K, 2) array sorted by x."""
    if T12.n_target != len(T21) or T21.n_target != len(T12):
        raise ValueError("maps are not between the same pair of shapes")
    x = np.flatnonzero(T12.valid)
    y = T12.target[x]
    keep = T21.valid[y] & (T21.target[y] == x)
    return np.stack([x[keep], y[keep]], axis=1)


def fmap_from_p2p(T21: PointToPointMap, basis1: SpectralBasis, basis2: SpectralBasis,
                  k: int | tuple[int, int]) -> np.ndarray:
    """``C = Phi2^T M2 Phi1[T21]``, the M2-least-squares fit of ``Phi1 o T21`` in ``Phi2``."""
    k1, k2 = (k, k) if np.isscalar(k) else k
    if k1 > basis1.k or k2 > basis2.k:
        raise ValueError("basis has fewer functions than requested")
    if len(T21) != len(basis2.mass):
        raise ValueError("map does not start on shape 2")
    phi1 = basis1.eigenvectors[T21.target, :k1]
    phi2 = basis2.eigenvectors[:, :k2]
    w = basis2.mass * T21.valid
    if T21.mask is None:
        return phi2.T @ (w[:, None] * phi1)
    # masked maps: weighted least squares over the valid rows
    sw = np.sqrt(w)[:, None]
    C, _, rank, _ = np.linalg.lstsq(sw * phi2, sw * phi1, rcond=None)
    if rank < k2:
        raise RankDeficientError(f"only {rank} independent rows for {k2} basis functions")
    return C


def fmap_from_pairs(pairs: np.ndarray, basis1: SpectralBasis, basis2: SpectralBasis, k: int) -> np.ndarray:
    """Uniform-weight least squares ``Phi2[y] C ~ Phi1[x]`` over sparse pairs ``(x, y)``."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    A = basis2.eigenvectors[pairs[:, 1], :k]
    B = basis1.eigenvectors[pairs[:, 0], :k]
    C, _, rank, _ = np.linalg.lstsq(A, B, rcond=None)
    if rank < k:
        raise RankDeficientError(f"{len(pairs)} pairs give rank {rank} < {k}")
    return C


def p2p_from_fmap(C: np.ndarray, basis1: SpectralBasis, basis2: SpectralBasis) -> PointToPointMap:
    """``T21(y)`` = nearest row of ``Phi1 C^T`` to row ``y`` of ``Phi2``."""
    k2, k1 = C.shape
    emb1 = basis1.eigenvectors[:, :k1] @ C.T
    emb2 = basis2.eigenvectors[:, :k2]
    degenerate = bool(np.all(np.ptp(emb1, axis=0) == 0))
    return PointToPointMap(nearest_neighbors(emb1, emb2, 1)[:, 0], len(emb1), degenerate=degenerate)


def zoomout_schedule(k_start: int = 30, k_end: int = 100, n_iter: int = 10) -> np.ndarray:
    if k_end < k_start:
        raise ValueError("k_end must be >= k_start")
    if k_end == k_start:
        return np.array([k_start])
    return np.rint(np.linspace(k_start, k_end, n_iter + 1)).astype(int)


def zoomout(C_init: np.ndarray, basis1: SpectralBasis, basis2: SpectralBasis, k_start: int = 30,
            k_end: int = 100, n_iter: int = 10, return_history: bool = False):
    """Grow the spectral map from ``k_start`` to ``k_end`` in ``n_iter`` equal steps.

    Each step converts the current map to a vertex map and back at the next
    size. Returns the final vertex map ``T21`` (and the per-step maps when
    ``return_history`` is set).
    """
    if basis1.k < k_end or basis2.k < k_end:
        raise ValueError(f"bases need at least {k_end} functions")
    if C_init.shape != (k_start, k_start):
        raise ValueError(f"initial map must be {k_start}x{k_start}")
    ks = zoomout_schedule(k_start, k_end, n_iter)
    C = C_init
    history = []
    for k in ks[1:]:
        T = p2p_from_fmap(C, basis1, basis2)
        history.append(T)
        C = fmap_from_p2p(T, basis1, basis2, int(k))
    T = p2p_from_fmap(C, basis1, basis2)
    history.append(T)
    return (T, history) if return_history else T


@dataclass
class MatchResult:
    nn_map: PointToPointMap
    refined_map: PointToPointMap
    pairs: np.ndarray
    C_init: np.ndarray


def match_pipeline(F1: np.ndarray, F2: np.ndarray, basis1: SpectralBasis, basis2: SpectralBasis,
                   k_start: int = 30, k_end: int = 100, n_iter: int = 10) -> MatchResult:
    """Feature nearest neighbors, mutual check, then spectral refinement.

    The mutually consistent pairs seed the initial ``k_start`` map; the raw
    nearest-neighbor map ``T21`` is kept for comparison.
    """
    T12, T21 = pointwise_map(F1, F2)
    pairs = mutual_filter(T12, T21)
    if len(pairs) < k_start:
        raise RankDeficientError(f"mutual check kept {len(pairs)} pairs, fewer than {k_start}")
    C0 = fmap_from_pairs(pairs, basis1, basis2, k_start)
    T = zoomout(C0, basis1, basis2, k_start, k_end, n_iter)
    return MatchResult(T21, T, pairs, C0)


def fmap_from_features(F1: np.ndarray, F2: np.ndarray, basis1: SpectralBasis, basis2: SpectralBasis,
                       k: int, C_gt: np.ndarray | None = None, with_grad: bool = False):
    """Least-squares map between spectral feature coefficients.

    With ``A_i = Phi_i^T M_i F_i`` (k x d), returns ``C = argmin |C A1 - A2|^2``
    and, when ``C_gt`` is given, the loss ``|C - C_gt|^2``. With
    ``with_grad`` the gradients of that loss in ``F1`` and ``F2`` are appended.
    """
    F1 = np.asarray(F1, dtype=np.float64)
    F2 = np.asarray(F2, dtype=np.float64)
    if F1.shape[1] != F2.shape[1]:
        raise ValueError("feature dimensions differ")
    if F1.shape[1] < k:
        raise RankDeficientError(f"{F1.shape[1]} feature channels cannot determine a {k}x{k} map")
    phi1, phi2 = basis1.eigenvectors[:, :k], basis2.eigenvectors[:, :k]
    A1 = phi1.T @ (basis1.mass[:, None] * F1)
    A2 = phi2.T @ (basis2.mass[:, None] * F2)
    G = A1 @ A1.T
    if np.linalg.matrix_rank(G) < k:
        raise RankDeficientError("feature coefficients do not span the basis")
    X = np.linalg.solve(G, A1).T  # right pseudo-inverse of A1, (d, k)
    C = A2 @ X
    if C_gt is None:
        return C, None
    R = C - C_gt
    loss = float(np.sum(R * R))
    if not with_grad:
        return C, loss
    dC = 2.0 * R
    dA2 = dC @ X.T
    Y = A2.T @ dC
    dA1 = -X.T @ Y @ X.T + (X.T @ X) @ Y.T @ (np.eye(len(X)) - X @ A1)
    dF1 = basis1.mass[:, None] * (phi1 @ dA1)
    dF2 = basis2.mass[:, None] * (phi2 @ dA2)
    return C, loss, dF1, dF2
