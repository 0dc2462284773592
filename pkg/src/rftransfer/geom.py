"""Mesh and point-cloud containers, discrete operators, spectra and geodesics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sparse
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg

from .errors import ConvergenceError, MeshError

DENSE_EIGEN_LIMIT = 3000


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.ascontiguousarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise ValueError("normals must match points in shape")
            if np.any(np.abs(np.linalg.norm(nrm, axis=1) - 1.0) > 1e-6):
                raise ValueError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, R: np.ndarray, t: np.ndarray) -> "PointCloud":
        normals = None if self.normals is None else self.normals @ R.T
        return PointCloud(self.points @ R.T + t, normals)

    def scaled(self, factor: float) -> "PointCloud":
        return PointCloud(self.points * factor, self.normals)


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        f = np.ascontiguousarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (m, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must be (f, 3), got {f.shape}")
        if not np.all(np.isfinite(v)):
            raise MeshError("vertices contain non-finite coordinates")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def face_areas(self) -> np.ndarray:
        if "face_areas" not in self._cache:
            v = self.vertices
            e1 = v[self.faces[:, 1]] - v[self.faces[:, 0]]
            e2 = v[self.faces[:, 2]] - v[self.faces[:, 0]]
            self._cache["face_areas"] = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
        return self._cache["face_areas"]

    def area(self) -> float:
        return float(self.face_areas().sum())

    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (e, 2) array with i < j."""
        if "edges" not in self._cache:
            f = self.faces
            e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
            e.sort(axis=1)
            self._cache["edges"] = np.unique(e, axis=0)
        return self._cache["edges"]

    def adjacency(self) -> sparse.csr_matrix:
        e = self.edges()
        m = self.n_vertices
        a = sparse.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(m, m))
        return (a + a.T).tocsr()

    def is_connected(self) -> bool:
        n_comp, _ = csgraph.connected_components(self.adjacency(), directed=False)
        return n_comp == 1

    def check_nondegenerate(self, rel_tol: float = 1e-12) -> None:
        areas = self.face_areas()
        total = areas.sum()
        if total <= 0:
            raise MeshError("mesh has zero total area")
        bad = np.flatnonzero(areas / total < rel_tol)
        if len(bad):
            raise MeshError(f"{len(bad)} degenerate face(s), first is face {bad[0]}")

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        return TriMesh(vertices, self.faces)

    def sample_surface(self, n: int, seed: int = 0) -> np.ndarray:
        """Area-uniform random surface samples (deterministic per seed)."""
        rng = np.random.default_rng(seed)
        areas = self.face_areas()
        fi = rng.choice(len(areas), size=n, p=areas / areas.sum())
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        a, b, c = (self.vertices[self.faces[fi, k]] for k in range(3))
        return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    mass: np.ndarray
    stiffness: sparse.csr_matrix

    @property
    def k(self) -> int:
        return len(self.eigenvalues)

    def truncated(self, k: int) -> "SpectralBasis":
        if k > self.k:
            raise ValueError(f"basis has {self.k} functions, asked for {k}")
        return SpectralBasis(self.eigenvalues[:k], self.eigenvectors[:, :k], self.mass, self.stiffness)

    def project(self, f: np.ndarray) -> np.ndarray:
        """Mass-weighted spectral coefficients Phi^T M f."""
        return self.eigenvectors.T @ (self.mass[:, None] * f if f.ndim == 2 else self.mass * f)


def _cotangents(mesh: TriMesh) -> np.ndarray:
    """Cotangent of the angle at each corner, shape (f, 3)."""
    v = mesh.vertices
    f = mesh.faces
    cots = np.empty(f.shape)
    for k in range(3):
        o = v[f[:, k]]
        a = v[f[:, (k + 1) % 3]] - o
        b = v[f[:, (k + 2) % 3]] - o
        cross = np.linalg.norm(np.cross(a, b), axis=1)
        cots[:, k] = np.einsum("ij,ij->i", a, b) / cross
    return cots


def cotan_stiffness(mesh: TriMesh) -> sparse.csr_matrix:
    """Symmetric positive semi-definite cotangent stiffness matrix.

    Off-diagonal entries are ``-(cot a + cot b) / 2`` for the two angles
    opposite each edge; the diagonal makes every row sum to zero. Weights are
    kept signed (no clamping) so that the generalized eigenproblem is exact.
    """
    mesh.check_nondegenerate()
    f = mesh.faces
    cots = _cotangents(mesh)
    rows, cols, vals = [], [], []
    for k in range(3):
        i = f[:, (k + 1) % 3]
        j = f[:, (k + 2) % 3]
        w = 0.5 * cots[:, k]
        rows += [i, j]
        cols += [j, i]
        vals += [-w, -w]
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    m = mesh.n_vertices
    off = sparse.coo_matrix((vals, (rows, cols)), shape=(m, m)).tocsr()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    W = (off + sparse.diags(diag)).tocsr()
    W.sum_duplicates()
    return W


def lumped_mass(mesh: TriMesh) -> np.ndarray:
    """Barycentric lumped mass: a third of the incident face areas per vertex."""
    mesh.check_nondegenerate()
    a = mesh.face_areas() / 3.0
    return np.bincount(mesh.faces.ravel(), weights=np.repeat(a, 3), minlength=mesh.n_vertices)


def _fix_signs(phi: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(phi), axis=0)
    signs = np.sign(phi[idx, np.arange(phi.shape[1])])
    signs[signs == 0] = 1.0
    return phi * signs


def spectral_basis(mesh: TriMesh, k: int, residual_tol: float = 1e-4) -> SpectralBasis:
    """First ``k`` Laplace-Beltrami eigenpairs solving ``W phi = lam M phi``.

    Eigenvectors are M-orthonormal, eigenvalues ascending. Meshes above
    ``DENSE_EIGEN_LIMIT`` vertices fall back to shift-invert Lanczos.
    """
    m = mesh.n_vertices
    if not 0 < k < m:
        raise ValueError(f"need 0 < k < n_vertices, got k={k}, m={m}")
    if not mesh.is_connected():
        raise MeshError("spectral basis requires a connected mesh")
    W = cotan_stiffness(mesh)
    M = lumped_mass(mesh)
    if m <= DENSE_EIGEN_LIMIT:
        isq = 1.0 / np.sqrt(M)
        A = W.toarray() * isq[:, None] * isq[None, :]
        A = 0.5 * (A + A.T)
        lam, psi = scipy.linalg.eigh(A, subset_by_index=[0, k - 1])
        phi = psi * isq[:, None]
    else:
        lam, phi = scipy.sparse.linalg.eigsh(W.tocsc(), k=k, M=sparse.diags(M).tocsc(), sigma=-1e-8)
        order = np.argsort(lam)
        lam, phi = lam[order], phi[:, order]
        norms = np.sqrt(np.einsum("ij,i,ij->j", phi, M, phi))
        phi = phi / norms
    lam = np.where(np.abs(lam) < 1e-9, 0.0, lam)
    phi = _fix_signs(phi)
    Wphi = W @ phi
    res = np.linalg.norm(Wphi - M[:, None] * phi * lam[None, :])
    scale = max(np.linalg.norm(Wphi), 1e-12)
    if res / scale > residual_tol:
        raise ConvergenceError(f"eigen residual {res / scale:.3e} exceeds {residual_tol:.1e}")
    return SpectralBasis(lam, phi, M, W)


def _edge_graph(mesh: TriMesh, virtual_edges: bool) -> sparse.csr_matrix:
    e = mesh.edges()
    if virtual_edges:
        # Connect the two vertices opposite each interior edge.
        f = mesh.faces
        he = np.concatenate([f[:, [0, 1, 2]], f[:, [1, 2, 0]], f[:, [2, 0, 1]]])
        key = np.sort(he[:, :2], axis=1)
        order = np.lexsort((key[:, 1], key[:, 0]))
        key, opp = key[order], he[order, 2]
        same = np.all(key[1:] == key[:-1], axis=1)
        extra = np.stack([opp[:-1][same], opp[1:][same]], axis=1)
        extra.sort(axis=1)
        extra = extra[extra[:, 0] != extra[:, 1]]
        e = np.unique(np.concatenate([e, extra]), axis=0)
    lengths = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    m = mesh.n_vertices
    g = sparse.coo_matrix((lengths, (e[:, 0], e[:, 1])), shape=(m, m))
    return (g + g.T).tocsr()


def geodesic_distances(mesh: TriMesh, source, virtual_edges: bool = False) -> np.ndarray:
    """Shortest-path distances on the mesh edge graph.

    ``source`` may be a single vertex index (returns shape (m,)) or an array
    of indices (returns shape (len(source), m)). Unreachable vertices get
    ``inf``.
    """
    key = ("graph", virtual_edges)
    if key not in mesh._cache:
        mesh._cache[key] = _edge_graph(mesh, virtual_edges)
    src = np.asarray(source, dtype=np.int64)
    if src.size and (src.min() < 0 or src.max() >= mesh.n_vertices):
        raise IndexError("source vertex out of range")
    return csgraph.dijkstra(mesh._cache[key], directed=False, indices=src)


def nearest_neighbors(reference: np.ndarray, queries: np.ndarray, k: int = 1, block: int = 512) -> np.ndarray:
    """Exact Euclidean k-NN by blocked brute force.

    Ties are broken toward the lower reference index. Returns a (q, k)
    integer matrix.
    """
    ref = np.asarray(reference, dtype=np.float64)
    qry = np.asarray(queries, dtype=np.float64)
    if ref.ndim == 1:
        ref = ref[:, None]
    if qry.ndim == 1:
        qry = qry[:, None]
    if len(ref) == 0:
        raise ValueError("empty reference set")
    if ref.shape[1] != qry.shape[1]:
        raise ValueError(f"dimension mismatch: {ref.shape[1]} vs {qry.shape[1]}")
    if k > len(ref):
        raise ValueError(f"k={k} exceeds reference size {len(ref)}")
    out = np.empty((len(qry), k), dtype=np.int64)
    if k == 1:
        return _nearest_one(ref, qry, block)[:, None]
    # keep each (step, n, d) difference block near 8M floats
    step = max(1, min(block, 8_000_000 // max(len(ref) * ref.shape[1], 1)))
    for start in range(0, len(qry), step):
        q = qry[start:start + step]
        d2 = np.square(q[:, None, :] - ref[None, :, :]).sum(axis=2)
        out[start:start + step] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def _nearest_one(ref: np.ndarray, qry: np.ndarray, block: int) -> np.ndarray:
    """1-NN via the Gram expansion, with near-ties re-resolved exactly."""
    rn = (ref * ref).sum(1)
    out = np.empty(len(qry), dtype=np.int64)
    for start in range(0, len(qry), block):
        q = qry[start:start + block]
        qn = (q * q).sum(1)
        d2 = qn[:, None] - 2.0 * q @ ref.T + rn[None, :]
        best = d2.min(axis=1)
        # rounding bound of the expansion
        tol = 1e-12 * (qn + rn.max()) * ref.shape[1] + 1e-300
        cand = d2 <= (best + tol)[:, None]
        single = cand.sum(1) == 1
        res = np.argmax(cand, axis=1)
        for i in np.flatnonzero(~single):
            idx = np.flatnonzero(cand[i])
            exact = np.square(ref[idx] - q[i]).sum(1)
            res[i] = idx[np.argmin(exact)]
        out[start:start + block] = res
    return out


def normalize_unit_area(mesh: TriMesh) -> TriMesh:
    """Center at the area-weighted centroid and scale to unit surface area."""
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise MeshError("cannot normalize a zero-area mesh")
    centroids = mesh.vertices[mesh.faces].mean(axis=1)
    center = (areas[:, None] * centroids).sum(axis=0) / total
    return TriMesh((mesh.vertices - center) / np.sqrt(total), mesh.faces)


def normalize_unit_diagonal(cloud: PointCloud) -> PointCloud:
    """Center at the bounding-box center and scale to unit box diagonal."""
    lo, hi = cloud.points.min(axis=0), cloud.points.max(axis=0)
    diag = np.linalg.norm(hi - lo)
    if not diag > 0:
        raise ValueError("cannot normalize a point cloud with zero extent")
    return PointCloud((cloud.points - 0.5 * (lo + hi)) / diag, cloud.normals)


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriMesh:
    """Geodesic sphere from repeated midpoint subdivision of an icosahedron."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = np.array(verts, dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(faces, dtype=np.int64)
    for _ in range(subdivisions):
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        uniq, inv = np.unique(e, axis=0, return_inverse=True)
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        base = len(v)
        v = np.concatenate([v, mid])
        nf = len(f)
        inv = inv.ravel()
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        ab, bc, ca = inv[:nf] + base, inv[nf:2 * nf] + base, inv[2 * nf:] + base
        f = np.concatenate([
            np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
        ])
    return TriMesh(v * radius, f)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``x -> R x + t`` with ``R`` a proper rotation."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("R must be 3x3")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("R must be orthonormal with det +1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def random(cls, rng: np.random.Generator, translation_scale: float = 1.0) -> "RigidTransform":
        # uniform rotation from a normalized Gaussian quaternion
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        R = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ])
        return cls(R, rng.normal(size=3) * translation_scale)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.R.T + self.t

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self after other``."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T
