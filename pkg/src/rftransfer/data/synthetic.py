"""Synthetic stand-ins for scanned scene fragments and deformable shape pairs.

Rigid fragment pairs are two overlapping partial views of a random composite
surface (planes, spheres, cylinders, superellipsoids) sampled once with a
Poisson-disk process; each view gets independent noise, dropout and a random
pose. Deformable pairs are a bumpy tube bent smoothly along its backbone or
a bumpy sphere twisted about an axis, with identical connectivity.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..geom import PointCloud, RigidTransform, TriMesh, icosphere, normalize_unit_area

PRIMITIVES = ("plane", "sphere", "cylinder", "superellipsoid")


# ---------------------------------------------------------------------------
# Primitive surfaces as triangle meshes


def _grid_faces(nu: int, nv: int, wrap_v: bool) -> np.ndarray:
    """Faces of a (nu, nv) vertex grid, optionally periodic in v."""
    i, j = np.meshgrid(np.arange(nu - 1), np.arange(nv if wrap_v else nv - 1), indexing="ij")
    i, j = i.ravel(), j.ravel()
    j1 = (j + 1) % nv
    a, b = i * nv + j, i * nv + j1
    c, d = (i + 1) * nv + j, (i + 1) * nv + j1
    return np.concatenate([np.stack([a, b, d], 1), np.stack([a, d, c], 1)])


def _plane(rng) -> TriMesh:
    w, h = rng.uniform(0.8, 2.0, size=2)
    v = np.array([[-w, -h, 0], [w, -h, 0], [-w, h, 0], [w, h, 0]]) * 0.5
    return TriMesh(v, np.array([[0, 1, 3], [0, 3, 2]]))


def _sphere(rng) -> TriMesh:
    m = icosphere(2)
    return TriMesh(m.vertices * rng.uniform(0.15, 0.5), m.faces)


def _cylinder(rng, n_theta: int = 32, n_z: int = 6) -> TriMesh:
    r = rng.uniform(0.1, 0.35)
    h = rng.uniform(0.4, 1.2)
    th = np.linspace(0, 2 * np.pi, n_theta, endpoint=False)
    z = np.linspace(-h / 2, h / 2, n_z)
    Z, T = np.meshgrid(z, th, indexing="ij")
    side = np.stack([r * np.cos(T), r * np.sin(T), Z], axis=-1).reshape(-1, 3)
    faces = [_grid_faces(n_z, n_theta, True)]
    verts = [side, np.array([[0, 0, -h / 2], [0, 0, h / 2]])]
    bottom, top = len(side), len(side) + 1
    ring = np.arange(n_theta)
    faces.append(np.stack([np.full(n_theta, bottom), (ring + 1) % n_theta, ring], 1))
    top_ring = ring + (n_z - 1) * n_theta
    faces.append(np.stack([np.full(n_theta, top), top_ring, (ring + 1) % n_theta + (n_z - 1) * n_theta], 1))
    return TriMesh(np.concatenate(verts), np.concatenate(faces))


def _spow(x, e):
    return np.sign(x) * np.abs(x) ** e


def _superellipsoid(rng, n_eta: int = 24, n_omega: int = 48) -> TriMesh:
    a = rng.uniform(0.15, 0.5, size=3)
    e1, e2 = rng.uniform(0.3, 1.8, size=2)
    eta = np.linspace(-np.pi / 2, np.pi / 2, n_eta)
    om = np.linspace(-np.pi, np.pi, n_omega, endpoint=False)
    E, O = np.meshgrid(eta, om, indexing="ij")
    v = np.stack([
        a[0] * _spow(np.cos(E), e1) * _spow(np.cos(O), e2),
        a[1] * _spow(np.cos(E), e1) * _spow(np.sin(O), e2),
        a[2] * _spow(np.sin(E), e1),
    ], axis=-1).reshape(-1, 3)
    return TriMesh(v, _grid_faces(n_eta, n_omega, True))


_BUILDERS = {"plane": _plane, "sphere": _sphere, "cylinder": _cylinder,
             "superellipsoid": _superellipsoid}


def _random_rotation(rng) -> np.ndarray:
    return RigidTransform.random(rng, 0.0).R


def composite_scene(rng: np.random.Generator, n_primitives: int,
                    primitives=PRIMITIVES, extent: float = 0.8) -> TriMesh:
    """Union (not merged) of randomly posed primitive meshes."""
    verts, faces, offset = [], [], 0
    for _ in range(n_primitives):
        kind = primitives[rng.integers(len(primitives))]
        m = _BUILDERS[kind](rng)
        R = _random_rotation(rng)
        t = rng.uniform(-extent, extent, size=3)
        verts.append(m.vertices @ R.T + t)
        faces.append(m.faces + offset)
        offset += m.n_vertices
    return TriMesh(np.concatenate(verts), np.concatenate(faces))


def poisson_disk_sample(mesh: TriMesh, radius: float, rng: np.random.Generator,
                        oversample: float = 4.0) -> np.ndarray:
    """Maximal Poisson-disk subset of dense area-uniform surface samples.

    Computed as a maximal independent set of the ``radius`` conflict graph,
    with random priorities resolved in parallel rounds.
    """
    n_cand = max(16, int(np.ceil(oversample * mesh.area() / radius ** 2)))
    cand = mesh.sample_surface(n_cand, seed=int(rng.integers(2 ** 31)))
    pairs = cKDTree(cand).query_pairs(radius, output_type="ndarray")
    prio = rng.permutation(n_cand)
    alive = np.ones(n_cand, dtype=bool)
    chosen = np.zeros(n_cand, dtype=bool)
    while alive.any():
        live = pairs[alive[pairs[:, 0]] & alive[pairs[:, 1]]]
        beaten = np.zeros(n_cand, dtype=bool)
        lo = np.where(prio[live[:, 0]] < prio[live[:, 1]], live[:, 0], live[:, 1])
        beaten[lo] = True
        win = alive & ~beaten
        chosen |= win
        alive &= ~win
        hit = np.zeros(n_cand, dtype=bool)
        hit[live[:, 1][win[live[:, 0]]]] = True
        hit[live[:, 0][win[live[:, 1]]]] = True
        alive &= ~hit
        pairs = live
    return cand[chosen]


# ---------------------------------------------------------------------------
# Rigid fragment pairs


@dataclass(frozen=True)
class FragmentConfig:
    n_primitives: tuple[int, int] = (3, 8)
    primitives: tuple[str, ...] = PRIMITIVES
    spacing: float = 0.05
    noise: float = 0.0
    dropout: float = 0.0
    overlap: float = 0.6
    min_overlap: float = 0.1
    translation_scale: float = 1.0
    max_retries: int = 10

    def __post_init__(self):
        if not 0 < self.overlap <= 1:
            raise ValueError("overlap must lie in (0, 1]")
        if self.spacing <= 0 or self.noise < 0 or not 0 <= self.dropout < 1:
            raise ValueError("invalid spacing, noise or dropout")
        lo, hi = self.n_primitives
        if not 1 <= lo <= hi:
            raise ValueError("n_primitives must be an increasing positive range")
        unknown = set(self.primitives) - set(PRIMITIVES)
        if unknown or not self.primitives:
            raise ValueError(f"unknown primitive kinds {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_primitives"] = list(self.n_primitives)
        d["primitives"] = list(self.primitives)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FragmentConfig":
        d = dict(d)
        if "n_primitives" in d:
            d["n_primitives"] = tuple(d["n_primitives"])
        if "primitives" in d:
            d["primitives"] = tuple(d["primitives"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class FragmentPair:
    P: PointCloud
    Q: PointCloud
    T_gt: RigidTransform
    correspondences: np.ndarray
    overlap: float
    spacing: float
    tolerance: float
    seed: int = 0
    meta: dict = field(default_factory=dict)


def correspondences_under(P: np.ndarray, Q: np.ndarray, T: RigidTransform, tol: float) -> np.ndarray:
    """Mutual nearest neighbors between ``T(P)`` and ``Q`` closer than ``tol``."""
    TP = T.apply(P)
    d_pq, j = cKDTree(Q).query(TP)
    _, i_back = cKDTree(TP).query(Q)
    i = np.arange(len(P))
    keep = (d_pq <= tol) & (i_back[j] == i)
    return np.stack([i[keep], j[keep]], axis=1).astype(np.int64)


def _split(points: np.ndarray, rng, overlap: float) -> tuple[np.ndarray, np.ndarray]:
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    proj = points @ d
    hi = np.quantile(proj, 0.5 + overlap / 2)
    lo = np.quantile(proj, 0.5 - overlap / 2)
    return np.flatnonzero(proj <= hi), np.flatnonzero(proj >= lo)


def gen_rigid_fragment_pair(seed: int, cfg: FragmentConfig = FragmentConfig()) -> FragmentPair:
    rng = np.random.default_rng(seed)
    for attempt in range(cfg.max_retries):
        n_prim = int(rng.integers(cfg.n_primitives[0], cfg.n_primitives[1] + 1))
        scene = composite_scene(rng, n_prim, cfg.primitives)
        pts = poisson_disk_sample(scene, cfg.spacing, rng)
        spacing = float(cKDTree(pts).query(pts, k=2)[0][:, 1].mean())
        tol = 2.0 * spacing
        ip, iq = _split(pts, rng, cfg.overlap)
        if cfg.dropout > 0:
            ip = ip[rng.random(len(ip)) >= cfg.dropout]
            iq = iq[rng.random(len(iq)) >= cfg.dropout]
        if len(ip) < 10 or len(iq) < 10:
            continue
        p = pts[ip] + rng.normal(scale=cfg.noise, size=(len(ip), 3)) if cfg.noise else pts[ip].copy()
        q = pts[iq] + rng.normal(scale=cfg.noise, size=(len(iq), 3)) if cfg.noise else pts[iq].copy()
        T_P = RigidTransform.random(rng, cfg.translation_scale)
        T_Q = RigidTransform.random(rng, cfg.translation_scale)
        T_gt = T_Q.compose(T_P.inverse())
        P, Q = T_P.apply(p), T_Q.apply(q)
        omega = correspondences_under(P, Q, T_gt, tol)
        ratio = len(omega) / len(P)
        if ratio >= cfg.min_overlap and len(omega) >= 3:
            return FragmentPair(PointCloud(P), PointCloud(Q), T_gt, omega, float(ratio), spacing, tol,
                                seed, {"attempt": attempt, "n_primitives": n_prim})
    raise RuntimeError(f"overlap target not reached after {cfg.max_retries} attempts (seed {seed})")


# ---------------------------------------------------------------------------
# Deformable pairs


@dataclass(frozen=True)
class DeformableConfig:
    base: str = "tube"
    bend_deg: float = 30.0
    twist_deg: float = 0.0
    max_distortion: float = 0.05
    resolution: int = 1
    n_bumps: int = 10

    def __post_init__(self):
        if self.base not in ("tube", "bumpy_sphere"):
            raise ValueError(f"unknown base shape {self.base!r}")
        if self.max_distortion <= 0:
            raise ValueError("max_distortion must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DeformableConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class DeformablePair:
    mesh1: TriMesh
    mesh2: TriMesh
    bend_deg: float
    twist_deg: float
    distortion: float
    seed: int = 0

    @property
    def gt_map(self) -> np.ndarray:
        return np.arange(self.mesh1.n_vertices)


def edge_distortion(m1: TriMesh, m2: TriMesh) -> float:
    """Largest relative change of any edge length."""
    e = m1.edges()
    l1 = np.linalg.norm(m1.vertices[e[:, 0]] - m1.vertices[e[:, 1]], axis=1)
    l2 = np.linalg.norm(m2.vertices[e[:, 0]] - m2.vertices[e[:, 1]], axis=1)
    return float(np.max(np.abs(l2 - l1) / l1))


def _bumps(rng, n: int, size: int):
    return (rng.uniform(0, 1, size=(n, size)), rng.uniform(-1, 1, size=n))


class _Tube:
    """Closed tube around a straight backbone along z, in body coordinates.

    Each vertex stores its backbone parameter ``u`` and its offset from the
    backbone, so bending the backbone moves every cross-section rigidly.
    """

    def __init__(self, rng, resolution: int = 1, length: float = 1.0, radius: float = 0.035):
        n_u = 48 * resolution
        n_v = 12 * resolution
        n_cap = 3 * resolution
        u = np.linspace(0.0, length, n_u)
        v = np.linspace(0, 2 * np.pi, n_v, endpoint=False)
        # radius profile: smooth bumps along the length and a few angular lobes
        c = rng.uniform(0, length, 5)
        a = rng.uniform(-0.25, 0.35, 5)
        wdt = rng.uniform(0.06, 0.15, 5) * length
        prof = 1 + (a[:, None] * np.exp(-0.5 * ((u[None] - c[:, None]) / wdt[:, None]) ** 2)).sum(0)
        lobes = np.zeros((n_u, n_v))
        for m in (2, 3):
            amp = rng.uniform(0.05, 0.2) * np.sin(np.pi * (u / length) * rng.integers(1, 4)) ** 2
            lobes += amp[:, None] * np.cos(m * v[None] + rng.uniform(0, 2 * np.pi))
        r = radius * prof[:, None] * (1 + lobes)
        U = np.repeat(u, n_v)
        off = np.stack([r * np.cos(v)[None], r * np.sin(v)[None], np.zeros_like(r)], -1).reshape(-1, 3)
        faces = [_grid_faces(n_u, n_v, True)]
        us, offs = [U], [off]
        # hemispherical caps beyond each end, then a pole vertex
        base = n_u * n_v
        prev_start = 0
        prev_end = (n_u - 1) * n_v
        ring = np.arange(n_v)
        for k in range(1, n_cap + 1):
            ang = k * (np.pi / 2) / (n_cap + 1)
            for end in (0, 1):
                r_end = r[-1 if end else 0]
                us.append(np.full(n_v, (length + r_end.mean() * np.sin(ang)) if end else -r_end.mean() * np.sin(ang)))
                offs.append(np.stack([r_end * np.cos(ang) * np.cos(v), r_end * np.cos(ang) * np.sin(v),
                                      np.zeros(n_v)], -1))
            start_new, end_new = base, base + n_v
            faces.append(np.stack([start_new + ring, start_new + (ring + 1) % n_v, prev_start + (ring + 1) % n_v], 1))
            faces.append(np.stack([start_new + ring, prev_start + (ring + 1) % n_v, prev_start + ring], 1))
            faces.append(np.stack([prev_end + ring, prev_end + (ring + 1) % n_v, end_new + (ring + 1) % n_v], 1))
            faces.append(np.stack([prev_end + ring, end_new + (ring + 1) % n_v, end_new + ring], 1))
            prev_start, prev_end = start_new, end_new
            base += 2 * n_v
        for end in (0, 1):
            r_end = r[-1 if end else 0].mean()
            us.append(np.array([length + r_end if end else -r_end]))
            offs.append(np.zeros((1, 3)))
        south, north = base, base + 1
        faces.append(np.stack([np.full(n_v, south), prev_start + (ring + 1) % n_v, prev_start + ring], 1))
        faces.append(np.stack([np.full(n_v, north), prev_end + ring, prev_end + (ring + 1) % n_v], 1))
        self.u = np.concatenate(us)
        self.offset = np.concatenate(offs)
        self.faces = np.concatenate(faces)
        self.length = length

    def embed(self, bend: float, plane: float, n_steps: int = 4000) -> np.ndarray:
        """Vertex positions for a backbone bent by total angle ``bend``.

        Curvature follows a raised cosine over the backbone so the bend is
        smooth; the backbone keeps its arc length and cross-sections move
        rigidly with the backbone frame.
        """
        if bend == 0.0:
            return self.offset + self.u[:, None] * np.array([0.0, 0.0, 1.0])
        L = self.length
        grid = np.linspace(0.0, L, n_steps + 1)
        h = grid[1] - grid[0]
        kappa = bend * (1 - np.cos(2 * np.pi * grid / L)) / L
        axis = np.array([-np.sin(plane), np.cos(plane), 0.0])
        K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        frames = np.empty((len(grid), 3, 3))
        frames[0] = np.eye(3)
        for i in range(n_steps):
            ang = 0.5 * (kappa[i] + kappa[i + 1]) * h
            step = np.eye(3) + np.sin(ang) * K + (1 - np.cos(ang)) * (K @ K)
            frames[i + 1] = frames[i] @ step
        tang = frames[:, :, 2]
        pos = np.concatenate([np.zeros((1, 3)), np.cumsum(0.5 * (tang[1:] + tang[:-1]) * h, axis=0)])
        # linear extension beyond both ends for the caps
        u = self.u
        uc = np.clip(u, 0.0, L)
        idx = np.clip(np.rint(uc / h).astype(np.int64), 0, n_steps)
        base = pos[idx] + (uc - grid[idx])[:, None] * tang[idx] + (u - uc)[:, None] * tang[idx]
        return base + np.einsum("nij,nj->ni", frames[idx], self.offset)


def _bumpy_sphere(rng, subdivisions: int, n_bumps: int) -> TriMesh:
    m = icosphere(subdivisions)
    x = m.vertices
    c = rng.normal(size=(n_bumps, 3))
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    a = rng.uniform(-0.12, 0.25, n_bumps)
    w = rng.uniform(0.2, 0.45, n_bumps)
    d2 = ((x[:, None, :] - c[None]) ** 2).sum(-1)
    r = 1 + (a * np.exp(-d2 / (2 * w ** 2))).sum(1)
    return TriMesh(x * r[:, None], m.faces)


def _twist(v: np.ndarray, angle: float) -> np.ndarray:
    """Rotate about z by an angle that varies smoothly with height."""
    z = v[:, 2]
    lo, hi = z.min(), z.max()
    t = (z - lo) / (hi - lo)
    phi = angle * (t - 0.5)
    c, s = np.cos(phi), np.sin(phi)
    return np.stack([c * v[:, 0] - s * v[:, 1], s * v[:, 0] + c * v[:, 1], z], axis=1)


def gen_deformable_pair(seed: int, cfg: DeformableConfig = DeformableConfig()) -> DeformablePair:
    rng = np.random.default_rng(seed)
    bend = np.deg2rad(cfg.bend_deg) * rng.choice([-1.0, 1.0])
    twist = np.deg2rad(cfg.twist_deg) * rng.choice([-1.0, 1.0])
    if cfg.base == "tube":
        tube = _Tube(rng, cfg.resolution)
        plane = rng.uniform(0, 2 * np.pi)
        v1 = tube.embed(0.0, plane)
        faces = tube.faces

        def deform(b, tw):
            v = tube.embed(b, plane)
            return _twist(v, tw) if tw else v
    else:
        base = _bumpy_sphere(rng, 3 + cfg.resolution, cfg.n_bumps)
        v1, faces = base.vertices, base.faces

        def deform(b, tw):
            return _twist(v1, tw) if tw else v1.copy()

    m1 = TriMesh(v1, faces)
    scale = 1.0
    for _ in range(60):
        m2 = TriMesh(deform(bend * scale, twist * scale), faces)
        dist = edge_distortion(m1, m2)
        if dist <= cfg.max_distortion:
            break
        scale *= 0.85
    else:
        raise RuntimeError("could not satisfy the distortion bound")
    if scale < 1.0:
        warnings.warn(f"deformation amplitude reduced to {scale:.3f}x to keep edge distortion "
                      f"<= {cfg.max_distortion}", RuntimeWarning, stacklevel=2)
    n1 = normalize_unit_area(m1)
    n2 = normalize_unit_area(m2)
    return DeformablePair(n1, n2, float(np.rad2deg(abs(bend) * scale)), float(np.rad2deg(abs(twist) * scale)),
                          edge_distortion(n1, n2), seed)
