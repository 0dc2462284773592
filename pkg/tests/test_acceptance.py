"""Acceptance criteria 1-9.

Each test records one PASS/FAIL line (collected in the terminal summary)
before asserting. Criteria 4-8 share checkpoints trained once per session
and are marked ``slow``; together they take roughly 40 minutes on one core.
"""

import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from rftransfer import cli
from rftransfer.data.synthetic import (DeformableConfig, FragmentConfig, gen_deformable_pair,
                                       gen_rigid_fragment_pair)
from rftransfer.extract import PatchParams, Surface, extract_features, patch_grids
from rftransfer.geom import (RigidTransform, cotan_stiffness, icosphere, nearest_neighbors, normalize_unit_area,
                             spectral_basis)
from rftransfer.gradcheck import run_checks
from rftransfer.match import PointToPointMap, fmap_from_features, fmap_from_p2p, match_pipeline
from rftransfer.metrics import dirichlet_energy, geodesic_error, patch_pca
from rftransfer.net.layers import conv3d_forward
from rftransfer.pretrain import (PretrainConfig, chance_inlier_rate, cycle_loss, inlier_rate, loss_ratio,
                                 pretrain_run)
from rftransfer.rfopt import RfOptConfig, build_bank, mmd, mmd_at_scale, optimize_receptive_field

N_TRAIN_PAIRS = 200
TRAIN_STEPS = 2000
N_POINTS = 24


# ---------------------------------------------------------------------------
# 1. Gradient suite


def test_criterion_1_gradient_suite(report):
    t0 = time.perf_counter()
    results = run_checks()
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.error / r.tol)
    ok = all(r.passed for r in results) and elapsed < 120
    detail = (f"{sum(r.passed for r in results)}/{len(results)} checks within tolerance, "
              f"worst {worst.name} {worst.error:.1e} (tol {worst.tol:.0e}), {elapsed:.0f}s (limit 120s)")
    report(1, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 2. Oracle equivalence


def _conv_loop(x, w, b, stride):
    B, D, H, W, _ = x.shape
    Do, Ho, Wo = [(n - 1) // stride + 1 for n in (D, H, W)]
    out = np.zeros((B, Do, Ho, Wo, w.shape[-1]))
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    for n in range(B):
        for i in range(Do):
            for j in range(Ho):
                for k in range(Wo):
                    patch = xp[n, i * stride:i * stride + 3, j * stride:j * stride + 3, k * stride:k * stride + 3]
                    out[n, i, j, k] = np.einsum("abci,abcio->o", patch, w) + b
    return out


def _knn_brute(ref, qry, k):
    d = ((qry[:, None, :] - ref[None, :, :]) ** 2).sum(-1)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def _mmd_loops(A, B, h):
    k = lambda x, y: np.exp(-np.sum((x - y) ** 2) / h ** 2)  # noqa: E731
    a, b = len(A), len(B)
    return (sum(k(x, y) for x in A for y in A) / a ** 2 + sum(k(x, y) for x in B for y in B) / b ** 2
            - 2 * sum(k(x, y) for x in A for y in B) / (a * b))


def _dirichlet_gradients(mesh, f):
    """Sum over faces of area * |grad f|^2 for the piecewise-linear interpolant."""
    total = 0.0
    for tri in mesh.faces:
        p = mesh.vertices[tri]
        e1, e2 = p[1] - p[0], p[2] - p[0]
        G = np.array([[e1 @ e1, e1 @ e2], [e1 @ e2, e2 @ e2]])
        df = np.array([f[tri[1]] - f[tri[0]], f[tri[2]] - f[tri[0]]])
        area = 0.5 * np.linalg.norm(np.cross(e1, e2))
        total += area * df @ np.linalg.solve(G, df)
    return total


def test_criterion_2_oracles(report):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    n_inst = 100
    worst = {}

    err = 0.0
    for _ in range(n_inst):
        size, cin, cout, stride = rng.integers(2, 6), rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 3)
        x = rng.normal(size=(int(rng.integers(1, 3)), size, size, size, cin))
        w, b = rng.normal(size=(3, 3, 3, cin, cout)), rng.normal(size=cout)
        got, _ = conv3d_forward(x, w, b, int(stride))
        ref = _conv_loop(x, w, b, int(stride))
        err = max(err, np.max(np.abs(got - ref)) / np.max(np.abs(ref)))
    worst["conv"] = (err, 1e-10)

    mismatches = 0
    for i in range(n_inst):
        ref = rng.normal(size=(int(rng.integers(1, 60)), 3))
        if i % 2:
            ref = np.round(ref)  # integer grid: many exact ties
        qry = np.round(rng.normal(size=(20, 3))) if i % 2 else rng.normal(size=(20, 3))
        k = int(rng.integers(1, len(ref) + 1))
        mismatches += int(not np.array_equal(nearest_neighbors(ref, qry, k), _knn_brute(ref, qry, k)))
    worst["knn"] = (float(mismatches), 0.0)

    err = 0.0
    for _ in range(n_inst):
        A = rng.normal(size=(int(rng.integers(1, 12)), 4))
        B = rng.normal(size=(int(rng.integers(1, 12)), 4)) + rng.normal()
        h = float(rng.uniform(0.5, 3))
        err = max(err, abs(mmd(A, B, h)[0] - _mmd_loops(A, B, h)))
    worst["mmd"] = (err, 1e-12)

    mesh = normalize_unit_area(icosphere(2))
    W = cotan_stiffness(mesh)
    err = 0.0
    for _ in range(n_inst):
        f = rng.normal(size=mesh.n_vertices)
        ref = _dirichlet_gradients(mesh, f)
        err = max(err, abs(dirichlet_energy(f, W) - ref) / ref)
    worst["dirichlet"] = (err, 1e-9)

    basis = spectral_basis(mesh, 20)
    sw = np.sqrt(basis.mass)[:, None]
    err = 0.0
    for i in range(n_inst):
        k = int(rng.integers(3, 21))
        T = PointToPointMap(rng.integers(0, mesh.n_vertices, mesh.n_vertices), mesh.n_vertices)
        C = fmap_from_p2p(T, basis, basis, k)
        ref = np.linalg.lstsq(sw * basis.eigenvectors[:, :k], sw * basis.eigenvectors[T.target, :k], rcond=None)[0]
        err = max(err, np.max(np.abs(C - ref)))
        F1, F2 = rng.normal(size=(mesh.n_vertices, 25)), rng.normal(size=(mesh.n_vertices, 25))
        C2, _ = fmap_from_features(F1, F2, basis, basis, k)
        A1 = basis.project(F1)[:k]
        A2 = basis.project(F2)[:k]
        ref2 = np.linalg.lstsq(A1.T, A2.T, rcond=None)[0].T
        err = max(err, np.max(np.abs(C2 - ref2)) / np.max(np.abs(ref2)))
    worst["fmap_lstsq"] = (err, 1e-9)

    elapsed = time.perf_counter() - t0
    ok = all(e <= tol for e, tol in worst.values()) and elapsed < 120
    detail = (", ".join(f"{k} {e:.1e}<={tol:.0e}" for k, (e, tol) in worst.items())
              + f" on {n_inst} instances each, {elapsed:.0f}s (limit 120s)")
    report(2, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 3. Cycle loss zero case


def test_criterion_3_cycle_zero(report):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        T = RigidTransform.random(rng, translation_scale=float(rng.uniform(0.1, 10)))
        worst = max(worst, cycle_loss(T, T.inverse())[0])
    ok = worst < 1e-9
    detail = f"max loss over 1000 transforms {worst:.1e} (limit 1e-9)"
    report(3, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# Shared trained checkpoints


@pytest.fixture(scope="session")
def trained():
    t0 = time.perf_counter()
    pairs = [gen_rigid_fragment_pair(s) for s in range(N_TRAIN_PAIRS)]
    runs = {}
    for loss in ("nce", "cycle"):
        runs[loss] = pretrain_run(pairs, PretrainConfig(loss=loss, n_points=N_POINTS, steps=TRAIN_STEPS))
    held = [gen_rigid_fragment_pair(s) for s in range(5000, 5020)]
    inliers = {loss: inlier_rate(r.checkpoint.theta, held) for loss, r in runs.items()}
    chance = chance_inlier_rate(held)
    return {"runs": runs, "inliers": inliers, "chance": chance, "seconds": time.perf_counter() - t0}


# ---------------------------------------------------------------------------
# 4. Pre-training descent


@pytest.mark.slow
def test_criterion_4_pretraining(trained, report):
    ratios = {k: loss_ratio(r.losses) for k, r in trained["runs"].items()}
    inl, chance = trained["inliers"], trained["chance"]
    ok = (ratios["nce"] < 0.5 and ratios["cycle"] < 0.2
          and all(v >= 3 * chance for v in inl.values()) and trained["seconds"] < 1800)
    detail = (f"loss ratio nce {ratios['nce']:.3f} (<0.5), cycle {ratios['cycle']:.3f} (<0.2); "
              f"inlier rate nce {inl['nce']:.3f}, cycle {inl['cycle']:.3f} vs random-feature "
              f"{chance:.4f} (need 3x); {trained['seconds'] / 60:.1f} min (limit 30)")
    report(4, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 5. Receptive-field scale recovery


@pytest.mark.slow
def test_criterion_5_scale_recovery(trained, report):
    ckpt = trained["runs"]["nce"].checkpoint
    t0 = time.perf_counter()
    fc = FragmentConfig(spacing=0.03)
    sources = [Surface.from_cloud(c) for s in range(1000, 1010)
               for c in (gen_rigid_fragment_pair(s, fc).P, gen_rigid_fragment_pair(s, fc).Q)]
    bank = build_bank(ckpt, sources, n_s=2000, seed=0)
    summary, ok = [], True
    for alpha in (0.5, 2.0, 4.0):
        hits, reductions, ratios = 0, [], []
        for seed in range(5):
            rng = np.random.default_rng(seed)
            targets = [Surface(RigidTransform.random(rng).apply(s.points) * alpha) for s in sources]
            res = optimize_receptive_field(ckpt, bank, targets, RfOptConfig(seed=seed))
            e0 = mmd_at_scale(ckpt, bank, targets, res.s0, 256, seed + 1)
            e1 = mmd_at_scale(ckpt, bank, targets, res.s, 256, seed + 1)
            hits += abs(res.ratio / alpha - 1) <= 0.1
            reductions.append(e1 / e0)
            ratios.append(res.ratio)
        ok &= hits >= 4 and max(reductions) <= 0.2
        summary.append(f"a={alpha:g}: {hits}/5 within 10% (s*/s0 {min(ratios):.2f}-{max(ratios):.2f}), "
                       f"E(s*)/E(s0)<={max(reductions):.3f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 1200
    detail = "; ".join(summary) + f"; {elapsed / 60:.1f} min (limit 20)"
    report(5, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 6. Smoothness ordering and 7. spectral refinement share deformable pairs


def _deformable(seed):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return gen_deformable_pair(seed, DeformableConfig())


def _mesh_features(ckpt, mesh):
    return extract_features(ckpt, Surface.from_mesh(mesh), mesh.vertices)[0]


@pytest.mark.slow
def test_criterion_6_dirichlet_ordering(trained, report):
    energy = {"nce": [], "cycle": []}
    normalized = {"nce": [], "cycle": []}
    for seed in range(5):
        pair = _deformable(seed)
        for loss, run in trained["runs"].items():
            for mesh in (pair.mesh1, pair.mesh2):
                F = _mesh_features(run.checkpoint, mesh)
                e = dirichlet_energy(F, cotan_stiffness(mesh))
                energy[loss].append(e)
                normalized[loss].append(e / np.mean(np.var(F, axis=0)))
    m = {k: float(np.mean(v)) for k, v in energy.items()}
    n = {k: float(np.mean(v)) for k, v in normalized.items()}
    ok = m["cycle"] <= m["nce"]
    detail = (f"mean Dirichlet energy cycle {m['cycle']:.4g} <= nce {m['nce']:.4g} over 5 seeds "
              f"(variance-normalized: cycle {n['cycle']:.4g}, nce {n['nce']:.4g})")
    report(6, ok, detail)
    assert ok, detail


@pytest.mark.slow
def test_criterion_7_zoomout(trained, report):
    ckpt = trained["runs"]["nce"].checkpoint
    gains = []
    for seed in range(10):
        pair = _deformable(seed)
        b1, b2 = spectral_basis(pair.mesh1, 100), spectral_basis(pair.mesh2, 100)
        res = match_pipeline(_mesh_features(ckpt, pair.mesh1), _mesh_features(ckpt, pair.mesh2), b1, b2,
                             k_start=30, k_end=100, n_iter=10)
        gt = PointToPointMap.identity(pair.mesh2.n_vertices)
        e_nn = geodesic_error(res.nn_map, gt, pair.mesh1).mean
        e_zo = geodesic_error(res.refined_map, gt, pair.mesh1).mean
        gains.append(1 - e_zo / e_nn)
    med, worst = float(np.median(gains)), float(np.min(gains))
    ok = med >= 0.2 and worst >= -0.01
    detail = f"median error reduction {med:.2f} (>=0.20), worst pair {worst:+.2f} (>=-0.01) over 10 pairs"
    report(7, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 8. Patch diversity


@pytest.mark.slow
def test_criterion_8_pca_ordering(report):
    from rftransfer.rfopt import sample_centers

    pp = PatchParams()
    counts = {}
    for name, prims in (("rich", ("plane", "sphere", "cylinder", "superellipsoid")), ("spheres", ("sphere",))):
        fc = FragmentConfig(primitives=prims)
        surfaces = [Surface.from_cloud(gen_rigid_fragment_pair(s, fc).P) for s in range(20)]
        groups = sample_centers(surfaces, 5000, np.random.default_rng(0))
        grids = np.concatenate([patch_grids(surfaces[k], c, pp.s, pp.r_lrf, pp)[0] for k, c in groups])
        counts[name] = patch_pca(grids).components_for(0.9)
    ok = counts["rich"] > counts["spheres"]
    detail = f"components for 90% variance: rich {counts['rich']} > spheres {counts['spheres']} (5000 patches each)"
    report(8, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 9. CLI determinism


def test_criterion_9_rerun_byte_identical(tmp_path, report):
    def run(*argv):
        code = cli.main([str(a) for a in argv])
        assert code == 0, argv
        return Path(argv[argv.index("--out") + 1])

    d = tmp_path
    frag = run("gen-data", "--n", 2, "--seed", 4, "--out", d / "frag")
    defo = run("gen-data", "--kind", "deformable", "--n", 1, "--seed", 4, "--out", d / "def")
    pt = run("pretrain", "--data", frag, "--steps", 5, "--n-points", 8, "--seed", 4, "--out", d / "pt")
    ck = d / "pt" / "checkpoint"
    outs = [frag, defo, pt,
            run("rfopt", "--checkpoint", ck, "--source", frag, "--target", frag, "--target-scale", 1.5,
                "--n-s", 64, "--n-t", 4, "--max-iter", 3, "--eval-every", 2, "--n-eval", 16, "--out", d / "rf")]
    m1, m2 = d / "def" / "pair_0000_a.off", d / "def" / "pair_0000_b.off"
    outs += [run("extract", "--checkpoint", ck, "--shape", m1, "--out", d / "e1"),
             run("extract", "--checkpoint", ck, "--shape", m2, "--out", d / "e2")]
    outs += [run("match", "--shape1", m1, "--shape2", m2, "--features1", d / "e1" / "features.csv",
                 "--features2", d / "e2" / "features.csv", "--gt", "identity", "--out", d / "m")]
    outs += [run("eval", "--map", d / "m" / "refined_map.csv", "--target-mesh", m1,
                 "--features", d / "e1" / "features.csv", "--mesh", m1, "--out", d / "ev"),
             run("pca", "--data", frag, "--n-patches", 64, "--resolution", 8, "--out", d / "pca"),
             run("gradcheck", "--check", "mmd", "nce_loss", "voxelize_scale", "--out", d / "gc")]
    compared, differing = 0, []
    for out in outs:
        again = run("rerun", out / cli.MANIFEST_NAME, "--out", str(out) + "_again")
        for f in sorted(out.rglob("*.csv")):
            compared += 1
            if f.read_bytes() != (again / f.relative_to(out)).read_bytes():
                differing.append(str(f.relative_to(d)))
    ok = compared > 0 and not differing
    detail = f"{compared} CSVs from {len(outs)} runs across 8 commands reproduced byte-identically" + (
        f"; differing: {differing}" if differing else "")
    report(9, ok, detail)
    assert ok, detail
