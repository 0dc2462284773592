"""Command-line harness: ``rftransfer <command> [options]``.

Every command resolves its settings as defaults < ``--config`` JSON < flags,
writes its outputs under ``--out`` and records a ``run_manifest.json`` there.
``rftransfer rerun MANIFEST --out DIR`` replays a recorded run.

Exit codes: 0 success, 1 usage, 2 validation or contract failure,
3 numerical failure. ``RFTRANSFER_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import jsonschema
import numpy as np

from . import __version__
from .errors import ConvergenceError, NumericalError, ParseError

MANIFEST_NAME = "run_manifest.json"
MANIFEST_FORMAT = "rftransfer-run/1"
THREADS_ENV = "RFTRANSFER_THREADS"

EXIT_OK, EXIT_USAGE, EXIT_CONTRACT, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    """Bad command line; exits with code 1."""


class ContractError(Exception):
    """A run finished but violated its output contract; exits with code 2."""


# ---------------------------------------------------------------------------
# Parameter tables


@dataclass(frozen=True)
class Param:
    key: str
    kind: str  # int, float, str, bool, ints2, strs, input
    default: Any = None
    help: str = ""
    choices: tuple | None = None
    nullable: bool = False
    required: bool = False

    @property
    def flag(self) -> str:
        return "--" + self.key.replace("_", "-")

    def schema(self) -> dict:
        base = {"int": {"type": "integer"}, "float": {"type": "number"}, "str": {"type": "string"},
                "bool": {"type": "boolean"}, "input": {"type": "string", "minLength": 1},
                "ints2": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                "strs": {"type": "array", "items": {"type": "string"}, "minItems": 1}}[self.kind]
        base = dict(base)
        if self.choices:
            if self.kind == "strs":
                base["items"] = {"enum": list(self.choices)}
            else:
                base["enum"] = list(self.choices)
        if self.nullable:
            return {"anyOf": [base, {"type": "null"}]}
        return base


def _patch_params(s=0.3, r_lrf=0.3):
    return [
        Param("s", "float", s, "patch cube half-width"),
        Param("r_lrf", "float", r_lrf, "local frame support radius"),
        Param("sigma", "float", 1e-3, "voxel Gaussian width (unit-cube units squared)"),
        Param("margin", "float", 1.5, "crop radius as a multiple of the cube half-diagonal"),
        Param("resolution", "int", 16, "voxels per side"),
    ]


COMMON = [Param("seed", "int", 0, "random seed"), Param("out", "str", None, "output directory")]

PARAMS: dict[str, list[Param]] = {
    "gen-data": [
        Param("kind", "str", "fragments", "dataset type", ("fragments", "deformable")),
        Param("n", "int", 10, "number of pairs"),
        Param("n_primitives", "ints2", [3, 8], "fragment scenes: min and max primitive count"),
        Param("primitives", "strs", ["plane", "sphere", "cylinder", "superellipsoid"],
              "fragment scenes: primitive kinds", ("plane", "sphere", "cylinder", "superellipsoid")),
        Param("spacing", "float", 0.05, "fragment scenes: sampling spacing"),
        Param("noise", "float", 0.0, "fragment scenes: Gaussian noise std"),
        Param("dropout", "float", 0.0, "fragment scenes: fraction of points removed"),
        Param("overlap", "float", 0.6, "fragment scenes: target overlap fraction"),
        Param("min_overlap", "float", 0.1, "fragment scenes: smallest acceptable overlap"),
        Param("translation_scale", "float", 1.0, "fragment scenes: random translation scale"),
        Param("base", "str", "tube", "deformable: base shape", ("tube", "bumpy_sphere")),
        Param("bend_deg", "float", 30.0, "deformable: bend angle"),
        Param("twist_deg", "float", 0.0, "deformable: twist angle"),
        Param("max_distortion", "float", 0.05, "deformable: largest relative edge-length change"),
        Param("mesh_resolution", "int", 1, "deformable: mesh refinement level"),
        Param("n_bumps", "int", 10, "deformable: number of surface bumps"),
    ],
    "pretrain": [
        Param("data", "input", None, "fragment dataset directory", required=True),
        Param("eval_data", "input", None, "held-out fragment dataset for the inlier rate", nullable=True),
        Param("loss", "str", "nce", "training loss", ("nce", "cycle")),
        Param("steps", "int", 2000, "optimizer steps"),
        Param("lr", "float", 1e-3, "Adam learning rate"),
        Param("tau", "float", 0.07, "contrastive temperature"),
        Param("n_points", "int", 24, "anchor points per step"),
        Param("match_temp", "float", 0.1, "soft-correspondence temperature"),
        Param("init_seed", "int", None, "network initialization seed (defaults to --seed)", nullable=True),
        *_patch_params(),
    ],
    "rfopt": [
        Param("checkpoint", "input", None, "pre-trained checkpoint directory", required=True),
        Param("source", "input", None, "source dataset directory or shape file", required=True),
        Param("target", "input", None, "target dataset directory or shape file", required=True),
        Param("target_scale", "float", 1.0, "multiply target coordinates by this factor"),
        Param("surface_samples", "int", 0, "extra area-uniform samples per mesh"),
        Param("n_s", "int", 2000, "source feature bank size"),
        Param("n_t", "int", 16, "target patches per iteration"),
        Param("lr", "float", 0.05, "initial Adam learning rate on log s"),
        Param("lr_final", "float", 0.1, "final learning rate as a fraction of --lr"),
        Param("max_iter", "int", 150, "iteration cap"),
        Param("tol", "float", 1e-3, "relative change of s counted as stalled"),
        Param("patience", "int", 20, "stalled iterations before stopping"),
        Param("source_batch", "int", 512, "bank rows per iteration"),
        Param("eval_every", "int", 50, "full-bank evaluation period (0 disables)"),
        Param("n_eval", "int", 256, "target patches in a full evaluation"),
        Param("s_init", "float", None, "starting scale (defaults to the checkpoint scale)", nullable=True),
        Param("s_min", "float", 0.01, "lower clamp on s"),
        Param("s_max", "float", 2.0, "upper clamp on s"),
        Param("bandwidth", "float", None, "kernel bandwidth (defaults to the median heuristic)", nullable=True),
    ],
    "extract": [
        Param("checkpoint", "input", None, "checkpoint directory", required=True),
        Param("shape", "input", None, "mesh (OFF/PLY) or point cloud file", required=True),
        Param("s", "float", None, "receptive field (defaults to the checkpoint scale)", nullable=True),
        Param("surface_samples", "int", 0, "extra area-uniform samples for meshes"),
    ],
    "match": [
        Param("shape1", "input", None, "mesh the map lands on", required=True),
        Param("shape2", "input", None, "mesh the map starts from", required=True),
        Param("features1", "input", None, "per-vertex features of shape1 (CSV)", required=True),
        Param("features2", "input", None, "per-vertex features of shape2 (CSV)", required=True),
        Param("k_start", "int", 30, "initial spectral basis size"),
        Param("k_end", "int", 100, "final spectral basis size"),
        Param("n_iter", "int", 10, "refinement steps"),
        Param("gt", "str", "none", "ground truth for a summary error", ("none", "identity")),
    ],
    "eval": [
        Param("map", "input", None, "map CSV (vertex,target)", nullable=True),
        Param("target_mesh", "input", None, "mesh the map lands on", nullable=True),
        Param("gt", "input", "identity", "'identity' or a map CSV"),
        Param("virtual_edges", "bool", False, "add face-diagonal edges to the geodesic graph"),
        Param("features", "input", None, "per-vertex features CSV for the Dirichlet energy", nullable=True),
        Param("mesh", "input", None, "mesh the features live on", nullable=True),
    ],
    "pca": [
        Param("data", "input", None, "dataset directory or shape file", required=True),
        Param("n_patches", "int", 5000, "number of patches"),
        Param("n_proj", "int", 2, "projection axes to write"),
        Param("explained", "float", 0.9, "variance fraction for the component count"),
        Param("surface_samples", "int", 0, "extra area-uniform samples per mesh"),
        *_patch_params(),
    ],
    "gradcheck": [
        Param("all", "bool", False, "run every check"),
        Param("check", "strs", None, "checks to run", nullable=True),
    ],
}

COMMANDS = tuple(PARAMS)

HELP = {
    "gen-data": "generate a synthetic fragment or deformable dataset",
    "pretrain": "train the descriptor network on fragment pairs",
    "rfopt": "optimize the receptive field for a target domain",
    "extract": "compute per-vertex features of one shape",
    "match": "dense map between two meshes from their features",
    "eval": "geodesic map error and feature Dirichlet energy",
    "pca": "principal components of a voxelized patch set",
    "gradcheck": "finite-difference gradient checks",
}


def config_schema(command: str) -> dict:
    props = {p.key: p.schema() for p in PARAMS[command] + COMMON}
    props["out"] = {"anyOf": [{"type": "string"}, {"type": "null"}]}
    return {"type": "object", "properties": props, "additionalProperties": False}


def resolve_config(command: str, config_file: dict | None, flags: dict) -> dict:
    """Defaults, then the config file, then explicit flags; validated against the schema."""
    schema = config_schema(command)
    if config_file is not None:
        _validate(config_file, schema, "config file")
    cfg = {p.key: p.default for p in PARAMS[command] + COMMON}
    cfg.update(config_file or {})
    cfg.update(flags)
    if cfg["out"] is None:
        cfg["out"] = f"rftransfer-{command}"
    missing = [p.flag for p in PARAMS[command] if p.required and cfg.get(p.key) is None]
    if missing:
        raise UsageError(f"{command}: missing required {', '.join(missing)}")
    _validate(cfg, schema, "resolved config")
    return cfg


def _validate(obj, schema, what):
    try:
        jsonschema.validate(obj, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(x) for x in exc.absolute_path) or "(root)"
        raise ValueError(f"{what}: {where}: {exc.message}") from None


# ---------------------------------------------------------------------------
# Input helpers


def _load_geometry(path):
    """TriMesh for meshes, PointCloud for clouds."""
    from .data.io import load_cloud, load_mesh

    path = Path(path)
    if path.suffix.lower() == ".off":
        return load_mesh(path)
    if path.suffix.lower() == ".ply":
        try:
            return load_mesh(path)
        except ParseError as exc:
            if "no faces" not in str(exc):
                raise
    return load_cloud(path)


def _load_mesh(path):
    from .geom import TriMesh

    g = _load_geometry(path)
    if not isinstance(g, TriMesh):
        raise ValueError(f"{path} is a point cloud; a mesh is required")
    return g


def _surface(geometry, samples: int, seed: int):
    from .extract import Surface
    from .geom import TriMesh

    if isinstance(geometry, TriMesh):
        return Surface.from_mesh(geometry, samples, seed)
    return Surface.from_cloud(geometry)


def load_surfaces(path, samples: int = 0, seed: int = 0) -> list:
    """Surfaces of every shape in a dataset directory, or of one shape file."""
    from .data.dataset import load_deformable_dataset, load_fragment_dataset, read_dataset_index

    path = Path(path)
    if not path.is_dir():
        return [_surface(_load_geometry(path), samples, seed)]
    kind = read_dataset_index(path)["kind"]
    if kind == "fragments":
        return [_surface(c, 0, seed) for p in load_fragment_dataset(path) for c in (p.P, p.Q)]
    return [_surface(m, samples, seed) for p in load_deformable_dataset(path) for m in (p.mesh1, p.mesh2)]


def _read_features(path) -> np.ndarray:
    from .data.io import read_csv

    header, data = read_csv(path)
    cols = [i for i, h in enumerate(header) if h.startswith("f") and h[1:].isdigit()]
    if not cols:
        raise ParseError(f"{path}: no feature columns (f0, f1, ...)", 1)
    return data[:, cols]


def _read_map(path, n_target: int):
    from .data.io import read_csv
    from .match import PointToPointMap

    header, data = read_csv(path)
    if "target" not in header:
        raise ParseError(f"{path}: no 'target' column", 1)
    return PointToPointMap(data[:, header.index("target")].astype(np.int64), n_target)


# ---------------------------------------------------------------------------
# Commands. Each returns (output files relative to out, results dict).


def cmd_gen_data(cfg: dict, out: Path):
    from .data import dataset as ds
    from .data.synthetic import DeformableConfig, FragmentConfig

    if cfg["kind"] == "fragments":
        fc = FragmentConfig(n_primitives=tuple(cfg["n_primitives"]), primitives=tuple(cfg["primitives"]),
                            spacing=cfg["spacing"], noise=cfg["noise"], dropout=cfg["dropout"],
                            overlap=cfg["overlap"], min_overlap=cfg["min_overlap"],
                            translation_scale=cfg["translation_scale"])
        pairs = ds.generate_fragments(cfg["n"], cfg["seed"], fc)
        files = ds.save_fragment_dataset(out, pairs, fc, cfg["seed"])
        return files, {"n": len(pairs), "mean_overlap": float(np.mean([p.overlap for p in pairs])),
                       "mean_correspondences": float(np.mean([len(p.correspondences) for p in pairs]))}
    dc = DeformableConfig(base=cfg["base"], bend_deg=cfg["bend_deg"], twist_deg=cfg["twist_deg"],
                          max_distortion=cfg["max_distortion"], resolution=cfg["mesh_resolution"],
                          n_bumps=cfg["n_bumps"])
    pairs = ds.generate_deformables(cfg["n"], cfg["seed"], dc)
    files = ds.save_deformable_dataset(out, pairs, dc, cfg["seed"])
    return files, {"n": len(pairs), "max_distortion": float(max(p.distortion for p in pairs))}


def cmd_pretrain(cfg: dict, out: Path):
    from .data.dataset import load_fragment_dataset
    from .data.io import save_checkpoint, write_csv
    from .extract import PatchParams
    from .pretrain import PretrainConfig, chance_inlier_rate, inlier_rate, loss_ratio, pretrain_run

    pp = PatchParams(cfg["s"], cfg["r_lrf"], cfg["sigma"], cfg["margin"], cfg["resolution"])
    pc = PretrainConfig(loss=cfg["loss"], tau=cfg["tau"], n_points=cfg["n_points"], steps=cfg["steps"],
                        lr=cfg["lr"], match_temp=cfg["match_temp"], seed=cfg["seed"],
                        init_seed=cfg["init_seed"], patch=pp)
    res = pretrain_run(load_fragment_dataset(cfg["data"]), pc)
    save_checkpoint(out / "checkpoint", res.checkpoint)
    write_csv(out / "losses.csv", ["step", "loss"], [np.arange(len(res.losses)), res.losses])
    results = {"initial_loss": float(res.losses[0]) if len(res.losses) else None,
               "final_loss": float(res.losses[-1]) if len(res.losses) else None,
               "loss_ratio": loss_ratio(res.losses) if len(res.losses) else None}
    if cfg["eval_data"] is not None:
        held = load_fragment_dataset(cfg["eval_data"])
        results["inlier_rate"] = inlier_rate(res.checkpoint.theta, held, pp, seed=cfg["seed"])
        results["chance_inlier_rate"] = chance_inlier_rate(held, seed=cfg["seed"])
    return ["checkpoint", "losses.csv"], results


def cmd_rfopt(cfg: dict, out: Path):
    from .data.io import load_checkpoint, save_checkpoint, write_csv, write_json
    from .rfopt import RfOptConfig, build_bank, mmd_at_scale, optimize_receptive_field

    ckpt = load_checkpoint(cfg["checkpoint"])
    sources = load_surfaces(cfg["source"], cfg["surface_samples"], cfg["seed"])
    targets = [t.scaled(cfg["target_scale"]) for t in
               load_surfaces(cfg["target"], cfg["surface_samples"], cfg["seed"])]
    oc = RfOptConfig(n_t=cfg["n_t"], lr=cfg["lr"], lr_final=cfg["lr_final"], max_iter=cfg["max_iter"], tol=cfg["tol"],
                     patience=cfg["patience"], source_batch=cfg["source_batch"], eval_every=cfg["eval_every"],
                     n_eval=cfg["n_eval"], s_init=cfg["s_init"], s_min=cfg["s_min"], s_max=cfg["s_max"],
                     bandwidth=cfg["bandwidth"], seed=cfg["seed"])
    bank = build_bank(ckpt, sources, cfg["n_s"], cfg["seed"], cfg["bandwidth"])
    res = optimize_receptive_field(ckpt, bank, targets, oc)
    e0 = mmd_at_scale(ckpt, bank, targets, res.s0, oc.n_eval, cfg["seed"] + 1)
    e1 = mmd_at_scale(ckpt, bank, targets, res.s, oc.n_eval, cfg["seed"] + 1)
    it, s, e = (np.array(c) for c in zip(*res.trace))
    write_csv(out / "trace.csv", ["iter", "s", "mmd"], [it.astype(np.int64), s, e])
    ev = list(zip(*res.evaluations)) or [[], [], []]
    write_csv(out / "evaluations.csv", ["iter", "s", "mmd"],
              [np.array(ev[0], dtype=np.int64), np.array(ev[1], dtype=float), np.array(ev[2], dtype=float)])
    derived = ckpt.with_s(res.s)
    derived.meta["receptive_field"] = {"s": res.s, "s0": res.s0, "bank": bank.provenance(),
                                       "rfopt_config": oc.to_dict()}
    save_checkpoint(out / "checkpoint", derived)
    results = {"s_star": res.s, "s0": res.s0, "ratio": res.ratio, "iterations": len(res.trace) - 1,
               "converged": res.converged, "mmd_s0": e0, "mmd_s_star": e1, "bandwidth": bank.bandwidth}
    write_json(out / "result.json", results)
    return ["trace.csv", "evaluations.csv", "result.json", "checkpoint"], results


def cmd_extract(cfg: dict, out: Path):
    from .data.io import load_checkpoint, write_csv
    from .extract import extract_features
    from .geom import TriMesh

    ckpt = load_checkpoint(cfg["checkpoint"])
    g = _load_geometry(cfg["shape"])
    centers = g.vertices if isinstance(g, TriMesh) else g.points
    surf = _surface(g, cfg["surface_samples"], cfg["seed"])
    F, flags = extract_features(ckpt, surf, centers, s=cfg["s"])
    write_csv(out / "features.csv", ["vertex", "flag"] + [f"f{j}" for j in range(F.shape[1])],
              [np.arange(len(F)), flags.astype(np.int64)] + list(F.T))
    return ["features.csv"], {"n": len(F), "dim": int(F.shape[1]), "s": ckpt.s if cfg["s"] is None else cfg["s"],
                              "flagged": int(np.count_nonzero(flags))}


def cmd_match(cfg: dict, out: Path):
    from .data.io import write_csv, write_matrix_csv
    from .geom import spectral_basis
    from .match import PointToPointMap, match_pipeline
    from .metrics import geodesic_error

    m1, m2 = _load_mesh(cfg["shape1"]), _load_mesh(cfg["shape2"])
    F1, F2 = _read_features(cfg["features1"]), _read_features(cfg["features2"])
    if len(F1) != m1.n_vertices or len(F2) != m2.n_vertices:
        raise ValueError("feature rows must match mesh vertex counts")
    b1, b2 = spectral_basis(m1, cfg["k_end"]), spectral_basis(m2, cfg["k_end"])
    r = match_pipeline(F1, F2, b1, b2, cfg["k_start"], cfg["k_end"], cfg["n_iter"])
    idx = np.arange(m2.n_vertices)
    write_csv(out / "nn_map.csv", ["vertex", "target"], [idx, r.nn_map.target])
    write_csv(out / "refined_map.csv", ["vertex", "target"], [idx, r.refined_map.target])
    write_csv(out / "pairs.csv", ["vertex1", "vertex2"], [r.pairs[:, 0], r.pairs[:, 1]])
    write_matrix_csv(out / "fmap_init.csv", r.C_init)
    results = {"n_pairs": int(len(r.pairs)), "degenerate": r.refined_map.degenerate}
    if cfg["gt"] == "identity":
        if m1.n_vertices != m2.n_vertices:
            raise ValueError("identity ground truth needs equal vertex counts")
        gt = PointToPointMap.identity(m2.n_vertices)
        results["nn_mean_error"] = geodesic_error(r.nn_map, gt, m1).mean
        results["refined_mean_error"] = geodesic_error(r.refined_map, gt, m1).mean
    return ["nn_map.csv", "refined_map.csv", "pairs.csv", "fmap_init.csv"], results


def cmd_eval(cfg: dict, out: Path):
    from .data.io import write_csv, write_json
    from .geom import cotan_stiffness
    from .match import PointToPointMap
    from .metrics import geodesic_error

    if cfg["map"] is None and cfg["features"] is None:
        raise UsageError("eval: give --map and/or --features")
    files, results = [], {}
    if cfg["map"] is not None:
        if cfg["target_mesh"] is None:
            raise UsageError("eval: --map requires --target-mesh")
        mesh = _load_mesh(cfg["target_mesh"])
        pred = _read_map(cfg["map"], mesh.n_vertices)
        gt = (PointToPointMap.identity(len(pred)) if cfg["gt"] == "identity"
              else _read_map(cfg["gt"], mesh.n_vertices))
        if gt.n_target != mesh.n_vertices:
            raise ValueError("identity ground truth needs the map to start on a copy of the target mesh")
        rep = geodesic_error(pred, gt, mesh, cfg["virtual_edges"])
        write_csv(out / "errors.csv", ["vertex", "error"], [np.arange(len(rep.errors)), rep.errors])
        write_csv(out / "accuracy.csv", ["threshold", "accuracy"], [rep.thresholds, rep.accuracy])
        files += ["errors.csv", "accuracy.csv"]
        results.update(mean_error=rep.mean, max_error=float(rep.errors.max(initial=0.0)))
    if cfg["features"] is not None:
        if cfg["mesh"] is None:
            raise UsageError("eval: --features requires --mesh")
        mesh = _load_mesh(cfg["mesh"])
        F = _read_features(cfg["features"])
        if len(F) != mesh.n_vertices:
            raise ValueError("feature rows must match mesh vertex count")
        W = cotan_stiffness(mesh)
        per = np.einsum("ij,ij->j", F, W @ F)
        write_csv(out / "dirichlet.csv", ["channel", "energy"], [np.arange(len(per)), per])
        files.append("dirichlet.csv")
        results["dirichlet_mean"] = float(per.mean())
    write_json(out / "summary.json", results)
    return files + ["summary.json"], results


def cmd_pca(cfg: dict, out: Path):
    from .data.io import write_csv, write_json
    from .extract import PatchParams, patch_grids
    from .metrics import patch_pca
    from .rfopt import sample_centers

    pp = PatchParams(cfg["s"], cfg["r_lrf"], cfg["sigma"], cfg["margin"], cfg["resolution"])
    surfaces = load_surfaces(cfg["data"], cfg["surface_samples"], cfg["seed"])
    groups = sample_centers(surfaces, cfg["n_patches"], np.random.default_rng(cfg["seed"]))
    grids = np.concatenate([patch_grids(surfaces[k], c, pp.s, pp.r_lrf, pp)[0] for k, c in groups])
    rep = patch_pca(grids, cfg["n_proj"])
    write_csv(out / "unexplained.csv", ["components", "unexplained"],
              [np.arange(len(rep.unexplained)), rep.unexplained])
    write_csv(out / "projections.csv", ["patch"] + [f"p{j}" for j in range(rep.projections.shape[1])],
              [np.arange(len(rep.projections))] + list(rep.projections.T))
    results = {"n_patches": int(len(grids)), "components": rep.components_for(cfg["explained"]),
               "explained": cfg["explained"], "total_variance": rep.total_variance}
    write_json(out / "summary.json", results)
    return ["unexplained.csv", "projections.csv", "summary.json"], results


def cmd_gradcheck(cfg: dict, out: Path):
    from .data.io import write_csv
    from .gradcheck import CHECKS, run_checks

    if cfg["all"] == bool(cfg["check"]):
        raise UsageError("gradcheck: give exactly one of --all or --check NAME...")
    names = list(CHECKS) if cfg["all"] else cfg["check"]
    try:
        results = run_checks(names, cfg["seed"])
    except KeyError as exc:
        raise ValueError(exc.args[0]) from None
    write_csv(out / "gradcheck.csv", ["check", "error", "tol", "passed"],
              [np.array([r.name for r in results]), np.array([r.error for r in results]),
               np.array([r.tol for r in results]), np.array([r.passed for r in results])],
              ["%s", "%.3e", "%.0e", "%d"])
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: rel. error {r.error:.2e} (tol {r.tol:.0e}, "
              f"{r.seconds:.1f}s)")
    summary = {r.name: {"error": r.error, "tol": r.tol, "passed": r.passed, "seconds": r.seconds}
               for r in results}
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise ContractError(f"gradient checks failed: {', '.join(failed)}", ["gradcheck.csv"], summary)
    return ["gradcheck.csv"], summary


HANDLERS: dict[str, Callable[[dict, Path], tuple[list, dict]]] = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "rfopt": cmd_rfopt, "extract": cmd_extract,
    "match": cmd_match, "eval": cmd_eval, "pca": cmd_pca, "gradcheck": cmd_gradcheck,
}


# ---------------------------------------------------------------------------
# Runs and manifests


def input_digests(command: str, cfg: dict) -> dict:
    from .data.io import file_digest

    digests = {}
    for p in PARAMS[command]:
        v = cfg.get(p.key)
        if p.kind == "input" and v is not None and not (p.key == "gt" and v == "identity"):
            if not Path(v).exists():
                raise FileNotFoundError(f"{p.flag}: {v} does not exist")
            digests[p.key] = {"path": v, "sha256": file_digest(v)}
    return digests


def _absolute_inputs(command: str, cfg: dict) -> dict:
    cfg = dict(cfg)
    for p in PARAMS[command]:
        v = cfg.get(p.key)
        if p.kind == "input" and v is not None and not (p.key == "gt" and v == "identity"):
            cfg[p.key] = str(Path(v).resolve())
    cfg["out"] = str(Path(cfg["out"]).resolve())
    return cfg


def execute(command: str, cfg: dict) -> dict:
    """Run a resolved config and write its manifest; returns the manifest."""
    from .data.io import write_json

    cfg = _absolute_inputs(command, cfg)
    inputs = input_digests(command, cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    status, error = "ok", None
    try:
        outputs, results = HANDLERS[command](cfg, out)
    except ContractError as exc:
        status, error = "failed", str(exc.args[0])
        outputs, results = exc.args[1], exc.args[2]
    manifest = {"format": MANIFEST_FORMAT, "version": __version__, "command": command, "config": cfg,
                "seed": cfg["seed"], "inputs": inputs, "outputs": sorted(outputs), "results": results,
                "status": status, "wall_time": time.perf_counter() - t0}
    if error:
        manifest["error"] = error
    write_json(out / MANIFEST_NAME, _jsonable(manifest))
    if error:
        raise ContractError(error)
    return manifest


def rerun(manifest_path, out) -> dict:
    """Replay a recorded run into ``out`` after checking its inputs are unchanged."""
    from .data.io import read_json

    m = read_json(manifest_path)
    if m.get("format") != MANIFEST_FORMAT or m.get("command") not in HANDLERS:
        raise ValueError(f"{manifest_path} is not a run manifest")
    cfg = dict(m["config"], out=str(out))
    current = input_digests(m["command"], cfg)
    changed = [k for k, v in m["inputs"].items() if current.get(k, {}).get("sha256") != v["sha256"]]
    if changed:
        raise ValueError(f"inputs changed since the recorded run: {', '.join(changed)}")
    return execute(m["command"], cfg)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


# ---------------------------------------------------------------------------
# Argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rftransfer", description="Local 3D features with an optimized receptive field.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, params in PARAMS.items():
        sp = sub.add_parser(name, help=HELP[name], argument_default=argparse.SUPPRESS)
        sp.add_argument("--config", help="JSON config file")
        for p in params + COMMON:
            kw = {"dest": p.key, "help": p.help}
            if p.kind == "int":
                kw["type"] = int
            elif p.kind == "float":
                kw["type"] = float
            elif p.kind == "bool":
                kw["action"] = argparse.BooleanOptionalAction
            elif p.kind == "ints2":
                kw.update(type=int, nargs=2, metavar=("MIN", "MAX"))
            elif p.kind == "strs":
                kw.update(nargs="+")
            if p.choices and p.kind != "strs":
                kw["choices"] = p.choices
            sp.add_argument(p.flag, **kw)
    rr = sub.add_parser("rerun", help="replay a run manifest")
    rr.add_argument("manifest")
    rr.add_argument("--out", required=True)
    return parser


def _apply_threads():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return None
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    command = args.pop("command")
    try:
        limiter = _apply_threads()
        try:
            if command == "rerun":
                m = rerun(args["manifest"], args["out"])
            else:
                cfile = args.pop("config", None)
                file_cfg = None
                if cfile is not None:
                    try:
                        file_cfg = json.loads(Path(cfile).read_text())
                    except json.JSONDecodeError as exc:
                        raise ParseError(f"{cfile}: {exc.msg}", exc.lineno) from None
                m = execute(command, resolve_config(command, file_cfg, args))
        finally:
            if limiter is not None:
                limiter.unregister()
    except UsageError as exc:
        print(f"rftransfer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, ConvergenceError, FloatingPointError) as exc:
        print(f"rftransfer: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractError as exc:
        print(f"rftransfer: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"rftransfer: error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    print(json.dumps({"command": m["command"], "out": m["config"]["out"], "results": _jsonable(m["results"])},
                     sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
