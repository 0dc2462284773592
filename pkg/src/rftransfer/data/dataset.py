"""Generated datasets on disk: a directory of geometry files plus ``dataset.json``.

Fragment datasets store each pair as two PLY clouds and a correspondence CSV;
deformable datasets store each pair as two OFF meshes sharing connectivity
(ground truth is the identity on vertex indices).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ParseError
from ..geom import RigidTransform
from .io import load_cloud, load_mesh, read_json, save_cloud, save_mesh, write_csv, write_json
from .synthetic import (DeformableConfig, DeformablePair, FragmentConfig, FragmentPair,
                        gen_deformable_pair, gen_rigid_fragment_pair)

DATASET_FORMAT = "rftransfer-dataset/1"


def item_seed(seed: int, index: int) -> int:
    """Independent per-item seed derived from the dataset seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_fragments(n: int, seed: int, cfg: FragmentConfig = FragmentConfig()) -> list[FragmentPair]:
    return [gen_rigid_fragment_pair(item_seed(seed, i), cfg) for i in range(n)]


def generate_deformables(n: int, seed: int, cfg: DeformableConfig = DeformableConfig()) -> list[DeformablePair]:
    return [gen_deformable_pair(item_seed(seed, i), cfg) for i in range(n)]


def save_fragment_dataset(directory, pairs: list[FragmentPair], cfg: FragmentConfig, seed: int) -> list[str]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    items, files = [], []
    for i, p in enumerate(pairs):
        stem = f"pair_{i:04d}"
        save_cloud(d / f"{stem}_P.ply", p.P)
        save_cloud(d / f"{stem}_Q.ply", p.Q)
        write_csv(d / f"{stem}_corr.csv", ["p", "q"], [p.correspondences[:, 0], p.correspondences[:, 1]])
        files += [f"{stem}_P.ply", f"{stem}_Q.ply", f"{stem}_corr.csv"]
        items.append({"seed": p.seed, "P": f"{stem}_P.ply", "Q": f"{stem}_Q.ply",
                      "correspondences": f"{stem}_corr.csv",
                      "T_gt": {"R": p.T_gt.R.tolist(), "t": p.T_gt.t.tolist()},
                      "overlap": p.overlap, "spacing": p.spacing, "tolerance": p.tolerance})
    write_json(d / "dataset.json", {"format": DATASET_FORMAT, "kind": "fragments", "seed": seed,
                                    "config": cfg.to_dict(), "items": items})
    return files + ["dataset.json"]


def save_deformable_dataset(directory, pairs: list[DeformablePair], cfg: DeformableConfig, seed: int) -> list[str]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    items, files = [], []
    for i, p in enumerate(pairs):
        stem = f"pair_{i:04d}"
        save_mesh(d / f"{stem}_a.off", p.mesh1)
        save_mesh(d / f"{stem}_b.off", p.mesh2)
        files += [f"{stem}_a.off", f"{stem}_b.off"]
        items.append({"seed": p.seed, "mesh1": f"{stem}_a.off", "mesh2": f"{stem}_b.off",
                      "bend_deg": p.bend_deg, "twist_deg": p.twist_deg, "distortion": p.distortion})
    write_json(d / "dataset.json", {"format": DATASET_FORMAT, "kind": "deformable", "seed": seed,
                                    "config": cfg.to_dict(), "items": items})
    return files + ["dataset.json"]


def read_dataset_index(directory) -> dict:
    path = Path(directory) / "dataset.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset.json in {directory}")
    index = read_json(path)
    if index.get("format") != DATASET_FORMAT:
        raise ParseError(f"unsupported dataset format {index.get('format')!r}", 1)
    return index


def load_fragment_dataset(directory) -> list[FragmentPair]:
    d = Path(directory)
    index = read_dataset_index(d)
    if index["kind"] != "fragments":
        raise ValueError(f"{d} holds a {index['kind']} dataset, not fragments")
    pairs = []
    for it in index["items"]:
        corr = np.loadtxt(d / it["correspondences"], delimiter=",", skiprows=1, ndmin=2).astype(np.int64)
        T = RigidTransform(np.array(it["T_gt"]["R"]), np.array(it["T_gt"]["t"]))
        pairs.append(FragmentPair(load_cloud(d / it["P"]), load_cloud(d / it["Q"]), T, corr.reshape(-1, 2),
                                  it["overlap"], it["spacing"], it["tolerance"], it["seed"]))
    return pairs


def load_deformable_dataset(directory) -> list[DeformablePair]:
    d = Path(directory)
    index = read_dataset_index(d)
    if index["kind"] != "deformable":
        raise ValueError(f"{d} holds a {index['kind']} dataset, not deformable pairs")
    return [DeformablePair(load_mesh(d / it["mesh1"]), load_mesh(d / it["mesh2"]), it["bend_deg"],
                           it["twist_deg"], it["distortion"], it["seed"]) for it in index["items"]]
