import json
from pathlib import Path

import numpy as np
import pytest

from rftransfer import cli
from rftransfer.data.io import load_checkpoint, read_csv, save_mesh, write_csv
from rftransfer.errors import NumericalError
from rftransfer.geom import icosphere, normalize_unit_area


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Small fragment dataset, a 3-step checkpoint and a sphere mesh shared by the tests."""
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--n", 2, "--seed", 1, "--out", d / "frag") == 0
    assert run("pretrain", "--data", d / "frag", "--steps", 3, "--n-points", 8, "--out", d / "pt") == 0
    mesh = normalize_unit_area(icosphere(2))
    save_mesh(d / "sphere.off", mesh)
    n = mesh.n_vertices
    write_csv(d / "xyz.csv", ["vertex", "f0", "f1", "f2"], [np.arange(n)] + list(mesh.vertices.T))
    return d


def manifest(out):
    return json.loads((Path(out) / cli.MANIFEST_NAME).read_text())


def test_help_exits_zero(capsys):
    assert run("--help") == 0
    assert "gradcheck" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [["bogus"], ["gen-data", "--no-such-flag"], ["gen-data", "--n", "x"],
                                  ["pretrain", "--out", "x"], ["gradcheck"], ["rerun"]])
def test_usage_errors_exit_one(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(*argv) == 1


def test_gen_data_manifest(work):
    m = manifest(work / "frag")
    assert m["command"] == "gen-data" and m["seed"] == 1 and m["status"] == "ok"
    assert "dataset.json" in m["outputs"]
    assert m["config"]["n"] == 2 and m["config"]["kind"] == "fragments"
    assert m["wall_time"] >= 0


def test_config_file_then_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n": 3, "seed": 5, "kind": "deformable"}))
    assert run("gen-data", "--config", cfg, "--n", 1, "--out", tmp_path / "o") == 0
    m = manifest(tmp_path / "o")
    assert m["config"]["n"] == 1 and m["seed"] == 5 and m["config"]["kind"] == "deformable"


@pytest.mark.parametrize("bad", [{"n": "three"}, {"unknown_key": 1}, {"kind": "cubes"},
                                 {"primitives": []}, {"n_primitives": [1, 2, 3]}])
def test_config_schema_violations_exit_two(bad, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(bad))
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "config" in capsys.readouterr().err


def test_malformed_config_json_exit_two(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text("{\n  \"n\": 1,\n")
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "line" in capsys.readouterr().err


def test_missing_input_exit_two(tmp_path, capsys):
    assert run("pretrain", "--data", tmp_path / "nope", "--out", tmp_path / "o") == 2
    assert "does not exist" in capsys.readouterr().err


def test_pretrain_outputs(work):
    header, data = read_csv(work / "pt" / "losses.csv")
    assert header == ["step", "loss"] and len(data) == 3
    ck = load_checkpoint(work / "pt" / "checkpoint")
    assert ck.meta["steps"] == 3
    m = manifest(work / "pt")
    assert set(m["inputs"]) == {"data"} and len(m["inputs"]["data"]["sha256"]) == 64
    assert m["results"]["loss_ratio"] > 0


def test_numerical_failure_exit_three(work, tmp_path, monkeypatch):
    import rftransfer.pretrain as pretrain

    def boom(*a, **k):
        raise NumericalError("step 0: non-finite loss nan")

    monkeypatch.setattr(pretrain, "pretrain_run", boom)
    assert run("pretrain", "--data", work / "frag", "--out", tmp_path / "o") == 3


def test_rfopt_writes_trace_and_derived_checkpoint(work, tmp_path):
    out = tmp_path / "rf"
    assert run("rfopt", "--checkpoint", work / "pt" / "checkpoint", "--source", work / "frag",
               "--target", work / "frag", "--n-s", 64, "--n-t", 4, "--max-iter", 2, "--n-eval", 16,
               "--out", out) == 0
    header, trace = read_csv(out / "trace.csv")
    assert header == ["iter", "s", "mmd"] and len(trace) == 3
    res = json.loads((out / "result.json").read_text())
    ck = load_checkpoint(out / "checkpoint")
    assert ck.s == pytest.approx(res["s_star"]) and ck.s0 == pytest.approx(res["s0"])
    assert res["ratio"] == pytest.approx(res["s_star"] / res["s0"])
    assert "receptive_field" in ck.meta


def test_extract_features_per_vertex(work, tmp_path):
    out = tmp_path / "e"
    assert run("extract", "--checkpoint", work / "pt" / "checkpoint", "--shape", work / "sphere.off",
               "--out", out) == 0
    header, data = read_csv(out / "features.csv")
    assert header[:3] == ["vertex", "flag", "f0"] and len(header) == 2 + 32
    assert len(data) == 162
    assert np.allclose(np.linalg.norm(data[:, 2:], axis=1), 1.0, atol=1e-6)


def test_match_identity_features_give_identity_map(work, tmp_path):
    out = tmp_path / "m"
    sphere, feats = work / "sphere.off", work / "xyz.csv"
    assert run("match", "--shape1", sphere, "--shape2", sphere, "--features1", feats, "--features2", feats,
               "--k-start", 10, "--k-end", 20, "--n-iter", 2, "--gt", "identity", "--out", out) == 0
    _, refined = read_csv(out / "refined_map.csv")
    assert np.array_equal(refined[:, 1], np.arange(162))
    assert manifest(out)["results"]["refined_mean_error"] == 0.0
    assert np.loadtxt(out / "fmap_init.csv", delimiter=",").shape == (10, 10)

    ev = tmp_path / "ev"
    assert run("eval", "--map", out / "refined_map.csv", "--target-mesh", sphere,
               "--features", feats, "--mesh", sphere, "--out", ev) == 0
    _, err = read_csv(ev / "errors.csv")
    assert np.all(err[:, 1] == 0)
    _, acc = read_csv(ev / "accuracy.csv")
    assert len(acc) == 100 and np.all(acc[:, 1] == 1)
    summary = json.loads((ev / "summary.json").read_text())
    assert summary["mean_error"] == 0 and summary["dirichlet_mean"] > 0


def test_eval_needs_something_to_do(tmp_path):
    assert run("eval", "--out", tmp_path / "o") == 1


def test_match_too_few_pairs_exit_two(work, tmp_path):
    const = tmp_path / "const.csv"
    write_csv(const, ["vertex", "f0"], [np.arange(162), np.zeros(162)])
    sphere = work / "sphere.off"
    assert run("match", "--shape1", sphere, "--shape2", sphere, "--features1", const, "--features2", const,
               "--k-start", 10, "--k-end", 20, "--out", tmp_path / "m") == 2


def test_pca_outputs(work, tmp_path):
    out = tmp_path / "p"
    assert run("pca", "--data", work / "frag", "--n-patches", 50, "--resolution", 8, "--out", out) == 0
    _, un = read_csv(out / "unexplained.csv")
    assert un[0, 1] == 1.0 and un[-1, 1] == pytest.approx(0.0, abs=1e-9)
    assert np.all(np.diff(un[:, 1]) <= 1e-12)
    _, proj = read_csv(out / "projections.csv")
    assert proj.shape == (50, 3)


def test_gradcheck_subset(tmp_path):
    assert run("gradcheck", "--check", "mmd", "nce_loss", "--out", tmp_path / "g") == 0
    text = (tmp_path / "g" / "gradcheck.csv").read_text().splitlines()
    assert text[0] == "check,error,tol,passed" and len(text) == 3


def test_gradcheck_unknown_name_exit_two(tmp_path):
    assert run("gradcheck", "--check", "nope", "--out", tmp_path / "g") == 2


def test_gradcheck_failure_exits_nonzero(tmp_path, monkeypatch):
    import rftransfer.gradcheck as gc

    monkeypatch.setitem(gc.CHECKS, "broken", (lambda rng: 1.0, 1e-4))
    assert run("gradcheck", "--check", "mmd", "broken", "--out", tmp_path / "g") == 2
    m = manifest(tmp_path / "g")
    assert m["status"] == "failed" and not m["results"]["broken"]["passed"]


def test_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "1")
    assert run("gradcheck", "--check", "mmd", "--out", tmp_path / "g") == 0
    monkeypatch.setenv(cli.THREADS_ENV, "zero")
    assert run("gradcheck", "--check", "mmd", "--out", tmp_path / "g") == 1


def test_rerun_reproduces_csvs_and_rejects_changed_inputs(work, tmp_path):
    out = tmp_path / "p1"
    assert run("pca", "--data", work / "frag", "--n-patches", 40, "--resolution", 8, "--seed", 3, "--out", out) == 0
    assert run("rerun", out / cli.MANIFEST_NAME, "--out", tmp_path / "p2") == 0
    for name in ("unexplained.csv", "projections.csv"):
        assert (out / name).read_bytes() == (tmp_path / "p2" / name).read_bytes()

    # a rerun of a run whose input has since changed is refused
    copy = tmp_path / "sphere.off"
    copy.write_bytes((work / "sphere.off").read_bytes())
    assert run("extract", "--checkpoint", work / "pt" / "checkpoint", "--shape", copy, "--out", tmp_path / "e") == 0
    copy.write_text(copy.read_text() + "\n")
    assert run("rerun", tmp_path / "e" / cli.MANIFEST_NAME, "--out", tmp_path / "e2") == 2


def test_schema_lists_every_flag():
    for command, params in cli.PARAMS.items():
        schema = cli.config_schema(command)
        assert set(schema["properties"]) == {p.key for p in params} | {"seed", "out"}
