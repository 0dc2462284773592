import json

import numpy as np
import pytest

from rftransfer.data.io import (load_checkpoint, load_cloud, load_mesh, load_voxel_grid, read_csv, save_checkpoint,
                                save_cloud, save_mesh, save_voxel_grid, write_csv)
from rftransfer.data.synthetic import (DeformableConfig, FragmentConfig, edge_distortion, gen_deformable_pair,
                                       gen_rigid_fragment_pair, poisson_disk_sample)
from rftransfer.errors import ParseError
from rftransfer.extract import Checkpoint, PatchParams
from rftransfer.geom import PointCloud, icosphere
from rftransfer.net import ConvNetParams
from rftransfer.patch import VoxelGrid
from rftransfer.pretrain import weighted_rigid_fit


# -- rigid fragment pairs ---------------------------------------------------

def test_fragment_pair_full_overlap():
    pair = gen_rigid_fragment_pair(1, FragmentConfig(overlap=1.0))
    assert len(pair.correspondences) >= 0.95 * len(pair.P)
    x = pair.P.points[pair.correspondences[:, 0]]
    y = pair.Q.points[pair.correspondences[:, 1]]
    np.testing.assert_allclose(pair.T_gt.apply(x), y, atol=1e-9)


@pytest.mark.parametrize("seed", range(4))
def test_fragment_pair_invariants(seed):
    pair = gen_rigid_fragment_pair(seed, FragmentConfig(noise=0.005))
    x = pair.P.points[pair.correspondences[:, 0]]
    y = pair.Q.points[pair.correspondences[:, 1]]
    assert np.all(np.linalg.norm(pair.T_gt.apply(x) - y, axis=1) <= pair.tolerance)
    assert 0 < pair.overlap <= 1
    assert len(np.unique(pair.correspondences[:, 0])) == len(pair.correspondences)
    assert len(np.unique(pair.correspondences[:, 1])) == len(pair.correspondences)


def test_fragment_pair_deterministic():
    a = gen_rigid_fragment_pair(7)
    b = gen_rigid_fragment_pair(7)
    assert a.P.points.tobytes() == b.P.points.tobytes()
    assert a.Q.points.tobytes() == b.Q.points.tobytes()
    assert a.correspondences.tobytes() == b.correspondences.tobytes()
    assert gen_rigid_fragment_pair(8).P.points.shape != a.P.points.shape or \
        not np.array_equal(gen_rigid_fragment_pair(8).P.points, a.P.points)


def test_fit_on_ground_truth_closes_loop():
    pair = gen_rigid_fragment_pair(2)
    T = weighted_rigid_fit(pair.P.points[pair.correspondences[:, 0]], pair.Q.points[pair.correspondences[:, 1]])
    np.testing.assert_allclose(T.R, pair.T_gt.R, atol=1e-6)
    np.testing.assert_allclose(T.t, pair.T_gt.t, atol=1e-6)


def test_fragment_unreachable_overlap_raises():
    with pytest.raises(RuntimeError):
        gen_rigid_fragment_pair(0, FragmentConfig(overlap=0.05, min_overlap=0.9, max_retries=2))


def test_fragment_config_round_trip():
    cfg = FragmentConfig(n_primitives=(2, 3), primitives=("plane", "sphere"), noise=0.01)
    assert FragmentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError):
        FragmentConfig(primitives=("torus",))


def test_poisson_disk_spacing(rng):
    pts = poisson_disk_sample(icosphere(3), 0.1, rng)
    from scipy.spatial import cKDTree
    d = cKDTree(pts).query(pts, k=2)[0][:, 1]
    assert d.min() >= 0.1 - 1e-12
    assert len(pts) > 400


# -- deformable pairs -------------------------------------------------------

@pytest.mark.parametrize("base", ["tube", "bumpy_sphere"])
def test_deformable_zero_amplitude(base):
    p = gen_deformable_pair(0, DeformableConfig(base=base, bend_deg=0.0, twist_deg=0.0, resolution=0 if base == "bumpy_sphere" else 1))
    np.testing.assert_allclose(p.mesh1.vertices, p.mesh2.vertices, atol=1e-12)
    assert p.distortion == 0.0


def test_deformable_bend_within_bound():
    for seed in range(3):
        p = gen_deformable_pair(seed, DeformableConfig(bend_deg=30.0))
        assert p.distortion < 0.05
        assert edge_distortion(p.mesh1, p.mesh2) == p.distortion
        assert abs(p.mesh1.area() - 1) < 1e-9 and abs(p.mesh2.area() - 1) < 1e-9
        np.testing.assert_array_equal(p.mesh1.faces, p.mesh2.faces)


def test_deformable_deterministic():
    a, b = gen_deformable_pair(4), gen_deformable_pair(4)
    assert a.mesh2.vertices.tobytes() == b.mesh2.vertices.tobytes()


def test_deformable_auto_reduces_amplitude():
    with pytest.warns(RuntimeWarning, match="reduced"):
        p = gen_deformable_pair(0, DeformableConfig(bend_deg=170.0, max_distortion=0.02))
    assert p.distortion <= 0.02 and p.bend_deg < 170.0


# -- file formats -----------------------------------------------------------

@pytest.mark.parametrize("ext", [".off", ".ply"])
def test_mesh_round_trip(tmp_path, ext):
    m = icosphere(2)
    save_mesh(tmp_path / f"s{ext}", m)
    back = load_mesh(tmp_path / f"s{ext}")
    np.testing.assert_allclose(back.vertices, m.vertices, atol=1e-6)
    np.testing.assert_array_equal(back.faces, m.faces)


def test_cloud_round_trip(tmp_path, rng):
    pc = PointCloud(rng.normal(size=(20, 3)), normals=None)
    save_cloud(tmp_path / "c.ply", pc)
    np.testing.assert_allclose(load_cloud(tmp_path / "c.ply").points, pc.points, atol=1e-6)
    (tmp_path / "c.xyz").write_text("x,y,z\n1,2,3\n4,5,6\n")
    np.testing.assert_array_equal(load_cloud(tmp_path / "c.xyz").points, [[1, 2, 3], [4, 5, 6]])


def test_malformed_off_names_line(tmp_path):
    (tmp_path / "bad.off").write_text("OFF\n3 1 0\n0 0 0\n1 0 oops\n0 1 0\n3 0 1 2\n")
    with pytest.raises(ParseError, match="line 4"):
        load_mesh(tmp_path / "bad.off")
    (tmp_path / "quad.off").write_text("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    with pytest.raises(ParseError, match="line 7"):
        load_mesh(tmp_path / "quad.off")


def test_checkpoint_round_trip_bit_exact(tmp_path):
    ck = Checkpoint(ConvNetParams.initialize(seed=3), PatchParams(s=0.25), s=0.4, meta={"loss": "nce"})
    save_checkpoint(tmp_path / "ck", ck)
    back = load_checkpoint(tmp_path / "ck")
    for k, v in ck.theta.params.items():
        assert back.theta.params[k].tobytes() == v.astype("<f4").tobytes()
    assert back.s == 0.4 and back.s0 == 0.25 and back.meta == {"loss": "nce"}
    assert back.theta.arch == ck.theta.arch


def test_checkpoint_truncated_names_offset(tmp_path):
    ck = Checkpoint(ConvNetParams.initialize(seed=0))
    d = save_checkpoint(tmp_path / "ck", ck)
    blob = d / "conv2.weight.f4"
    blob.write_bytes(blob.read_bytes()[:100])
    with pytest.raises(ParseError, match="offset 100"):
        load_checkpoint(d)


def test_voxel_grid_round_trip(tmp_path, rng):
    g = VoxelGrid(rng.uniform(size=(16, 16, 16)).astype(np.float32).astype(np.float64), 0.3, 1e-3)
    save_voxel_grid(tmp_path / "g.f4", g)
    assert (tmp_path / "g.f4").stat().st_size == 4 * 16 ** 3
    back = load_voxel_grid(tmp_path / "g.f4")
    np.testing.assert_array_equal(back.values, g.values)
    assert back.extent == 0.3 and back.sigma == 1e-3
    (tmp_path / "g.f4").write_bytes(b"\0" * 10)
    with pytest.raises(ParseError, match="offset 10"):
        load_voxel_grid(tmp_path / "g.f4")


def test_csv_round_trip(tmp_path):
    write_csv(tmp_path / "t.csv", ["step", "loss"], [np.arange(3), np.array([0.1, 1 / 3, 2.0])])
    text = (tmp_path / "t.csv").read_text()
    assert text == "step,loss\n0,0.1\n1,0.333333333\n2,2\n"
    header, data = read_csv(tmp_path / "t.csv")
    assert header == ["step", "loss"] and data.shape == (3, 2)
