import numpy as np
import pytest

from rftransfer.errors import NumericalError, TapeError
from rftransfer.net import (AdamState, Architecture, ConvNetParams, MLPParams, adam_step, cnn_backward,
                            cnn_forward, mlp_backward, mlp_forward)
from rftransfer.net import layers as L


def naive_conv(x, w, b, stride):
    """Straight loops over batch, output voxel and kernel offset."""
    B, D, H, W, _ = x.shape
    cout = w.shape[-1]
    Do, Ho, Wo = [(n - 1) // stride + 1 for n in (D, H, W)]
    out = np.zeros((B, Do, Ho, Wo, cout))
    for n in range(B):
        for i in range(Do):
            for j in range(Ho):
                for k in range(Wo):
                    acc = b.astype(np.float64).copy()
                    for a in range(3):
                        for c in range(3):
                            for e in range(3):
                                z, y, xx = i * stride + a - 1, j * stride + c - 1, k * stride + e - 1
                                if 0 <= z < D and 0 <= y < H and 0 <= xx < W:
                                    acc += x[n, z, y, xx] @ w[a, c, e]
                    out[n, i, j, k] = acc
    return out


def naive_forward(grid, theta):
    p = theta.params
    x = np.asarray(grid, np.float64)[None, ..., None]
    for i, s in enumerate(theta.arch.strides, start=1):
        x = naive_conv(x, p[f"conv{i}.weight"], p[f"conv{i}.bias"], s)
        mu = x.mean(axis=(1, 2, 3), keepdims=True)
        var = ((x - mu) ** 2).mean(axis=(1, 2, 3), keepdims=True)
        x = (x - mu) / np.sqrt(var + L.NORM_EPS) * p[f"norm{i}.scale"] + p[f"norm{i}.shift"]
        x = np.maximum(x, 0)
    f = x.mean(axis=(1, 2, 3)) @ p["dense.weight"] + p["dense.bias"]
    return (f / np.sqrt((f * f).sum() + L.L2_EPS))[0]


def randomized(theta, rng):
    t = theta.astype(np.float64)
    for k, v in t.params.items():
        if "bias" in k or "shift" in k:
            t.params[k] = rng.normal(scale=0.1, size=v.shape)
        elif "scale" in k:
            t.params[k] = 1 + rng.normal(scale=0.1, size=v.shape)
    return t


# -- layers -----------------------------------------------------------------

@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_loop_oracle(rng, stride):
    x = rng.normal(size=(2, 5, 4, 6, 3))
    w = rng.normal(size=(3, 3, 3, 3, 4))
    b = rng.normal(size=4)
    out, _ = L.conv3d_forward(x, w, b, stride)
    np.testing.assert_allclose(out, naive_conv(x, w, b, stride), atol=1e-10)


def test_conv_hand_gradient_2cube():
    x = np.ones((1, 2, 2, 2, 1))
    w = np.ones((3, 3, 3, 1, 1))
    _, cache = L.conv3d_forward(x, w, np.zeros(1), 1)
    dx, dw, db = L.conv3d_backward(np.ones((1, 2, 2, 2, 1)), cache)
    c = np.array([1.0, 2.0, 1.0])  # outputs that see each kernel offset, per axis
    np.testing.assert_allclose(dw[..., 0, 0], np.einsum("i,j,k->ijk", c, c, c))
    np.testing.assert_allclose(dx, 8.0)  # every input reaches all 8 outputs
    np.testing.assert_allclose(db, [8.0])


def _layer_fd(fwd, bwd_pick, args, idx, rng, h=1e-6):
    out, cache = fwd(*args)
    up = rng.normal(size=out.shape)
    grads = bwd_pick(up, cache)
    for g, a in zip(grads, idx):
        arr = args[a]
        for _ in range(6):
            j = tuple(rng.integers(0, n) for n in arr.shape)
            old = arr[j]
            arr[j] = old + h
            fp = np.sum(fwd(*args)[0] * up)
            arr[j] = old - h
            fm = np.sum(fwd(*args)[0] * up)
            arr[j] = old
            fd = (fp - fm) / (2 * h)
            assert abs(g[j] - fd) <= 1e-4 * max(abs(fd), 1e-3)


def test_layer_gradients_fd(rng):
    x = rng.normal(size=(2, 4, 4, 4, 3))
    w = rng.normal(size=(3, 3, 3, 3, 2))
    b = rng.normal(size=2)
    _layer_fd(lambda x, w, b: L.conv3d_forward(x, w, b, 2),
              lambda up, c: L.conv3d_backward(up, c), [x, w, b], [0, 1, 2], rng)
    sc, sh = rng.normal(size=3), rng.normal(size=3)
    _layer_fd(L.instance_norm_forward, lambda up, c: L.instance_norm_backward(up, c), [x, sc, sh], [0, 1, 2], rng)
    v = rng.normal(size=(4, 5))
    _layer_fd(L.l2_normalize_forward, lambda up, c: (L.l2_normalize_backward(up, c),), [v], [0], rng)
    W, bb = rng.normal(size=(5, 3)), rng.normal(size=3)
    _layer_fd(L.dense_forward, lambda up, c: L.dense_backward(up, c), [v, W, bb], [0, 1, 2], rng)


# -- network ----------------------------------------------------------------

def test_forward_matches_loop_oracle(rng):
    theta = randomized(ConvNetParams.initialize(Architecture(resolution=8), seed=1), rng)
    grid = rng.uniform(size=(8, 8, 8))
    f, _ = cnn_forward(grid, theta)
    np.testing.assert_allclose(f, naive_forward(grid, theta), atol=1e-10)


def test_zero_grid_gives_shift_only_feature(rng):
    arch = Architecture()
    theta = ConvNetParams.initialize(arch, seed=0, dtype=np.float64)
    zero = np.zeros((16, 16, 16))
    f, _ = cnn_forward(zero, theta)
    np.testing.assert_array_equal(f, 0.0)
    t2 = randomized(theta, rng)
    a, _ = cnn_forward(zero, t2)
    # a zero grid reaches the first normalization as a constant, so layer-1
    # convolution parameters cannot influence the feature
    for k in ("conv1.weight", "conv1.bias"):
        t2.params[k] = rng.normal(size=t2.params[k].shape)
    b, _ = cnn_forward(zero, t2)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_forward_deterministic_and_batched(rng):
    theta = ConvNetParams.initialize(seed=3)
    g = rng.uniform(size=(3, 16, 16, 16))
    a, _ = cnn_forward(g, theta)
    b, _ = cnn_forward(g, theta)
    np.testing.assert_array_equal(a, b)
    c, _ = cnn_forward(g[1], theta)
    np.testing.assert_allclose(c, a[1], atol=1e-5)
    assert a.dtype == np.float32 and a.shape == (3, 32)
    assert ConvNetParams.initialize(seed=3).n_parameters() == theta.n_parameters()


def test_forward_shape_mismatch():
    with pytest.raises(ValueError):
        cnn_forward(np.zeros((8, 8, 8)), ConvNetParams.initialize())


def test_backward_zero_upstream_and_tape_reuse(rng):
    theta = ConvNetParams.initialize(seed=0, dtype=np.float64)
    _, tape = cnn_forward(rng.uniform(size=(16, 16, 16)), theta)
    grads, dg = cnn_backward(tape, np.zeros(32))
    assert all(not v.any() for v in grads.values()) and not dg.any()
    with pytest.raises(TapeError):
        cnn_backward(tape, np.zeros(32))


def test_network_fd_50_probes():
    rng = np.random.default_rng(7)
    theta = randomized(ConvNetParams.initialize(seed=2), rng)
    grid = rng.uniform(size=(16, 16, 16))
    up = rng.normal(size=32)
    _, tape = cnn_forward(grid, theta)
    grads, dgrid = cnn_backward(tape, up)

    def objective(t, g):
        return float(cnn_forward(g, t)[0] @ up)

    names = list(theta.params)
    # small step keeps ReLU activation patterns fixed; float64 keeps FD noise near 1e-9
    h = 1e-7
    worst = 0.0
    for probe in range(50):
        if probe % 5 == 0:
            v = rng.normal(size=grid.shape)
            an = float(np.sum(dgrid * v))
            fd = (objective(theta, grid + h * v) - objective(theta, grid - h * v)) / (2 * h)
        else:
            name = names[rng.integers(len(names))]
            v = rng.normal(size=theta.params[name].shape)
            an = float(np.sum(grads[name] * v))
            tp, tm = theta.copy(), theta.copy()
            tp.params[name] = tp.params[name] + h * v
            tm.params[name] = tm.params[name] - h * v
            fd = (objective(tp, grid) - objective(tm, grid)) / (2 * h)
        # conv biases feed a normalization, so their exact gradient is 0
        worst = max(worst, abs(an - fd) / max(abs(fd), 1e-3))
    assert worst < 1e-4


def test_param_only_and_grid_only_backward(rng):
    theta = ConvNetParams.initialize(seed=0, dtype=np.float64)
    g = rng.uniform(size=(2, 16, 16, 16))
    up = rng.normal(size=(2, 32))
    full = cnn_backward(cnn_forward(g, theta)[1], up)
    p_only = cnn_backward(cnn_forward(g, theta)[1], up, need_grid_grad=False)
    g_only = cnn_backward(cnn_forward(g, theta)[1], up, need_param_grads=False)
    assert p_only[1] is None and g_only[0] is None
    np.testing.assert_allclose(g_only[1], full[1])
    np.testing.assert_allclose(p_only[0]["conv1.weight"], full[0]["conv1.weight"])


# -- MLP --------------------------------------------------------------------

def test_mlp_identity_and_zero(rng):
    x = rng.normal(size=6)
    y, _ = mlp_forward(x, MLPParams.identity(6))
    np.testing.assert_array_equal(y, x)
    theta = MLPParams.initialize((6, 8, 4), seed=0)
    z, tape = mlp_forward(np.zeros(6), theta)
    np.testing.assert_array_equal(z, 0.0)
    mlp_backward(tape, np.ones(4))
    with pytest.raises(TapeError):
        mlp_backward(tape, np.ones(4))


@pytest.mark.parametrize("residual", [False, True])
def test_mlp_fd(rng, residual):
    theta = MLPParams.initialize((5, 7, 7, 3), seed=1, residual=residual)
    x = rng.normal(size=(4, 5))
    up = rng.normal(size=(4, 3))
    _, tape = mlp_forward(x, theta)
    grads, dx = mlp_backward(tape, up)
    h = 1e-6

    def f(xx):
        return float(np.sum(mlp_forward(xx, theta)[0] * up))

    v = rng.normal(size=x.shape)
    fd = (f(x + h * v) - f(x - h * v)) / (2 * h)
    assert abs(np.sum(dx * v) - fd) < 1e-4 * abs(fd)
    for name, g in grads.items():
        v = rng.normal(size=g.shape)
        old = theta.params[name].copy()
        theta.params[name] = old + h * v
        fp = f(x)
        theta.params[name] = old - h * v
        fm = f(x)
        theta.params[name] = old
        fd = (fp - fm) / (2 * h)
        assert abs(np.sum(g * v) - fd) <= 1e-4 * max(abs(fd), 1e-8)


# -- Adam -------------------------------------------------------------------

def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    st = AdamState(lr=0.1)
    adam_step(p, {"w": np.array([3.0, 1.0])}, st)
    before = p["w"].copy()
    m, v = st.m["w"].copy(), st.v["w"].copy()
    adam_step(p, {"w": np.zeros(2)}, st)
    # zero gradient still moves through the decayed momentum; moments decay by beta
    np.testing.assert_allclose(st.m["w"], 0.9 * m)
    np.testing.assert_allclose(st.v["w"], 0.999 * v)
    fresh = {"w": before.copy()}
    adam_step(fresh, {"w": np.zeros(2)}, AdamState(lr=0.1))
    np.testing.assert_array_equal(fresh["w"], before)
    assert st.step == 2


def test_adam_one_step_closed_form():
    g = np.array([0.5, -2.0, 1e-3])
    p = {"w": np.zeros(3)}
    st = AdamState(lr=1e-3)
    adam_step(p, {"w": g}, st)
    np.testing.assert_allclose(p["w"], -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_quadratic_converges():
    p = {"x": np.array([0.0])}
    st = AdamState(lr=0.05)
    for _ in range(500):
        adam_step(p, {"x": 2 * (p["x"] - 3.0)}, st)
    assert abs(p["x"][0] - 3.0) < 1e-6


def test_adam_nonfinite_names_block():
    p = {"a": np.zeros(2), "b": np.zeros(2)}
    with pytest.raises(NumericalError, match="'b'"):
        adam_step(p, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, AdamState())
    np.testing.assert_array_equal(p["a"], 0.0)
