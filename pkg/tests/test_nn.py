import numpy as np
import pytest

from profiler_pl.nn import (AdamState, ArchSpec, NonFiniteGradient, adam_step, backward,
                            build_model, forward, load_checkpoint, loss_and_grad, mse_loss,
                            save_checkpoint)
from profiler_pl.nn import layers
from profiler_pl.nn.checkpoint import Checkpoint, CheckpointError
from profiler_pl.nn.gradcheck import kink_margin, numerical_grads, relative_error
from profiler_pl.nn.model import ArchError
from profiler_pl.profile import ChannelConfig, NormalizationSpec

MICRO = ArchSpec(conv_channels=(3, 4), fc_widths=(5,), input_rows=8, input_cols=7)


def micro_batch(config, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, config.n_channels, MICRO.input_rows, MICRO.input_cols))
    s = rng.normal(size=(n, config.n_scalars))
    t = rng.normal(size=n)
    return x, s, t


def fd_input_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + h
        up = f(x)
        x.flat[i] = orig - h
        down = f(x)
        x.flat[i] = orig
        g.flat[i] = (up - down) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# Layer oracles
# ---------------------------------------------------------------------------


def naive_conv(x, w, b):
    c, n, h, wd = x.shape
    c_out, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((c_out, n, h, wd))
    for o in range(c_out):
        for s in range(n):
            for i in range(h):
                for j in range(wd):
                    out[o, s, i, j] = np.sum(xp[:, s, i:i + k, j:j + k] * w[o]) + b[o]
    return out


def test_conv_matches_naive():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 2, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out, _ = layers.conv_forward(x, w, b)
    np.testing.assert_allclose(out, naive_conv(x, w, b), atol=1e-12)


def test_maxpool_matches_window_max():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 2, 9, 7))
    out, _ = layers.maxpool_forward(x)
    assert out.shape == (3, 2, 4, 3)
    for i in range(4):
        for j in range(3):
            np.testing.assert_array_equal(out[..., i, j],
                                          x[..., 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(-2, -1)))


def test_maxpool_tie_routes_to_first():
    x = np.array([[[[1.0, 3.0], [3.0, 3.0]]]])
    out, cache = layers.maxpool_forward(x)
    dx = layers.maxpool_backward(np.ones_like(out), cache)
    np.testing.assert_array_equal(dx[0, 0], [[0.0, 1.0], [0.0, 0.0]])


def test_relu_nonnegative():
    x = np.random.default_rng(2).normal(size=1000)
    out, _ = layers.relu_forward(x)
    assert np.all(out >= 0)


@pytest.mark.parametrize("seed", range(5))
def test_layer_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 2, 3, 3))
    b = rng.normal(size=4)
    r = rng.normal(size=(4, 3, 6, 5))
    out, cache = layers.conv_forward(x, w, b)
    dx, dw, db = layers.conv_backward(r, cache)
    assert relative_error(dx, fd_input_grad(lambda v: np.sum(layers.conv_forward(v, w, b)[0] * r), x)) < 1e-6
    assert relative_error(dw, fd_input_grad(lambda v: np.sum(layers.conv_forward(x, v, b)[0] * r), w)) < 1e-6
    assert relative_error(db, fd_input_grad(lambda v: np.sum(layers.conv_forward(x, w, v)[0] * r), b)) < 1e-6

    xp = rng.normal(size=(2, 3, 7, 5))
    rp = rng.normal(size=(2, 3, 3, 2))
    _, pc = layers.maxpool_forward(xp)
    assert relative_error(layers.maxpool_backward(rp, pc),
                          fd_input_grad(lambda v: np.sum(layers.maxpool_forward(v)[0] * rp), xp)) < 1e-6

    xr = rng.normal(size=50)
    rr = rng.normal(size=50)
    _, rc = layers.relu_forward(xr)
    assert relative_error(layers.relu_backward(rr, rc),
                          fd_input_grad(lambda v: np.sum(layers.relu_forward(v)[0] * rr), xr)) < 1e-6

    xd, wd, bd = rng.normal(size=(4, 6)), rng.normal(size=(6, 3)), rng.normal(size=3)
    rd = rng.normal(size=(4, 3))
    _, dc = layers.dense_forward(xd, wd, bd)
    gx, gw, gb = layers.dense_backward(rd, dc)
    assert relative_error(gx, fd_input_grad(lambda v: np.sum(layers.dense_forward(v, wd, bd)[0] * rd), xd)) < 1e-6
    assert relative_error(gw, fd_input_grad(lambda v: np.sum(layers.dense_forward(xd, v, bd)[0] * rd), wd)) < 1e-6
    assert relative_error(gb, fd_input_grad(lambda v: np.sum(layers.dense_forward(xd, wd, v)[0] * rd), bd)) < 1e-6


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def test_build_model_deterministic():
    cfg = ChannelConfig.of("original")
    a, b = build_model(cfg, seed=4), build_model(cfg, seed=4)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    c = build_model(cfg, seed=5)
    assert a.params["conv0.w"].tobytes() != c.params["conv0.w"].tobytes()
    assert all(np.all(v == 0) for k, v in a.params.items() if k.endswith(".b"))


def test_default_topology_per_config():
    orig = build_model(ChannelConfig.of("original"))
    flip = build_model(ChannelConfig.of("flip"))
    arch = ArchSpec()
    assert orig.conv_blocks[0]["kernels"].shape == (16, 4, 3, 3)
    assert flip.conv_blocks[0]["kernels"].shape == (16, 2, 3, 3)
    assert arch.feature_shape() == (16, 3, 64)
    assert orig.fc_layers[0]["weights"].shape == (arch.flatten_width, 128)
    assert flip.fc_layers[0]["weights"].shape == (arch.flatten_width + 2, 128)
    assert orig.fc_layers[-1]["weights"].shape == (64, 1)
    assert (orig.junction, flip.junction) == (0, 2)


def test_arch_validation():
    with pytest.raises(ArchError):
        ArchSpec(conv_channels=(4,) * 9)
    with pytest.raises(ArchError):
        ArchSpec(kernel=2)


def test_zero_network_outputs_final_bias():
    cfg = ChannelConfig.of("flip")
    m = build_model(cfg, MICRO, seed=0, dtype=np.float64)
    for v in m.params.values():
        v[:] = 0
    m.params["fc1.b"][:] = 0.37
    x, s, _ = micro_batch(cfg, 6, 0)
    pred, _ = forward(m, x, s)
    np.testing.assert_array_equal(pred, np.full(6, 0.37))


def test_hand_computed_micro_model():
    cfg = ChannelConfig.of("fine")
    arch = ArchSpec(conv_channels=(1,), fc_widths=(), input_rows=4, input_cols=4)
    m = build_model(cfg, arch, dtype=np.float64)
    k = np.zeros((1, 4, 3, 3))
    k[0, 0, 1, 1] = 1.0
    k[0, 0, 1, 2] = 0.5  # out[i, j] = x[i, j] + 0.5 x[i, j+1]
    m.params["conv0.w"][:] = k
    m.params["conv0.b"][:] = -1.0
    m.params["fc0.w"][:] = np.array([[1.0], [-1.0], [2.0], [0.5]])
    m.params["fc0.b"][:] = 0.25
    x = np.zeros((1, 4, 4, 4))
    x[0, 0] = [[1, 2, 0, 1], [0, 1, 3, 0], [2, 0, 1, 1], [1, 1, 0, 2]]
    # conv - 1 -> [[1,1,-.5,0],[-.5,1.5,2,-1],[1,-.5,.5,0],[.5,0,0,1]]
    # pool -> [[1.5, 2], [1, 1]]; fc -> 1.5 - 2 + 2 + 0.5 + 0.25
    pred, _ = forward(m, x)
    assert pred[0] == pytest.approx(2.25, abs=1e-12)


def test_batch_independence():
    cfg = ChannelConfig.of("original")
    arch = ArchSpec(conv_channels=(4, 4, 4, 4), fc_widths=(8,))
    m = build_model(cfg, arch, seed=1)
    x = np.random.default_rng(0).normal(scale=0.1, size=(256, 4, 256, 61)).astype(np.float32)
    alone, _ = forward(m, x[17:18])
    batch, _ = forward(m, x)
    assert abs(alone[0] - batch[17]) < 1e-6


def test_forward_permutation_equivariant():
    cfg = ChannelConfig.of("flip")
    m = build_model(cfg, MICRO, seed=3, dtype=np.float64)
    x, s, _ = micro_batch(cfg, 9, 3)
    perm = np.random.default_rng(3).permutation(9)
    a, _ = forward(m, x, s)
    b, _ = forward(m, x[perm], s[perm])
    np.testing.assert_allclose(a[perm], b, rtol=1e-12)


def test_forward_shape_errors():
    cfg = ChannelConfig.of("flip")
    m = build_model(cfg, MICRO, dtype=np.float64)
    x, s, _ = micro_batch(cfg, 2, 0)
    with pytest.raises(ValueError):
        forward(m, x)  # FLIP without scalars
    with pytest.raises(ValueError):
        forward(m, np.zeros((2, 4, 8, 7)), s)


@pytest.mark.parametrize("kind", ["original", "fine", "flip"])
@pytest.mark.parametrize("seed", range(5))
def test_composed_gradients_match_finite_differences(kind, seed):
    cfg = ChannelConfig.of(kind)
    m = build_model(cfg, MICRO, seed=seed, dtype=np.float64)
    for name, v in m.params.items():
        if name.endswith(".b"):
            v[:] = np.random.default_rng(seed + 100).normal(scale=0.1, size=v.shape)
    # redraw until no ReLU input or pool window sits within reach of a step of h
    for draw in range(1000):
        x, s, t = micro_batch(cfg, 2, seed * 1000 + draw)
        if kink_margin(forward(m, x, s)[1]) > 0.02:
            break
    else:
        pytest.fail("no kink-free draw found")
    _, grads, _ = loss_and_grad(m, x, s, t)
    numeric = numerical_grads(m, x, s, t, h=1e-3)
    for name in m.params:
        assert relative_error(grads[name], numeric[name]) < 1e-4, name


def test_zero_loss_gradient_gives_zero_grads():
    cfg = ChannelConfig.of("original")
    m = build_model(cfg, MICRO, dtype=np.float64)
    x, s, _ = micro_batch(cfg, 4, 0)
    _, cache = forward(m, x)
    grads = backward(m, cache, np.zeros(4))
    assert all(np.all(g == 0) for g in grads.values())
    assert {k: g.shape for k, g in grads.items()} == {k: p.shape for k, p in m.params.items()}


def test_duplicated_sample_doubles_gradient():
    cfg = ChannelConfig.of("flip")
    m = build_model(cfg, MICRO, seed=2, dtype=np.float64)
    x, s, _ = micro_batch(cfg, 1, 2)
    g = np.array([0.7])
    _, c1 = forward(m, x, s)
    one = backward(m, c1, g)
    _, c2 = forward(m, np.concatenate([x, x]), np.concatenate([s, s]))
    two = backward(m, c2, np.concatenate([g, g]))
    for k in one:
        np.testing.assert_allclose(two[k], 2 * one[k], rtol=1e-12, atol=1e-15)


def test_backward_rejects_foreign_cache():
    cfg = ChannelConfig.of("original")
    a = build_model(cfg, MICRO, dtype=np.float64)
    b = build_model(cfg, MICRO, dtype=np.float64)
    x, _, _ = micro_batch(cfg, 2, 0)
    _, cache = forward(a, x)
    with pytest.raises(ValueError):
        backward(b, cache, np.ones(2))
    with pytest.raises(ValueError):
        backward(a, cache, np.ones(3))


# ---------------------------------------------------------------------------
# Loss and optimizer
# ---------------------------------------------------------------------------


def test_mse_basic():
    assert mse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0]))[0] == 0.0
    loss, grad = mse_loss(np.array([3.0]), np.array([1.0]))
    assert loss == 4.0 and grad.tolist() == [4.0]
    with pytest.raises(ValueError):
        mse_loss(np.array([]), np.array([]))


def test_mse_recomputation():
    rng = np.random.default_rng(9)
    p, t = rng.normal(size=100), rng.normal(size=100)
    loss, grad = mse_loss(p, t)
    total = 0.0
    for a, b in zip(p, t):
        total += (a - b) ** 2
    assert abs(loss - total / 100) < 1e-12
    np.testing.assert_allclose(grad, [2 * (a - b) / 100 for a, b in zip(p, t)], atol=1e-12)


def one_weight_model(w0=0.0):
    cfg = ChannelConfig.of("fine")
    m = build_model(cfg, ArchSpec(conv_channels=(1,), fc_widths=(), input_rows=2, input_cols=2),
                    dtype=np.float64)
    m.params = {"w": np.array([w0])}
    return m


def test_adam_zero_gradient():
    m = one_weight_model(0.5)
    state = AdamState()
    adam_step(m, {"w": np.array([0.0])}, state)
    assert m.params["w"][0] == 0.5 and state.step == 1


def test_adam_first_step():
    m = one_weight_model()
    adam_step(m, {"w": np.array([1.0])}, AdamState(lr=1e-4))
    assert m.params["w"][0] == pytest.approx(-1e-4 / (1 + 1e-8), abs=1e-18)


def test_adam_two_steps_unrolled():
    lr, b1, b2, eps, g = 1e-4, 0.9, 0.999, 1e-8, 0.3
    m = one_weight_model(0.2)
    state = AdamState(lr=lr)
    adam_step(m, {"w": np.array([g])}, state)
    adam_step(m, {"w": np.array([g])}, state)
    w = 0.2
    m1 = (1 - b1) * g
    v1 = (1 - b2) * g * g
    w -= lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
    m2 = b1 * m1 + (1 - b1) * g
    v2 = b2 * v1 + (1 - b2) * g * g
    w -= lr * (m2 / (1 - b1 ** 2)) / (np.sqrt(v2 / (1 - b2 ** 2)) + eps)
    assert abs(m.params["w"][0] - w) < 1e-12
    assert state.step == 2


def test_adam_rejects_non_finite():
    m = one_weight_model()
    with pytest.raises(NonFiniteGradient):
        adam_step(m, {"w": np.array([np.nan])}, AdamState())


def test_single_step_reduces_loss():
    cfg = ChannelConfig.of("original")
    m = build_model(cfg, MICRO, seed=7, dtype=np.float64)
    x, s, t = micro_batch(cfg, 1, 7)
    before, grads, _ = loss_and_grad(m, x, s, t)
    adam_step(m, grads, AdamState(lr=1e-5))
    after, _, _ = loss_and_grad(m, x, s, t)
    assert after < before


def test_chunked_gradient_equals_full_batch():
    cfg = ChannelConfig.of("flip")
    m = build_model(cfg, MICRO, seed=1, dtype=np.float64)
    x, s, t = micro_batch(cfg, 10, 1)
    l1, g1, _ = loss_and_grad(m, x, s, t, chunk=3)
    l2, g2, _ = loss_and_grad(m, x, s, t, chunk=64)
    assert l1 == pytest.approx(l2, rel=1e-12)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-10, atol=1e-14)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg = ChannelConfig.of("flip")
    m = build_model(cfg, MICRO, seed=3)
    norm = NormalizationSpec(target_offset_db=100.0)
    ckp = Checkpoint(m, norm, 0.0123, seed=3, epoch=7,
                     loss_curve=[{"epoch": 1, "train_rmse_db": 3.0, "val_rmse_db": 4.0}])
    save_checkpoint(ckp, tmp_path / "m.ckp")
    back = load_checkpoint(tmp_path / "m.ckp")
    assert back.config == cfg and back.model.arch == MICRO and back.norm == norm
    assert (back.val_loss, back.seed, back.epoch) == (0.0123, 3, 7)
    assert back.loss_curve == ckp.loss_curve
    for k, v in m.params.items():
        np.testing.assert_array_equal(back.model.params[k], v)
    x, s, _ = micro_batch(cfg, 2, 0)
    np.testing.assert_array_equal(forward(back.model, x, s)[0], forward(m, x, s)[0])
    # bytes are a pure function of the checkpoint
    save_checkpoint(back, tmp_path / "again.ckp")
    assert (tmp_path / "again.ckp").read_bytes() == (tmp_path / "m.ckp").read_bytes()


def test_checkpoint_corruption(tmp_path):
    (tmp_path / "bad.ckp").write_bytes(b"XXXX")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckp")
    m = build_model(ChannelConfig.of("fine"), MICRO)
    save_checkpoint(Checkpoint(m, NormalizationSpec(), 1.0, 0, 1), tmp_path / "m.ckp")
    (tmp_path / "m.ckp").write_bytes((tmp_path / "m.ckp").read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.ckp")
