import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from noprop.autodiff import Graph, grad_check
from noprop.blocks import BlockConfig, block_forward_ct, block_forward_dt, block_logits, flow_forward, init_block
from noprop.bundle import build_bundle
from noprop.config import default_config
from noprop.errors import ConfigError, ShapeError


def _setup(kind="dt", arch="mlp", d=3, m=3, shape=(5,), seed=0, **kw):
    cfg = BlockConfig(kind, shape, d, m, arch=arch, hidden=8, conv_channels=(2, 4), time_dim=4, **kw)
    store = init_block(cfg, "blk", np.random.default_rng(seed))
    r = np.random.default_rng(seed + 1)
    x = r.uniform(0, 1, (4,) + tuple(shape))
    z = r.standard_normal((4, d))
    return cfg, store, x, z


def _run(fn, cfg, store, x, z, W, t=None, training=False):
    g = Graph(training=training)
    args = [g.const(z), g.const(x)] + ([g.const(t)] if t is not None else [])
    return fn(g, cfg, store, "blk", *args, g.const(W)).value


def test_dt_output_is_convex_combination():
    cfg, store, x, z = _setup()
    out = _run(block_forward_dt, cfg, store, x, z, np.eye(3))
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(out >= 0)


def test_eval_forward_is_pure():
    cfg, store, x, z = _setup()
    a = _run(block_forward_dt, cfg, store, x, z, np.eye(3))
    b = _run(block_forward_dt, cfg, store, x, z, np.eye(3))
    np.testing.assert_array_equal(a, b)


def test_dt_block_gradient_check():
    cfg, store, x, z = _setup()
    R = np.random.default_rng(9).standard_normal((4, 3))

    def build(g, p):
        return g.sum(g.mul(block_forward_dt(g, cfg, store, "blk", g.const(z), g.const(x), g.const(np.eye(3))),
                           g.const(R)))

    assert grad_check(build, dict(store.params)).max_rel_err < 1e-5


def test_ct_block_gradient_check_and_time_dependence():
    cfg, store, x, z = _setup("ct")
    W = np.random.default_rng(3).standard_normal((3, 3))
    t = np.full(4, 0.3)

    def build(g, p):
        out = block_forward_ct(g, cfg, store, "blk", g.const(z), g.const(x), g.const(t), g.const(W))
        return g.sum(g.mul(out, out))

    assert grad_check(build, dict(store.params)).max_rel_err < 1e-5
    a = _run(block_forward_ct, cfg, store, x, z, W, np.zeros(4))
    b = _run(block_forward_ct, cfg, store, x, z, W, np.ones(4))
    assert not np.allclose(a, b)


@given(st.floats(0, 1))
def test_ct_convex_hull_any_t(t):
    cfg, store, x, z = _setup("ct")
    out = _run(block_forward_ct, cfg, store, x, z, np.eye(3), np.full(4, t))
    assert np.all(out >= -1e-15)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_flow_output_linear_in_logits():
    W = np.random.default_rng(0).standard_normal((3, 4))
    g = Graph()
    Wn = g.const(W)
    assert np.all(g.linear(g.const(np.zeros((1, 3))), Wn).value == 0)
    np.testing.assert_array_equal(g.linear(g.const(np.eye(3)[[1]]), Wn).value[0], W[1])
    cfg, store, x, z = _setup("fm", d=4)
    v = _run(flow_forward, cfg, store, x, z, W, np.full(4, 0.5))
    g = Graph()
    logits = block_logits(g, cfg, store, "blk", g.const(z), g.const(x), g.const(np.full(4, 0.5))).value
    np.testing.assert_allclose(v, logits @ W, atol=1e-12)
    np.testing.assert_allclose(2 * v, (2 * logits) @ W, atol=1e-12)


def test_conv_block_shapes_and_label_as_image():
    cfg, store, x, z = _setup(arch="conv", shape=(8, 8, 1), d=3)
    assert _run(block_forward_dt, cfg, store, x, z, np.eye(3)).shape == (4, 3)
    cfg2, store2, x2, z2 = _setup(arch="conv", shape=(4, 4, 1), d=16)
    assert cfg2.label_as_image and any(k.startswith("blk/lab/conv") for k in store2.params)
    assert _run(block_forward_dt, cfg2, store2, x2, z2, np.eye(16)[:3]).shape == (4, 16)


def test_shape_errors():
    cfg, store, x, z = _setup()
    with pytest.raises(ShapeError):
        _run(block_forward_dt, cfg, store, x, z[:, :2], np.eye(3))
    with pytest.raises(ShapeError):
        _run(block_forward_dt, cfg, store, x[:, :4], z, np.eye(3))
    cfg, store, x, z = _setup("ct")
    with pytest.raises(ShapeError):
        _run(block_forward_ct, cfg, store, x, z, np.eye(3), np.zeros(3))


def test_config_validation():
    with pytest.raises(ConfigError):
        BlockConfig("xx", (2,), 2, 2)
    with pytest.raises(ConfigError):
        BlockConfig("dt", (2,), 2, 2, arch="conv")
    with pytest.raises(ConfigError):
        BlockConfig("dt", (2,), 2, 2, dropout=1.0)


def test_dropout_needs_stream_in_training():
    cfg, store, x, z = _setup(dropout=0.2)
    with pytest.raises(ConfigError):
        _run(block_forward_dt, cfg, store, x, z, np.eye(3), training=True)


def test_block_namespaces_disjoint_and_identical_structure():
    data_shape, m = (2,), 2
    dt = build_bundle(default_config("dt", T=3), data_shape, m)
    bp = build_bundle(default_config("backprop", T=3), data_shape, m)
    names = [set(s.params) for s in dt.blocks.values()]
    assert all(a.isdisjoint(b) for i, a in enumerate(names) for b in names[i + 1:])
    for t in range(1, 4):
        a, b = dt.blocks[f"block{t}"], bp.blocks[f"block{t}"]
        assert list(a.params) == list(b.params)
        assert all(a.params[k].shape == b.params[k].shape for k in a.params)


def test_perturbing_other_block_does_not_change_output():
    b = build_bundle(default_config("dt", T=3), (2,), 2)
    x, z = np.ones((3, 2)), np.zeros((3, 2))

    def run():
        g = Graph()
        return block_forward_dt(g, b.block_cfg, b.blocks["block2"], "block2", g.const(z), g.const(x),
                                g.const(np.eye(2))).value
    ref = run()
    b.blocks["block1"].params["block1/mix/out/w"] = b.blocks["block1"].params["block1/mix/out/w"] + 1.0
    np.testing.assert_array_equal(run(), ref)
    b.blocks["block2"].params["block2/mix/out/w"] = b.blocks["block2"].params["block2/mix/out/w"] + 1.0
    assert not np.array_equal(run(), ref)
