from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from papnet.errors import CheckpointError, NumericError, ShapeError
from papnet.nn import (
    Concat,
    Conv2d,
    InitPolicy,
    MaxPool2d,
    build_network,
    init_weights,
    load_checkpoint,
    loss_softmax_xent,
    preset_spec,
    random_init_layers,
    save_checkpoint,
    softmax,
)
from papnet.nn.checkpoint import checkpoint_bytes
from papnet.nn.gradcheck import run_gradcheck


def _conv_oracle(x, w, b, stride, pad):
    bsz, h, wd, cin = x.shape
    k, _, _, cout = w.shape
    xp = np.zeros((bsz, h + 2 * pad, wd + 2 * pad, cin), np.float64)
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    y = np.zeros((bsz, ho, wo, cout))
    for n in range(bsz):
        for i in range(ho):
            for j in range(wo):
                for o in range(cout):
                    acc = b[o]
                    for di in range(k):
                        for dj in range(k):
                            for c in range(cin):
                                acc += xp[n, i * stride + di, j * stride + dj, c] * w[di, dj, c, o]
                    y[n, i, j, o] = acc
    return y


def _conv(out_ch, k, s, p, in_shape, rng):
    layer = Conv2d("c", out_ch, k, s, p)
    layer.allocate(in_shape)
    layer.params["weight"] = rng.standard_normal(layer.params["weight"].shape).astype(np.float32)
    layer.params["bias"] = rng.standard_normal(out_ch).astype(np.float32)
    return layer


def test_conv_3x3_on_4x4_matches_loop():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 4, 4, 1)).astype(np.float32)
    layer = _conv(1, 3, 1, 0, (4, 4, 1), rng)
    y = layer.forward(x)
    assert y.shape == (1, 2, 2, 1)
    assert np.allclose(y, _conv_oracle(x, layer.params["weight"], layer.params["bias"], 1, 0), atol=1e-5)


@pytest.mark.parametrize("k,s,p,shape", [(3, 2, 1, (7, 6, 2)), (1, 1, 0, (3, 5, 3)), (5, 3, 2, (9, 9, 2)), (2, 1, 1, (4, 3, 1))])
def test_conv_matches_loop(k, s, p, shape):
    rng = np.random.default_rng(k * 10 + s)
    x = rng.standard_normal((2,) + shape).astype(np.float32)
    layer = _conv(3, k, s, p, shape, rng)
    assert np.allclose(layer.forward(x), _conv_oracle(x, layer.params["weight"], layer.params["bias"], s, p), atol=1e-4)


def test_identity_1x1_conv():
    layer = Conv2d("c", 3, 1)
    layer.allocate((5, 5, 3))
    layer.params["weight"][0, 0] = np.eye(3, dtype=np.float32)
    x = np.random.default_rng(0).standard_normal((2, 5, 5, 3)).astype(np.float32)
    assert np.array_equal(layer.forward(x), x)


def test_maxpool_constant_and_ties():
    pool = MaxPool2d("p", 2, 2)
    x = np.full((1, 4, 4, 2), 3.0, np.float32)
    assert np.all(pool.forward(x, train=True) == 3.0)
    dx = pool.backward(np.ones((1, 2, 2, 2), np.float32))
    # ties route the gradient to the first element of each window
    assert np.array_equal(dx[0, ::2, ::2], np.ones((2, 2, 2)))
    assert dx.sum() == 8
    y = MaxPool2d("p", 3, 1, pad=1).forward(-np.ones((1, 3, 3, 1), np.float32))
    assert np.all(y == -1.0)


def test_loss_uniform_and_limit():
    loss, grad = loss_softmax_xent(np.zeros((4, 7), np.float32), np.arange(4))
    assert loss == pytest.approx(math.log(7), abs=1e-12)
    assert round(loss, 4) == 1.9459
    assert np.allclose(grad.sum(axis=1), 0, atol=1e-7)
    big = np.array([[1000.0, 0.0], [0.0, 1000.0]], np.float32)
    loss, _ = loss_softmax_xent(big, np.array([0, 1]))
    assert 0.0 <= loss < 1e-12
    with pytest.raises(ValueError):
        loss_softmax_xent(np.zeros((2, 2)), np.array([0, 2]))


def test_loss_gradient_finite_difference():
    rng = np.random.default_rng(5)
    for _ in range(20):
        b, n = int(rng.integers(1, 6)), int(rng.choice([2, 7]))
        z = rng.standard_normal((b, n)) * 3
        y = rng.integers(0, n, b)
        _, g = loss_softmax_xent(z, y)
        num = np.zeros_like(z)
        for i in range(b):
            for j in range(n):
                e = np.zeros_like(z)
                e[i, j] = 1e-2
                num[i, j] = (loss_softmax_xent(z + e, y)[0] - loss_softmax_xent(z - e, y)[0]) / 2e-2
        assert np.abs(g - num).max() / max(np.abs(num).max(), 1e-12) < 1e-3


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.sampled_from([2, 7]), st.floats(0.1, 50), st.integers(0, 10**6))
def test_softmax_simplex_and_loss_nonnegative(b, n, scale, seed):
    rng = np.random.default_rng(seed)
    z = (rng.standard_normal((b, n)) * scale).astype(np.float32)
    assert np.allclose(softmax(z).sum(axis=1), 1.0, atol=1e-6)
    assert loss_softmax_xent(z, rng.integers(0, n, b))[0] >= 0.0


def test_gradcheck_all_kinds_quick():
    results = run_gradcheck(n_configs=4, seed=9)
    assert {r.kind for r in results} == {"conv2d", "maxpool", "relu", "fc", "concat", "global_avg_pool", "softmax_output"}
    for r in results:
        assert r.passed, (r.kind, r.max_rel_err)


def _net(name="cellnet-s", size=16, ch=5, n=2, seed=0, std="he"):
    net = build_network(preset_spec(name, size, ch, n))
    return init_weights(net, InitPolicy(gaussian_std=std), np.random.default_rng(seed))


SMOOTH_SPEC = {"input": [12, 12, 3], "layers": [
    {"kind": "conv2d", "name": "c1", "out_ch": 6, "kernel": 3, "stride": 2, "pad": 1},
    {"kind": "concat", "name": "cat", "branches": [
        [{"kind": "conv2d", "name": "a", "out_ch": 4, "kernel": 1}],
        [{"kind": "conv2d", "name": "b", "out_ch": 5, "kernel": 3, "pad": 1}],
        []]},
    {"kind": "conv2d", "name": "c2", "out_ch": 4, "kernel": 2, "stride": 2},
    {"kind": "fc", "name": "fc1", "out_dim": 8},
    {"kind": "softmax_output", "name": "out", "n_classes": 7},
]}


def test_network_gradient_directional():
    # no relu or maxpool, so the loss is smooth in every parameter
    net = init_weights(build_network(SMOOTH_SPEC), InitPolicy(gaussian_std="he"), np.random.default_rng(1))
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 12, 12, 3)).astype(np.float32)
    y = rng.integers(0, 7, 3)
    logits = net.forward(x, train=True)
    _, dl = loss_softmax_xent(logits, y)
    grads = net.backward(dl)
    params = net.parameters()
    direction = {k: rng.standard_normal(v.shape).astype(np.float32) for k, v in params.items()}
    analytic = sum(float(np.sum(grads[k].astype(np.float64) * direction[k])) for k in params)
    base = {k: v.copy() for k, v in params.items()}

    def loss_at(t):
        net.set_parameters({k: base[k] + np.float32(t) * direction[k] for k in base})
        return loss_softmax_xent(net.forward(x), y)[0]

    # moving every layer at once makes the loss a high-degree polynomial in t,
    # so the step is smaller than the per-layer check uses
    eps = 1e-3
    numeric = (loss_at(eps) - loss_at(-eps)) / (2 * eps)
    assert abs(analytic - numeric) / max(abs(numeric), 1e-8) < 2e-3
    net.set_parameters(base)
    assert net.input_grad.shape == x.shape


def test_zero_upstream_gradient():
    net = _net()
    net.forward(np.random.default_rng(0).random((2, 16, 16, 5)), train=True)
    grads = net.backward(np.zeros((2, 2), np.float32))
    assert all(not g.any() for g in grads.values())


def test_backward_requires_training_forward():
    net = _net()
    with pytest.raises(RuntimeError):
        net.backward(np.zeros((1, 2), np.float32))
    net.forward(np.zeros((1, 16, 16, 5)), train=False)
    with pytest.raises(RuntimeError):
        net.backward(np.zeros((1, 2), np.float32))


def test_concat_widths_and_gradient_slices():
    spec = {"input": [6, 6, 4], "layers": [{"kind": "concat", "name": "cat", "branches": [
        [{"kind": "conv2d", "name": "a", "out_ch": 8, "kernel": 1}],
        [{"kind": "conv2d", "name": "b", "out_ch": 24, "kernel": 3, "pad": 1}],
    ]}]}
    net = build_network(spec, strict=False)
    assert net.shapes[-1] == (6, 6, 32)

    cat = Concat("dup", [[], []])
    cat.output_shape((3, 3, 2))
    x = np.random.default_rng(0).random((1, 3, 3, 2)).astype(np.float32)
    y = cat.forward(x, train=True)
    assert np.array_equal(y, np.concatenate([x, x], axis=3))
    dy = np.random.default_rng(1).random(y.shape).astype(np.float32)
    assert np.array_equal(cat.backward(dy), dy[..., :2] + dy[..., 2:])


def test_build_errors():
    with pytest.raises(ShapeError):
        build_network({"input": [8, 8, 5], "layers": []})
    with pytest.raises(ShapeError, match="reserved"):
        build_network({"input": [8, 8, 5], "layers": [{"kind": "batch_norm", "name": "bn"}]})
    with pytest.raises(ShapeError, match="unknown kind"):
        build_network({"input": [8, 8, 5], "layers": [{"kind": "dropout"}]})
    with pytest.raises(ShapeError, match="layer 1"):
        build_network({"input": [8, 8, 5], "layers": [
            {"kind": "conv2d", "name": "c1", "out_ch": 4, "kernel": 7},
            {"kind": "conv2d", "name": "c2", "out_ch": 4, "kernel": 3},
            {"kind": "softmax_output", "n_classes": 2}]})
    with pytest.raises(ShapeError, match="duplicate"):
        build_network({"input": [8, 8, 5], "layers": [{"kind": "relu", "name": "r"}, {"kind": "relu", "name": "r"},
                                                      {"kind": "softmax_output", "n_classes": 2}]})
    with pytest.raises(ShapeError, match="2 or 7"):
        build_network(preset_spec("cellnet-s", 16, 5, 3))
    with pytest.raises(ShapeError, match="3 or 5"):
        build_network(preset_spec("cellnet-s", 16, 4, 2))
    with pytest.raises(ShapeError, match="softmax_output"):
        build_network({"input": [8, 8, 5], "layers": [{"kind": "global_avg_pool"}, {"kind": "fc", "out_dim": 2}]})


def test_input_shape_checked():
    net = _net()
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 16, 16, 3)))


def test_seven_way_output_and_alexnet_layout():
    assert _net(n=7).forward(np.zeros((3, 16, 16, 5))).shape == (3, 7)
    net = build_network(preset_spec("alexnet-t", 227, 5, 2))
    assert net.parameters()["fc6.weight"].shape[1] == 1024
    assert net.parameters()["fc7.weight"].shape == (1024, 256)
    assert net.forward(np.zeros((1, 227, 227, 5), np.float32)).shape == (1, 2)


def test_forward_is_pure():
    net = _net("cellnet-i", size=16)
    x = np.random.default_rng(3).random((4, 16, 16, 5)).astype(np.float32)
    a = net.forward(x)
    net.forward(x, train=True)
    assert np.array_equal(a, net.forward(x))
    assert np.array_equal(a, net.clone().forward(x))


def test_debug_mode_trips_on_nan(monkeypatch):
    monkeypatch.setenv("PAPNET_DEBUG", "1")
    net = _net()
    p = net.parameters()
    p["conv1.weight"] = np.full_like(p["conv1.weight"], np.nan)
    net.set_parameters(p)
    with pytest.raises(NumericError, match="conv1"):
        net.forward(np.ones((1, 16, 16, 5)))


def test_channel_extension_consistency():
    net3 = _net(ch=3, seed=4)
    net5 = build_network(preset_spec("cellnet-s", 16, 5, 2))
    p = net3.parameters()
    w5 = np.zeros(net5.parameters()["conv1.weight"].shape, np.float32)
    w5[:, :, :3] = p["conv1.weight"]
    net5.set_parameters({**p, "conv1.weight": w5})
    rng = np.random.default_rng(0)
    x3 = rng.random((4, 16, 16, 3)).astype(np.float32)
    x5 = np.concatenate([x3, np.zeros((4, 16, 16, 2), np.float32)], axis=3)
    assert np.allclose(net5.forward(x5), net3.forward(x3), rtol=1e-5, atol=1e-6)
    x5[..., 3:] = rng.integers(0, 2, (4, 16, 16, 2))
    assert np.allclose(net5.forward(x5), net3.forward(x3), rtol=1e-5, atol=1e-6)


def test_scratch_init_gaussian():
    net = _net("cellnet-i", std=0.01, seed=0)
    for name, v in net.parameters().items():
        if name.endswith(".weight"):
            assert v.any() and abs(float(v.std()) - 0.01) < 0.003
        else:
            assert not v.any()


def test_transfer_init_diff(tmp_path):
    src = _net("cellnet-s", seed=1)
    save_checkpoint(tmp_path / "src.bin", src)
    for n_fc, random_set in [(1, {"conv1", "out"}), (2, {"conv1", "fc1", "out"})]:
        dst = build_network(preset_spec("cellnet-s", 16, 5, 2))
        policy = InitPolicy(mode="transfer", checkpoint=str(tmp_path / "src.bin"), n_random_fc=n_fc)
        init_weights(dst, policy, np.random.default_rng(9))
        assert set(random_init_layers(dst, n_fc)) == random_set
        for key, v in dst.parameters().items():
            layer = key.rsplit(".", 1)[0]
            same = np.array_equal(v, src.parameters()[key])
            if layer in random_set and key.endswith(".weight"):
                assert not same, key
            elif layer not in random_set:
                assert same, key


def test_transfer_missing_layer(tmp_path):
    spec = preset_spec("cellnet-s", 16, 5, 2)
    spec["layers"][3]["name"] = "conv2_other"
    other = build_network(spec)
    save_checkpoint(tmp_path / "other.bin", other)
    dst = build_network(preset_spec("cellnet-s", 16, 5, 2))
    with pytest.raises(CheckpointError, match="conv2"):
        init_weights(dst, InitPolicy(mode="transfer", checkpoint=str(tmp_path / "other.bin")), np.random.default_rng(0))


def test_checkpoint_round_trip(tmp_path):
    net = _net("cellnet-i", seed=3)
    velocity = {k: np.random.default_rng(1).standard_normal(v.shape).astype(np.float32)
                for k, v in net.parameters().items()}
    meta = {"channel_means": [0.1, 0.2, 0.3, 0.4, 0.5], "fold": 2}
    p1 = save_checkpoint(tmp_path / "a.bin", net, meta, velocity)
    ck = load_checkpoint(p1)
    assert ck.metadata == meta
    for k, v in net.parameters().items():
        assert np.array_equal(ck.parameters[k], v)
        assert np.array_equal(ck.velocity[k], velocity[k])
    p2 = save_checkpoint(tmp_path / "b.bin", ck.network, ck.metadata, ck.velocity)
    assert p1.read_bytes() == p2.read_bytes()
    x = np.random.default_rng(0).random((2, 16, 16, 5)).astype(np.float32)
    assert np.array_equal(ck.network.forward(x), net.forward(x))


def test_checkpoint_truncated_and_corrupt(tmp_path):
    blob = checkpoint_bytes(_net())
    for cut in (4, 30, len(blob) - 4, len(blob) - 1):
        (tmp_path / "t.bin").write_bytes(blob[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.bin")
    (tmp_path / "m.bin").write_bytes(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointError, match="not a papnet"):
        load_checkpoint(tmp_path / "m.bin")
    (tmp_path / "v.bin").write_bytes(blob[:8] + (99).to_bytes(4, "little") + blob[12:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.bin")


def test_checkpoint_spec_mismatch_names_layer(tmp_path):
    path = save_checkpoint(tmp_path / "a.bin", _net())
    wider = preset_spec("cellnet-s", 16, 5, 2)
    wider["layers"][9]["out_dim"] = 64
    with pytest.raises(CheckpointError, match="fc1"):
        load_checkpoint(path, expected_spec=wider)
    with pytest.raises(CheckpointError, match="conv1"):
        load_checkpoint(path, expected_spec=preset_spec("cellnet-s", 16, 3, 2))
