import struct

import numpy as np
import pytest

from deskpilot import nn
from _oracles import TINY_SPEC, analytic_grads, finite_difference_check

SPEC = nn.DEFAULT_SPEC


def test_normalize_endpoints():
    x = np.array([0.0, 127.5, 255.0], np.float32)
    assert nn.normalize(x).tolist() == [-1.0, 0.0, 1.0]


def test_counts():
    assert nn.param_count(SPEC) == 252_219
    conn = nn.connection_count(SPEC)
    assert abs(conn - 27.0e6) / 27.0e6 < 0.05
    # last FC layer: 10 weights + 1 bias
    assert SPEC.param_shapes()[-2:] == [(1, 10), (1,)]


def test_param_count_by_hand():
    expected = 0
    cin = 3
    for cout, k in ((24, 5), (36, 5), (48, 5), (64, 3), (64, 3)):
        expected += (k * k * cin + 1) * cout
        cin = cout
    for a, b in ((1152, 100), (100, 50), (50, 10), (10, 1)):
        expected += (a + 1) * b
    assert nn.param_count(SPEC) == expected


def test_conv_output_sizes():
    sizes = [(s[4], s[5]) for s in SPEC.conv_shapes()]
    assert sizes == [(31, 98), (14, 47), (5, 22), (3, 20), (1, 18)]
    assert SPEC.flat_size() == 1152


def test_spec_too_small_rejected():
    with pytest.raises(nn.NetworkError):
        nn.NetworkSpec(input_shape=(3, 10, 10)).conv_shapes()


def test_zero_weights_give_zero():
    w = [np.zeros(s, np.float32) for s in SPEC.param_shapes()]
    x = np.random.default_rng(0).uniform(0, 255, (2,) + SPEC.input_shape).astype(np.float32)
    pred, acts = nn.forward(SPEC, w, x)
    assert np.all(pred == 0)
    assert all(np.all(a == 0) for a in acts.outputs)


def test_single_and_batch_agree():
    w = nn.init_weights(SPEC, 1)
    x = np.random.default_rng(1).uniform(0, 255, (3,) + SPEC.input_shape).astype(np.float32)
    batch = nn.predict(SPEC, w, x)
    assert isinstance(nn.predict(SPEC, w, x[1]), float)
    assert nn.predict(SPEC, w, x[1]) == pytest.approx(float(batch[1]), rel=1e-5, abs=1e-7)


def _reference_forward(spec, weights, x):
    """Direct loops over output positions in float64."""
    h = x.astype(np.float64) / 127.5 - 1.0
    wi = 0
    for cv in spec.convs:
        W, b = weights[wi].astype(np.float64), weights[wi + 1].astype(np.float64)
        c, hh, ww = h.shape
        oh, ow = (hh - cv.kernel) // cv.stride + 1, (ww - cv.kernel) // cv.stride + 1
        out = np.empty((cv.out, oh, ow))
        for i in range(oh):
            for j in range(ow):
                patch = h[:, i * cv.stride:i * cv.stride + cv.kernel, j * cv.stride:j * cv.stride + cv.kernel]
                out[:, i, j] = np.tensordot(W, patch, axes=3) + b
        h = np.maximum(out, 0)
        wi += 2
    h = h.reshape(-1)
    n_fc = len(spec.fc_sizes())
    for j in range(n_fc):
        h = weights[wi].astype(np.float64) @ h + weights[wi + 1]
        if j < n_fc - 1:
            h = np.maximum(h, 0)
        wi += 2
    return float(h[0])


def test_forward_matches_loop_reference_and_float32_close():
    rng = np.random.default_rng(2)
    w = nn.init_weights(SPEC, 2)
    for i, b in enumerate(w):
        if b.ndim == 1:
            w[i] = rng.normal(0, 0.05, b.shape).astype(np.float32)
    x = rng.uniform(0, 255, SPEC.input_shape).astype(np.float32)
    ref = _reference_forward(SPEC, w, x)
    p64 = nn.predict(SPEC, w, x, dtype=np.float64)
    p32 = nn.predict(SPEC, w, x)
    assert p64 == pytest.approx(ref, rel=1e-10)
    assert abs(p32 - ref) / abs(ref) < 1e-4


def test_mse_examples():
    assert nn.mse_loss(0.3, 0.3) == 0.0
    assert nn.mse_loss(0.02, 0.0) == pytest.approx(4e-4)
    e = 0.07
    assert nn.mse_loss(np.array([e, -e]), np.zeros(2)) == pytest.approx(e * e)


def test_zero_loss_gradient_gives_zero_grads():
    w = nn.init_weights(TINY_SPEC, 0, np.float64)
    x = np.random.default_rng(3).uniform(0, 255, (4,) + TINY_SPEC.input_shape)
    _, acts = nn.forward(TINY_SPEC, w, x, dtype=np.float64)
    grads = nn.backward(TINY_SPEC, w, acts, np.zeros(4))
    assert all(np.all(g == 0) for g in grads)


def _tiny_problem(seed=4, n=3):
    rng = np.random.default_rng(seed)
    w = nn.init_weights(TINY_SPEC, seed, np.float64)
    for i, b in enumerate(w):
        if b.ndim == 1:
            w[i] = rng.normal(0, 0.1, b.shape)
    x = rng.uniform(0, 255, (n,) + TINY_SPEC.input_shape)
    y = rng.normal(0, 0.5, n)
    return w, x, y


def test_finite_difference_every_parameter_tiny_spec():
    w, x, y = _tiny_problem()
    worst, checked = finite_difference_check(TINY_SPEC, w, x, y)
    # units behind dead ReLUs have exactly zero gradient and are skipped
    assert checked > 0.6 * nn.param_count(TINY_SPEC)
    assert worst < 1e-6


def test_output_bias_gradient_is_mean_loss_gradient():
    w, x, y = _tiny_problem(5, 6)
    pred, acts = nn.forward(TINY_SPEC, w, x, dtype=np.float64)
    lg = nn.mse_loss_grad(pred, y)
    grads = nn.backward(TINY_SPEC, w, acts, lg)
    assert grads[-1][0] == pytest.approx(np.mean(lg), rel=1e-12)


def test_backward_rejects_foreign_activations():
    w, x, y = _tiny_problem()
    _, acts = nn.forward(TINY_SPEC, w, x, dtype=np.float64)
    with pytest.raises(nn.NetworkError):
        nn.backward(SPEC, nn.init_weights(SPEC), acts, np.zeros(3))


def test_float32_gradients_close_to_float64():
    w, x, y = _tiny_problem(6)
    g32 = analytic_grads(TINY_SPEC, [p.astype(np.float32) for p in w], x, y, np.float32)
    g64 = analytic_grads(TINY_SPEC, w, x, y, np.float64)
    for a, b in zip(g32, g64):
        assert a.dtype == np.float32
        assert np.max(np.abs(a - b)) <= 1e-4 * max(1.0, np.max(np.abs(b)))


def test_sgd_lr_zero_keeps_weights():
    w = nn.init_weights(TINY_SPEC, 0)
    g = [np.ones_like(p) for p in w]
    out = nn.SGD(0.0, 0.9).step(w, g)
    assert all(np.array_equal(a, b) for a, b in zip(out, w))


def test_sgd_plain_step():
    (w,), _ = nn.sgd_step([np.array([1.5])], [np.array([0.2])], lr=0.1)
    assert w[0] == pytest.approx(1.5 - 0.1 * 0.2)


def test_sgd_momentum_recursion():
    opt = nn.SGD(0.1, 0.9)
    w = [np.array([1.0])]
    g1, g2 = 0.5, -0.3
    w = opt.step(w, [np.array([g1])])
    w = opt.step(w, [np.array([g2])])
    v1 = g1
    v2 = 0.9 * v1 + g2
    assert w[0][0] == pytest.approx(1.0 - 0.1 * v1 - 0.1 * v2)


def test_sgd_rejects_bad_gradients():
    w = [np.zeros(3)]
    with pytest.raises(nn.NetworkError):
        nn.SGD().step(w, [np.array([0.0, np.nan, 0.0])])
    with pytest.raises(nn.NetworkError):
        nn.SGD().step(w, [np.zeros(2)])


def test_training_steps_are_deterministic():
    def run():
        w, x, y = _tiny_problem(7)
        w = [p.astype(np.float32) for p in w]
        opt = nn.SGD(0.01, 0.9)
        for _ in range(5):
            pred, acts = nn.forward(TINY_SPEC, w, x.astype(np.float32))
            w = opt.step(w, nn.backward(TINY_SPEC, w, acts, nn.mse_loss_grad(pred, y)))
        return b"".join(p.tobytes() for p in w)
    assert run() == run()


def test_forward_finite_on_byte_inputs():
    w = nn.init_weights(SPEC, 9)
    x = np.stack([np.zeros(SPEC.input_shape), np.full(SPEC.input_shape, 255.0)]).astype(np.float32)
    pred, acts = nn.forward(SPEC, w, x)
    assert np.all(np.isfinite(pred))


# ---------------------------------------------------------------------------
# checkpoints

@pytest.fixture
def ckpt():
    return nn.Checkpoint(SPEC, nn.init_weights(SPEC, 3), {"epoch": 2, "loss": 0.5, "seed": 3})


def test_checkpoint_round_trip_bytes(ckpt, tmp_path):
    p = tmp_path / "a.pltn"
    nn.save_checkpoint(ckpt, p)
    back = nn.load_checkpoint(p)
    nn.save_checkpoint(back, tmp_path / "b.pltn")
    assert p.read_bytes() == (tmp_path / "b.pltn").read_bytes()
    assert back.metadata == ckpt.metadata
    assert all(np.array_equal(a, b) for a, b in zip(back.weights, ckpt.weights))


def test_checkpoint_layout(ckpt):
    data = nn.checkpoint_bytes(ckpt)
    assert data[:4] == b"PLTN"
    assert struct.unpack_from("<H", data, 4)[0] == nn.FORMAT_VERSION
    assert data[6:38] == SPEC.fingerprint()
    first = np.frombuffer(data, "<f4", count=4, offset=38)
    assert np.array_equal(first, ckpt.weights[0].reshape(-1)[:4])
    n_floats = nn.param_count(SPEC)
    (mlen,) = struct.unpack_from("<I", data, 38 + 4 * n_floats)
    assert 38 + 4 * n_floats + 4 + mlen == len(data)


def test_checkpoint_errors(ckpt, tmp_path):
    data = nn.checkpoint_bytes(ckpt)
    with pytest.raises(nn.CheckpointError) as e:
        nn.parse_checkpoint(data[: len(data) // 2])
    assert e.value.code == "corrupt"
    with pytest.raises(nn.CheckpointError) as e:
        nn.parse_checkpoint(b"XXXX" + data[4:])
    assert e.value.code == "bad_magic"
    with pytest.raises(nn.CheckpointError) as e:
        nn.parse_checkpoint(data[:4] + struct.pack("<H", 99) + data[6:])
    assert e.value.code == "bad_version"
    with pytest.raises(nn.CheckpointError) as e:
        nn.parse_checkpoint(data, TINY_SPEC)
    assert e.value.code == "fingerprint"
    with pytest.raises(nn.CheckpointError) as e:
        nn.load_checkpoint(tmp_path / "missing.pltn")


def test_checkpoint_of_other_spec_reads_spec_from_metadata():
    c = nn.Checkpoint(TINY_SPEC, nn.init_weights(TINY_SPEC, 1), {"epoch": 0})
    back = nn.parse_checkpoint(nn.checkpoint_bytes(c))
    assert back.spec == TINY_SPEC
    assert all(np.array_equal(a, b) for a, b in zip(back.weights, c.weights))


def test_init_statistics():
    w = nn.init_weights(SPEC, 0, np.float64)
    assert np.all(w[1] == 0)
    # He scale on hidden layers, shrunk regression head
    assert np.std(w[0]) == pytest.approx(np.sqrt(2 / 75), rel=0.05)
    assert np.std(w[-2]) * np.sqrt(10 / 2) / nn.HEAD_INIT_SCALE == pytest.approx(1.0, rel=0.7)
    x = np.random.default_rng(0).uniform(0, 255, (16,) + SPEC.input_shape)
    assert np.max(np.abs(nn.predict(SPEC, w, x, dtype=np.float64))) < 0.1
