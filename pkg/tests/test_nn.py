import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sketchparse.errors import (
    CorruptCheckpoint,
    EmptySequence,
    NonFinite,
    ShapeMismatch,
    TargetOutOfRange,
)
from sketchparse.nn import tensor as T
from sketchparse.nn.gradcheck import grad_check
from sketchparse.nn.layers import (
    LSTM,
    BiLSTM,
    Scorer,
    attended_output,
    attention,
    bilstm_encode,
    lstm_step,
)
from sketchparse.nn.optim import RMSProp, clip_by_global_norm, rmsprop_step
from sketchparse.nn.params import (
    ParamSet,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from sketchparse.nn.tensor import Tape, Tensor, softmax_nll_smoothed

TOL = 1e-4


def f64(*shape, seed=0, scale=1.0):
    return Tensor(np.random.default_rng(seed).normal(0, scale, shape), requires_grad=True)


# ---------------------------------------------------------------- lstm


def test_lstm_zero_weights_zero_state():
    ps = ParamSet(np.float64)
    cell = LSTM(ps, "l", 3, 4)
    for p in ps:
        p.data[...] = 0
    h, c = lstm_step(cell.zeros(2, np.float64), Tensor(np.random.default_rng(1).normal(size=(2, 3))), cell)
    assert np.all(h.data == 0) and np.all(c.data == 0)


def test_lstm_forget_saturation_keeps_cell():
    ps = ParamSet(np.float64)
    cell = LSTM(ps, "l", 3, 4)
    for p in ps:
        p.data[...] = 0
    cell.b.data[4:8] = 60.0   # forget gate open
    cell.b.data[0:4] = -60.0  # input gate closed
    c0 = np.array([[0.3, -1.2, 2.0, 0.5]])
    _, c = lstm_step((Tensor(np.zeros((1, 4))), Tensor(c0)), Tensor(np.ones((1, 3))), cell)
    np.testing.assert_allclose(c.data, c0, atol=1e-12)


def test_lstm_shape_mismatch():
    ps = ParamSet(np.float64)
    cell = LSTM(ps, "l", 3, 4)
    with pytest.raises(ShapeMismatch):
        lstm_step(cell.zeros(1, np.float64), Tensor(np.ones((1, 5))), cell)


def test_lstm_gradcheck():
    ps = ParamSet(np.float64, seed=3)
    ps.rng = np.random.default_rng(3)
    cell = LSTM(ps, "l", 3, 4)
    for p in ps:
        p.data[...] = np.random.default_rng(7).normal(0, 0.5, p.shape)
    x = f64(2, 3, 3, seed=2)
    h0, c0 = f64(2, 4, seed=4), f64(2, 4, seed=5)

    def loss():
        hs, (h, c) = cell.run(x, state=(h0, c0))
        return (T.tanh(T.stack(hs, 1)) * T.stack(hs, 1)).sum() + (c * c).sum()

    assert grad_check(loss, list(ps) + [x, h0, c0]) < TOL


def test_lstm_step_mask_carries_state():
    ps = ParamSet(np.float64, seed=1)
    cell = LSTM(ps, "l", 2, 3)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 4, 2)))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
    _, (h, _) = cell.run(x, mask)
    _, (h_short, _) = cell.run(Tensor(x.data[1:2, :2]))
    np.testing.assert_allclose(h.data[1], h_short.data[0], atol=1e-12)


def test_lstm_masked_gradcheck():
    ps = ParamSet(np.float64, seed=2)
    cell = LSTM(ps, "l", 2, 3)
    for p in ps:
        p.data[...] = np.random.default_rng(9).normal(0, 0.5, p.shape)
    x = f64(2, 4, 2, seed=1)
    mask = np.array([[1, 1, 1, 1], [1, 0, 1, 0]], dtype=bool)

    def loss():
        hs, (h, c) = cell.run(x, mask, reverse=True)
        return (T.stack(hs, 1) * T.stack(hs, 1)).sum() + c.sum()

    assert grad_check(loss, list(ps) + [x]) < TOL


# ---------------------------------------------------------------- bilstm


def test_bilstm_shapes():
    ps = ParamSet(np.float64)
    enc = BiLSTM(ps, "b", 3, 4)
    seq = [Tensor(np.full(3, float(i))) for i in range(5)]
    states, h, c = bilstm_encode(seq, enc)
    assert states.shape == (1, 5, 4) and h.shape == (1, 4) and c.shape == (1, 4)


def test_bilstm_empty():
    enc = BiLSTM(ParamSet(np.float64), "b", 3, 4)
    with pytest.raises(EmptySequence):
        bilstm_encode([], enc)


def test_bilstm_odd_size_rejected():
    with pytest.raises(ValueError):
        BiLSTM(ParamSet(np.float64), "b", 3, 5)


def test_bilstm_reversal_swaps_halves():
    ps = ParamSet(np.float64, seed=4)
    enc = BiLSTM(ps, "b", 3, 6)
    enc.bwd.W_x.data[...] = enc.fwd.W_x.data
    enc.bwd.W_h.data[...] = enc.fwd.W_h.data
    x = np.random.default_rng(0).normal(size=(1, 5, 3))
    s, _, _ = enc(Tensor(x))
    r, _, _ = enc(Tensor(x[:, ::-1].copy()))
    np.testing.assert_allclose(s.data[0, :, :3], r.data[0, ::-1, 3:], atol=1e-12)
    np.testing.assert_allclose(s.data[0, :, 3:], r.data[0, ::-1, :3], atol=1e-12)


def test_bilstm_summary_matches_ends():
    ps = ParamSet(np.float64, seed=4)
    enc = BiLSTM(ps, "b", 3, 6)
    s, h, _ = enc(Tensor(np.random.default_rng(0).normal(size=(1, 5, 3))))
    np.testing.assert_allclose(h.data[0], np.concatenate([s.data[0, -1, :3], s.data[0, 0, 3:]]))


def test_bilstm_gradcheck():
    ps = ParamSet(np.float64, seed=5)
    enc = BiLSTM(ps, "b", 2, 4)
    for p in ps:
        p.data[...] = np.random.default_rng(1).normal(0, 0.4, p.shape)
    x = f64(2, 3, 2, seed=3)
    mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=bool)

    def loss():
        s, h, c = enc(x, mask)
        return (s * s).sum() + (h * c).sum()

    assert grad_check(loss, list(ps) + [x]) < TOL


# ---------------------------------------------------------------- attention


def test_attention_single_key():
    key = np.array([[[0.5, -1.0, 2.0]]])
    w, ctx = attention(Tensor(np.ones((1, 1, 3))), Tensor(key))
    np.testing.assert_allclose(w.data, [[[1.0]]])
    np.testing.assert_allclose(ctx.data[0, 0], key[0, 0])


def test_attention_identical_keys_uniform():
    keys = np.tile(np.array([0.3, 0.1]), (1, 4, 1))
    w, _ = attention(Tensor(np.array([[[1.0, 2.0]]])), Tensor(keys))
    np.testing.assert_allclose(w.data, 0.25)


def test_attention_ln2():
    # dot products ln 2 and 0
    q = np.array([[[math.log(2.0), 0.0]]])
    keys = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    w, _ = attention(Tensor(q), Tensor(keys))
    np.testing.assert_allclose(w.data[0, 0], [2 / 3, 1 / 3], atol=1e-12)


def test_attention_mask_and_mismatch():
    keys = np.random.default_rng(0).normal(size=(1, 3, 2))
    w, _ = attention(Tensor(np.ones((1, 1, 2))), Tensor(keys), np.array([[1, 1, 0]], dtype=bool))
    assert w.data[0, 0, 2] == 0 and abs(w.data.sum() - 1) < 1e-12
    with pytest.raises(ShapeMismatch):
        attention(Tensor(np.ones((1, 1, 3))), Tensor(keys))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.floats(-50, 50), st.integers(0, 2**31))
def test_attention_normalized_and_shift_invariant(L, n, shift, seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(0, 3, (1, 1, n))
    keys = rng.normal(0, 3, (1, L, n))
    w, _ = attention(Tensor(q), Tensor(keys))
    assert np.all(w.data >= 0) and abs(w.data.sum() - 1) < 1e-6
    # adding a constant to every dot product: append a coordinate with q=1, k=shift
    q2 = np.concatenate([q, np.ones((1, 1, 1))], -1)
    k2 = np.concatenate([keys, np.full((1, L, 1), shift)], -1)
    w2, _ = attention(Tensor(q2), Tensor(k2))
    np.testing.assert_allclose(w.data, w2.data, atol=1e-9)


def test_attention_many_calls_sum_to_one():
    rng = np.random.default_rng(0)
    q = rng.normal(0, 2, (10_000, 1, 4))
    keys = rng.normal(0, 2, (10_000, 7, 4))
    w, _ = attention(Tensor(q), Tensor(keys))
    assert np.all(np.abs(w.data.sum(-1) - 1) < 1e-6) and np.all(w.data >= 0)


def test_attention_gradcheck():
    q, k = f64(2, 3, 4, seed=1), f64(2, 5, 4, seed=2)
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=bool)

    def loss():
        w, ctx = attention(q, k, mask)
        return (ctx * ctx).sum() + (w * w).sum()

    assert grad_check(loss, [q, k]) < TOL


# ---------------------------------------------------------------- attended output


def test_attended_output_zero_weights():
    out = attended_output(f64(1, 3), f64(1, 3, seed=1), Tensor(np.zeros((3, 3))), Tensor(np.zeros((3, 3))))
    assert np.all(out.data == 0)


def test_attended_output_bounded_and_gradcheck():
    d, ctx = f64(4, 3, seed=1, scale=3), f64(4, 3, seed=2, scale=3)
    W1, W2 = f64(3, 5, seed=3), f64(3, 5, seed=4)
    out = attended_output(d, ctx, W1, W2)
    assert np.all(np.abs(out.data) < 1)
    assert grad_check(lambda: attended_output(d, ctx, W1, W2).sum(), [d, ctx, W1, W2]) < TOL
    with pytest.raises(ShapeMismatch):
        attended_output(d, ctx, f64(4, 5), W2)


# ---------------------------------------------------------------- losses


def direct_smoothed_nll(z, target, eps):
    z = np.asarray(z, dtype=np.float64)
    K = len(z)
    logZ = math.log(sum(math.exp(v) for v in z))
    total = 0.0
    for k in range(K):
        qk = 1 - eps if k == target else eps / (K - 1)
        total -= qk * (z[k] - logZ)
    return total


def test_smoothed_nll_direct_oracle():
    z = np.array([1.5, -0.3, 0.7])
    got = softmax_nll_smoothed(Tensor(z), 1, 0.1, K=3)
    assert abs(float(got.data) - direct_smoothed_nll(z, 1, 0.1)) < 1e-12


@pytest.mark.parametrize("eps", [0.0, 0.1, 0.5])
@pytest.mark.parametrize("K", [2, 5, 11])
def test_smoothed_nll_uniform_prediction_is_lnK(eps, K):
    for target in range(K):
        loss = softmax_nll_smoothed(Tensor(np.full(K, 0.7)), target, eps, K)
        assert abs(float(loss.data) - math.log(K)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8), st.data())
def test_smoothed_nll_eps0_is_nll(z, data):
    z = np.array(z)
    t = data.draw(st.integers(0, len(z) - 1))
    loss = float(softmax_nll_smoothed(Tensor(z), t, 0.0).data)
    m = z.max()
    nll = -(z[t] - m - math.log(np.exp(z - m).sum()))
    assert abs(loss - nll) < 1e-9


def test_smoothed_nll_errors():
    with pytest.raises(TargetOutOfRange):
        softmax_nll_smoothed(Tensor(np.zeros(3)), 3, 0.1)
    with pytest.raises(TargetOutOfRange):
        softmax_nll_smoothed(Tensor(np.zeros(3)), -1, 0.1)
    with pytest.raises(ShapeMismatch):
        softmax_nll_smoothed(Tensor(np.zeros(3)), 0, 0.1, K=4)
    with pytest.raises(ValueError):
        softmax_nll_smoothed(Tensor(np.zeros(3)), 0, 1.0)


def test_cross_entropy_masked_gradcheck():
    z = f64(4, 6, seed=3)
    mask = np.ones((4, 6), dtype=bool)
    mask[1, 3:] = False
    mask[2, ::2] = False
    tgt = np.array([0, 1, 3, 5])

    def loss():
        return T.cross_entropy(z, tgt, 0.1, mask).sum()

    assert grad_check(loss, [z]) < TOL
    # masked classes receive no target mass: the loss ignores their logits
    before = float(loss().data)
    z.data[1, 4] += 10
    assert abs(float(loss().data) - before) < 1e-12


# ---------------------------------------------------------------- elementwise ops


def test_elementwise_ops_gradcheck():
    a, b = f64(3, 4, seed=1), f64(4, seed=2)
    w = Tensor(np.abs(np.random.default_rng(3).normal(size=(3, 4))) + 0.5, requires_grad=True)

    def loss():
        y = T.sigmoid(a * b) + T.tanh(a - b) + T.exp(0.1 * a) + T.log(w)
        y = T.concat([y, T.reshape(T.swapaxes(a, 0, 1), (3, 4))], -1)
        picked = T.index(y, (np.array([0, 2, 2]), np.array([1, 5, 5])))
        sm = T.softmax(y[1:], np.ones((2, 8), dtype=bool))
        return (y * y).sum() + picked.sum() + (sm * T.stack([b, b], 0).sum()).sum() + T.sum_(y, 0).sum()

    assert grad_check(loss, [a, b, w]) < TOL


def test_embedding_repeated_ids_accumulate():
    W = f64(5, 3)
    with Tape() as tape:
        e = T.embedding(W, [1, 1, 4])
        tape.backward(e.sum())
    np.testing.assert_allclose(W.grad[1], 2.0)
    np.testing.assert_allclose(W.grad[0], 0.0)


def test_backward_rejects_nonfinite():
    x = Tensor(np.array([0.0]), requires_grad=True)
    with pytest.raises(NonFinite):
        with Tape() as tape:
            tape.backward(T.log(x).sum())


def test_unused_parameter_gradient_zero():
    ps = ParamSet(np.float64)
    a = ps.add("a", (2,))
    ps.add("unused", (3,))
    with Tape() as tape:
        tape.backward((a * a).sum())
    assert np.all(ps.grads()["unused"] == 0)


def test_scorer_broadcast_gradcheck():
    ps = ParamSet(np.float64, seed=8)
    sc = Scorer(ps, "s", [3, 2], 4)
    q, cols = f64(1, 3, seed=1), f64(5, 2, seed=2)
    assert sc(q, cols).shape == (5,)
    assert grad_check(lambda: (sc(q, cols) * sc(q, cols)).sum(), list(ps) + [q, cols]) < TOL


# ---------------------------------------------------------------- dropout


def test_dropout_identity_cases():
    x = Tensor(np.ones(10))
    assert T.dropout(x, 0.0, True, np.random.default_rng(0)) is x
    assert T.dropout(x, 0.5, False, None) is x
    with pytest.raises(ValueError):
        T.dropout(x, 1.0, True, np.random.default_rng(0))


@pytest.mark.parametrize("rate", [0.3, 0.5])
def test_dropout_expectation(rate):
    x = Tensor(np.full(100_000, 2.0))
    y = T.dropout(x, rate, True, np.random.default_rng(1))
    assert abs(y.data.mean() - 2.0) / 2.0 < 0.01
    assert set(np.unique(y.data)) <= {0.0, 2.0 / (1 - rate)}


def test_dropout_seeded_determinism():
    x = Tensor(np.ones(50))
    a = T.dropout(x, 0.5, True, np.random.default_rng(3)).data
    b = T.dropout(x, 0.5, True, np.random.default_rng(3)).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- rmsprop


def test_rmsprop_hand_value():
    p, acc = rmsprop_step(np.zeros(1), np.ones(1), np.zeros(1), lr=0.1, rho=0.9, eps=1e-12)
    assert abs(p[0] - (-0.316228)) < 1e-6
    assert abs(acc[0] - 0.1) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=5), st.floats(0, 3))
def test_rmsprop_zero_grad_identity(vals, a):
    p = np.array(vals)
    new, _ = rmsprop_step(p, np.zeros_like(p), np.full_like(p, a), lr=0.1)
    assert np.array_equal(new, p)


def test_rmsprop_update_converges_to_lr():
    p, acc = np.zeros(1), np.zeros(1)
    lr = 0.01
    for _ in range(500):
        new, acc = rmsprop_step(p, np.full(1, 3.0), acc, lr)
        step = abs(new[0] - p[0])
        p = new
    assert abs(step - lr) / lr < 1e-6


def test_rmsprop_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        rmsprop_step(np.zeros(2), np.zeros(3), np.zeros(2), 0.1)


def test_global_norm_clip():
    grads = {"a": np.array([3.0, 4.0]), "b": np.array([12.0])}
    clipped, norm = clip_by_global_norm(grads, 6.5)
    assert norm == 13.0
    total = math.sqrt(sum(float((g ** 2).sum()) for g in clipped.values()))
    assert abs(total - 6.5) < 1e-12


def test_optimizer_reduces_quadratic():
    ps = ParamSet(np.float64, seed=0)
    w = ps.add("w", (4,))
    opt = RMSProp(ps, lr=0.05)
    target = np.array([0.5, -0.2, 0.1, 0.3])
    for _ in range(300):
        with Tape() as tape:
            d = w - Tensor(target)
            tape.backward((d * d).sum())
        opt.step()
    assert np.abs(w.data - target).max() < 0.05


# ---------------------------------------------------------------- grad_check itself


def test_gradcheck_linear_machine_precision():
    w = f64(5, seed=1)
    c = np.random.default_rng(2).normal(size=5)
    assert grad_check(lambda: (w * Tensor(c)).sum(), [w]) < 1e-8


def test_gradcheck_detects_corrupted_gradient():
    x = f64(4, seed=1)

    def bad_square(a):
        y = a.data ** 2

        def back(g):
            T._accum(a, g * 2.5 * a.data)  # should be 2

        return T._node(y, (a,), back)

    assert grad_check(lambda: bad_square(x).sum(), [x]) > 1e-2


def test_gradcheck_nonfinite():
    x = Tensor(np.array([1e-6]), requires_grad=True)
    with pytest.raises(NonFinite):
        grad_check(lambda: T.log(x).sum(), [x], h=1e-5)


# ---------------------------------------------------------------- checkpoints


def _params(seed=0):
    ps = ParamSet(np.float32, seed=seed)
    ps.add("emb", (7, 3))
    ps.add("lstm.W_h", (3, 12))
    ps.add("bias", (12,), init="zeros")
    return ps


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    ps = _params(1)
    opt = RMSProp(ps, 0.01)
    for p in ps:
        p.grad = np.ones_like(p.data)
    opt.step()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, ps, opt.state(), config={"n": 3}, extra={"vocab": ["a"]})
    fresh = _params(99)
    header, accs = load_checkpoint(path, fresh)
    for n, p in ps.items():
        assert p.data.tobytes() == fresh[n].data.tobytes()
        assert opt.acc[n].tobytes() == accs[n].tobytes()
    assert header["config"] == {"n": 3} and header["extra"] == {"vocab": ["a"]}
    assert header["optimizer"]["steps"] == 1


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, _params())
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(CorruptCheckpoint):
        read_checkpoint(path)
    path.write_bytes(b"garbage")
    with pytest.raises(CorruptCheckpoint):
        read_checkpoint(path)


def test_checkpoint_shape_mismatch_names_tensor(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, _params())
    other = ParamSet(np.float32)
    other.add("emb", (7, 4))
    other.add("lstm.W_h", (3, 12))
    other.add("bias", (12,))
    with pytest.raises(CorruptCheckpoint, match="emb"):
        load_checkpoint(path, other)


def test_checkpoint_atomic_leaves_no_temp(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, _params())
    save_checkpoint(path, _params(2))
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]
