import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from geocausal import tensor as T
from _oracles import op_gradcheck

rng = np.random.default_rng(12)


def t(x, grad=False):
    return T.Tensor(np.asarray(x, np.float32), requires_grad=grad)


# --- matmul -----------------------------------------------------------------

def test_matmul_identity():
    out = T.matmul(t(np.eye(2)), t([[1, 2], [3, 4]]))
    np.testing.assert_array_equal(out.values, [[1, 2], [3, 4]])


def test_matmul_row_by_column():
    assert T.matmul(t([[1, 2]]), t([[3], [4]])).values.tolist() == [[11.0]]


def test_matmul_sum_gradient_matches_hand_value():
    A, B = t(np.ones((2, 2)), True), t([[2, 0], [0, 2]])
    T.backward(T.tsum(T.matmul(A, B)))
    np.testing.assert_allclose(A.grad, [[2, 2], [2, 2]], rtol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))


def test_batched_matmul_gradients():
    assert op_gradcheck(T.matmul, [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))]) < 1e-2


# --- softmax ----------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(t([0.0, 0.0])).values, [0.5, 0.5])
    big = T.softmax(t([1000.0, 0.0])).values
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [1.0, 0.0], atol=1e-6)
    np.testing.assert_allclose(T.softmax(t(np.log([1.0, 2.0, 3.0]))).values, [1 / 6, 2 / 6, 3 / 6], atol=1e-6)


@given(arrays(np.float32, (3, 5), elements=st.floats(-1e4, 1e4, width=32)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(t(x), axis=-1).values
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


# --- layer norm ---------------------------------------------------------------

def test_layer_norm_examples():
    np.testing.assert_allclose(T.layer_norm(t([[5, 5, 5, 5]])).values, [[0, 0, 0, 0]], atol=1e-6)
    np.testing.assert_allclose(T.layer_norm(t([[1, 3]])).values, [[-1, 1]], atol=1e-4)
    out = T.layer_norm(t([[1, 3]]), t([2, 2]), t([1, 1])).values
    np.testing.assert_allclose(out, [[-1, 3]], atol=1e-4)


def test_layer_norm_rejects_single_feature_axis():
    with pytest.raises(T.ShapeError):
        T.layer_norm(t([[1.0], [2.0]]))


@given(arrays(np.float64, (4, 6), elements=st.floats(-100, 100)))
def test_layer_norm_moments(x):
    x = x + np.linspace(0, 1, 6)  # avoid exactly constant rows
    z = T.layer_norm(t(x)).values.astype(np.float64)
    np.testing.assert_allclose(z.mean(axis=-1), 0, atol=1e-5)
    var = x.var(axis=-1)
    expected = var / (var + 1e-5)
    np.testing.assert_allclose(z.var(axis=-1), expected, atol=1e-4)


# --- elementwise / composite gradients ------------------------------------------

@pytest.mark.parametrize("name,fn,shapes", [
    ("add", T.add, [(3, 4), (4,)]),
    ("sub", T.sub, [(3, 4), (3, 1)]),
    ("mul", T.mul, [(3, 4), (3, 4)]),
    ("exp", T.exp, [(3, 4)]),
    ("sigmoid", T.sigmoid, [(3, 4)]),
    ("gelu", T.gelu, [(3, 4)]),
    ("softmax", lambda x: T.softmax(x, axis=-1), [(3, 5)]),
    ("layer_norm", lambda x, g, b: T.layer_norm(x, g, b), [(3, 6), (6,), (6,)]),
    ("mean", lambda x: T.mean(x, axis=0), [(4, 3)]),
    ("transpose", lambda x: T.transpose(x, (1, 0, 2)), [(2, 3, 4)]),
    ("reshape", lambda x: T.reshape(x, (6, 2)), [(3, 4)]),
    ("concat", lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    ("take", lambda x: T.take(x, (slice(None), 0)), [(3, 4)]),
    ("broadcast", lambda x: T.broadcast_to(x, (3, 2, 4)), [(2, 1)]),
])
def test_op_gradients_match_central_differences(name, fn, shapes):
    inputs = [rng.normal(size=s) for s in shapes]
    assert op_gradcheck(fn, inputs) < 1e-2, name


def test_div_and_log_gradients():
    pos = rng.uniform(0.5, 2.0, size=(3, 3))
    assert op_gradcheck(T.div, [rng.normal(size=(3, 3)), pos]) < 1e-2
    assert op_gradcheck(T.log, [pos]) < 1e-2


def test_relu_gradient_away_from_kink():
    x = rng.normal(size=(4, 4))
    x[np.abs(x) < 0.05] = 0.5
    assert op_gradcheck(T.relu, [x]) < 1e-2


def test_attention_composite_gradient():
    def attn(q, k, v):
        s = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1 / math.sqrt(4))
        return T.matmul(T.softmax(s, axis=-1), v)
    inputs = [rng.normal(size=(2, 3, 4)) for _ in range(3)]
    assert op_gradcheck(attn, inputs) < 1e-2


def test_gelu_matches_tanh_formula():
    x = np.linspace(-3, 3, 13)
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(T.gelu(t(x)).values, ref, atol=1e-6)


def test_bce_gradient():
    z = rng.normal(size=6)
    y = np.array([1, 0, 1, 1, 0, 0])
    assert op_gradcheck(lambda a: T.binary_cross_entropy_with_logits(a, y), [z]) < 1e-2


# --- backward -----------------------------------------------------------------

def test_backward_sum_gives_ones():
    w = t(rng.normal(size=(3, 2)), True)
    T.backward(T.tsum(w))
    np.testing.assert_array_equal(w.grad, np.ones((3, 2)))


def test_backward_quadratic():
    w = t([1, -2, 3], True)
    T.backward(T.tsum(w * w))
    np.testing.assert_allclose(w.grad, [2, -4, 6])


def test_backward_rejects_non_scalar_and_constant_loss():
    w = t([1, 2], True)
    with pytest.raises(T.ContractError):
        T.backward(w * w)
    with pytest.raises(T.ContractError):
        T.backward(T.tsum(t([1.0, 2.0])))


def test_two_layer_perceptron_gradient():
    x = rng.normal(size=(8, 4))

    def mlp(w1, b1, w2):
        return T.sigmoid(T.matmul(T.gelu(T.matmul(T.Tensor(x), w1) + b1), w2))
    inputs = [rng.normal(size=(4, 5)), rng.normal(size=(5,)), rng.normal(size=(5, 1))]
    assert op_gradcheck(mlp, inputs) < 1e-2


def test_shared_subexpression_accumulates():
    w = t([2.0], True)
    y = w * w
    T.backward(T.tsum(y + y))  # d/dw 2w^2 = 4w
    np.testing.assert_allclose(w.grad, [8.0])


def test_tape_topological_order_and_single_visit():
    a, b = t(rng.normal(size=(2, 2)), True), t(rng.normal(size=(2, 2)), True)
    h = T.matmul(a, b)
    loss = T.tsum(T.gelu(h) + h * a)
    tape = T.backward(loss)
    pos = {id(x): i for i, x in enumerate(tape.tensors)}
    assert len(pos) == len(tape.tensors)
    for x in tape.tensors:
        if x.node is not None:
            for parent in x.node.inputs:
                if parent.requires_grad:
                    assert pos[id(parent)] < pos[id(x)]


def test_forward_is_finite_and_replay_is_bit_identical():
    x = rng.normal(size=(5, 6)).astype(np.float32)

    def run():
        d = T.dropout(T.gelu(t(x, True)), 0.3, np.random.default_rng(4))
        loss = T.tsum(T.layer_norm(d))
        return loss.values.tobytes()
    assert run() == run()
    assert np.all(np.isfinite(T.gelu(t(x)).values))


def test_dropout_identity_in_eval_and_scaled_in_train():
    x = t(np.ones((200, 50)))
    assert T.dropout(x, 0.5, None) is x
    out = T.dropout(x, 0.5, np.random.default_rng(0)).values
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.05


def test_drop_path_drops_whole_samples():
    out = T.drop_path(t(np.ones((100, 3, 4))), 0.5, np.random.default_rng(1)).values
    per_sample = out.reshape(100, -1)
    assert np.all((per_sample == 0).all(axis=1) | (per_sample == 2).all(axis=1))


# --- SGD ----------------------------------------------------------------------

def test_sgd_plain_step():
    p = np.array([1.0], np.float32)
    T.sgd_step([p], [np.array([2.0], np.float32)], 0.1, 0.0)
    np.testing.assert_allclose(p, [0.8])


def test_sgd_momentum_recurrence():
    lr = 0.1
    p = np.array([0.0])
    v = T.sgd_step([p], [np.array([1.0])], lr, 0.9)
    np.testing.assert_allclose(v[0], [1.0])
    np.testing.assert_allclose(p, [-lr])
    T.sgd_step([p], [np.array([1.0])], lr, 0.9, v)
    np.testing.assert_allclose(v[0], [1.9])
    np.testing.assert_allclose(p, [-2.9 * lr])


def test_sgd_zero_gradient_leaves_params():
    p = np.array([0.3, -1.2])
    T.sgd_step([p], [np.zeros(2)], 0.5, 0.9)
    np.testing.assert_array_equal(p, [0.3, -1.2])


def test_sgd_nonfinite_gradient_reports_step_and_name():
    params = {"w": t([1.0, 2.0], True)}
    opt = T.SGD(params, 0.1)
    params["w"].grad = np.array([np.nan, 0.0], np.float32)
    with pytest.raises(T.NonFiniteGradientError) as err:
        opt.step()
    assert err.value.step == 0 and err.value.name == "w"
    np.testing.assert_array_equal(params["w"].values, [1.0, 2.0])


def test_sgd_weight_decay():
    p = np.array([2.0])
    T.sgd_step([p], [np.array([0.0])], 0.1, 0.0, weight_decay=0.5)
    np.testing.assert_allclose(p, [2.0 - 0.1 * 1.0])


# --- checkpoint -----------------------------------------------------------------

def test_checkpoint_layout_and_roundtrip(tmp_path):
    params = {"w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5], np.float32)}
    path = tmp_path / "m.gctn"
    T.save_checkpoint(path, params)
    raw = path.read_bytes()
    expected = b"GCTN" + struct.pack("<II", 1, 2)
    expected += struct.pack("<I", 1) + b"w" + struct.pack("<I", 2) + struct.pack("<2Q", 2, 3)
    expected += np.arange(6, dtype="<f4").tobytes()
    expected += struct.pack("<I", 1) + b"b" + struct.pack("<I", 1) + struct.pack("<Q", 1)
    expected += np.array([1.5], "<f4").tobytes()
    assert raw == expected
    back = T.load_checkpoint(path)
    assert list(back) == ["w", "b"]
    np.testing.assert_array_equal(back["w"], params["w"])


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.gctn"
    p.write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(ValueError):
        T.load_checkpoint(p)
