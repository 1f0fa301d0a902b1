import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from etd_lab import tensor as tc
from etd_lab.tensor import DimensionError, Tensor

from conftest import grad_check, numeric_grad, rel_err

RNG = np.random.default_rng(0)


def rand(*shape):
    return Tensor(RNG.normal(size=shape))


def test_matmul_gradient_matches_finite_differences():
    a, b = rand(3, 4), rand(4, 5)
    assert grad_check(lambda: tc.sum_all(tc.matmul(a, b)), [a]) < 1e-6
    assert grad_check(lambda: tc.sum_all(tc.matmul(a, b)), [b]) < 1e-6


def test_batched_and_flattened_matmul_gradients():
    a, w = rand(2, 3, 4), rand(4, 5)
    c = rand(2, 3, 5)
    assert grad_check(lambda: tc.sum_all(tc.mul(tc.matmul(a, w), c)), [a, w]) < 1e-6
    x, y, c2 = rand(2, 3, 4), rand(2, 4, 3), rand(2, 3, 3)
    assert grad_check(lambda: tc.sum_all(tc.mul(tc.matmul(x, y), c2)), [x, y]) < 1e-6


def test_matmul_identity_and_shape_error():
    a = rand(3, 3)
    np.testing.assert_array_equal(tc.matmul(a, Tensor(np.eye(3))).data, a.data)
    with pytest.raises(DimensionError):
        tc.matmul(rand(3, 4), rand(5, 2))


@pytest.mark.parametrize("op", ["silu", "gelu", "sigmoid"])
def test_elementwise_activation_gradients(op):
    x = rand(4, 5)
    c = rand(4, 5)
    assert grad_check(lambda: tc.sum_all(tc.mul(tc.scalar_map(x, op), c)), [x]) < 1e-6


def test_silu_known_values():
    np.testing.assert_allclose(tc.silu(Tensor([0.0, 1.0])).data, [0.0, 1.0 / (1.0 + np.exp(-1.0))])


def test_add_mul_broadcast_gradients():
    a, b = rand(3, 4), rand(4)
    assert grad_check(lambda: tc.sum_all(tc.mul(tc.add(a, b), a)), [a, b]) < 1e-6
    with pytest.raises(DimensionError):
        tc.add(rand(3, 4), rand(3))


def test_neg_scale_sub_gradients():
    a, b = rand(2, 3), rand(2, 3)
    assert grad_check(lambda: tc.sum_all(tc.mul(a - b, tc.scale(-a, 0.5))), [a, b]) < 1e-6


def test_scale_rows_gradient():
    x, s = rand(2, 3, 4), rand(2, 3)
    c = rand(2, 3, 4)
    assert grad_check(lambda: tc.sum_all(tc.mul(tc.scale_rows(x, s), c)), [x, s]) < 1e-6


def test_where_rows_routes_gradient():
    new, old = rand(2, 3, 4), rand(2, 3, 4)
    keep = np.array([[True, False, True], [False, False, True]])
    c = rand(2, 3, 4)
    assert grad_check(lambda: tc.sum_all(tc.mul(tc.where_rows(keep, new, old), c)), [new, old]) < 1e-6


def test_softmax_rows_and_causal_gradient():
    x = rand(2, 4, 4)
    c = rand(2, 4, 4)
    s = tc.softmax_rows(x, causal=True).data
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)
    assert np.all(np.triu(s[0], 1) == 0)
    assert grad_check(lambda: tc.sum_all(tc.mul(tc.softmax_rows(x, causal=True), c)), [x]) < 1e-6
    assert grad_check(lambda: tc.sum_all(tc.mul(tc.softmax_rows(x), c)), [x]) < 1e-6


def test_softmax_is_shift_invariant():
    x = rand(3, 5)
    np.testing.assert_allclose(tc.softmax_rows(x).data, tc.softmax_rows(tc.add(x, Tensor(100.0))).data, atol=1e-12)


def test_rms_norm_gradient_and_scale_invariance():
    x, g = rand(2, 3, 6), rand(6)
    c = rand(2, 3, 6)
    assert grad_check(lambda: tc.sum_all(tc.mul(tc.rms_norm(x, g, 1e-6), c)), [x, g]) < 1e-6
    y = tc.rms_norm(x, g, 1e-12).data
    np.testing.assert_allclose(tc.rms_norm(tc.scale(x, 7.0), g, 1e-12).data, y, atol=1e-10)


def test_embedding_gradient_accumulates_repeats():
    table = rand(5, 3)
    ids = np.array([[1, 1, 4], [0, 1, 2]])
    c = rand(2, 3, 3)
    assert grad_check(lambda: tc.sum_all(tc.mul(tc.embedding(table, ids), c)), [table]) < 1e-6
    with pytest.raises(ValueError):
        tc.embedding(table, np.array([5]))


def test_rope_gradient_and_norm_preservation():
    from etd_lab.model import rope_tables

    cos, sin = rope_tables(4, 6, 10000.0)
    x = rand(2, 4, 6)
    c = rand(2, 4, 6)
    assert grad_check(lambda: tc.sum_all(tc.mul(tc.rope(x, cos, sin), c)), [x]) < 1e-6
    np.testing.assert_allclose(np.linalg.norm(tc.rope(x, cos, sin).data, axis=-1), np.linalg.norm(x.data, axis=-1))


def test_reshape_transpose_gradients():
    x = rand(2, 3, 4)
    c = rand(4, 3, 2)
    assert grad_check(lambda: tc.sum_all(tc.mul(tc.transpose(x), c)), [x]) < 1e-6
    assert grad_check(lambda: tc.sum_all(tc.mul(tc.reshape(x, (6, 4)), tc.reshape(c, (6, 4)))), [x]) < 1e-6
    assert grad_check(lambda: tc.mean_all(tc.mul(tc.swap_last(x), tc.swap_last(x))), [x]) < 1e-6


def test_cross_entropy_gradient_and_uniform_value():
    logits = rand(2, 3, 7)
    targets = np.array([[0, 6, 3], [2, 2, 1]])
    mask = np.array([[True, False, True], [True, True, False]])
    assert grad_check(lambda: tc.cross_entropy(logits, targets, mask), [logits]) < 1e-6
    u = tc.cross_entropy(Tensor(np.zeros((2, 3, 7))), targets)
    assert abs(u.item() - np.log(7)) < 1e-12


def test_cross_entropy_errors():
    with pytest.raises(ValueError):
        tc.cross_entropy(rand(2, 4), np.array([0, 4]))
    with pytest.raises(ValueError):
        tc.cross_entropy(rand(2, 4), np.array([0, 1]), np.zeros(2, dtype=bool))
    with pytest.raises(tc.NonFiniteError):
        tc.cross_entropy(Tensor(np.array([[np.nan, 0.0]]), _trusted=True), np.array([0]))


def test_shared_tensor_gradients_accumulate():
    a = rand(3)
    assert grad_check(lambda: tc.sum_all(tc.add(tc.mul(a, a), a)), [a]) < 1e-6


def test_tape_double_backward_raises():
    a = Tensor(RNG.normal(size=3), requires_grad=True)
    with tc.Tape() as tape:
        loss = tc.sum_all(tc.mul(a, a))
        tape.backward(loss)
        with pytest.raises(RuntimeError):
            tape.backward(loss)


def test_backward_requires_scalar_on_this_tape():
    a = Tensor(RNG.normal(size=3), requires_grad=True)
    with tc.Tape() as tape:
        y = tc.mul(a, a)
        loss = tc.sum_all(y)
        with pytest.raises(ValueError):
            tape.backward(y)
    with tc.Tape() as other:
        with pytest.raises(ValueError):
            other.backward(loss)


def test_unused_leaf_gets_zero_grad_and_no_recording_without_tape():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    with tc.Tape() as tape:
        _ = tc.mul(b, b)
        loss = tc.sum_all(a)
        tape.backward(loss)
    np.testing.assert_array_equal(a.grad, [1.0, 1.0])
    np.testing.assert_array_equal(b.grad, [0.0, 0.0])
    out = tc.mul(a, a)
    assert out._node is None and not out.requires_grad


def test_construction_rejects_non_finite():
    with pytest.raises(tc.NonFiniteError):
        Tensor([1.0, np.inf])


def test_op_finite_checks_flag():
    tc.set_op_finite_checks(True)
    try:
        with pytest.raises(tc.NonFiniteError), np.errstate(over="ignore"):
            tc.scale(Tensor([1e308]), 10.0)
    finally:
        tc.set_op_finite_checks(False)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_matmul_gradient_property(n, k, m, seed):
    r = np.random.default_rng(seed)
    a, b = Tensor(r.normal(size=(n, k))), Tensor(r.normal(size=(k, m)))
    c = r.normal(size=(n, m))
    a.requires_grad = True
    with tc.Tape() as tape:
        tape.backward(tc.sum_all(tc.mul(tc.matmul(a, b), Tensor(c))))
    np.testing.assert_allclose(a.grad, c @ b.data.T, atol=1e-12)
    num = numeric_grad(lambda: float((a.data @ b.data * c).sum()), a.data)
    assert rel_err(a.grad, num) < 1e-6
