import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mango.core import tensor as T
from mango.core.tensor import Parameter, Tape, Tensor
from mango.errors import ContractError, DimensionError


def numeric_grad(fn, values, index, step=1e-6):
    """Central difference of scalar fn(*values) w.r.t. values[index]."""
    base = np.array(values[index], dtype=np.float64)
    grad = np.zeros_like(base)
    for idx in np.ndindex(*base.shape):
        out = []
        for delta in (step, -step):
            shifted = base.copy()
            shifted[idx] += delta
            args = list(values)
            args[index] = shifted
            out.append(fn(*[Tensor(a) for a in args]).item())
        grad[idx] = (out[0] - out[1]) / (2 * step)
    return grad


def check_gradients(fn, *values, tol=1e-6):
    leaves = [Parameter(v, f"x{i}") for i, v in enumerate(values)]
    with Tape() as tape:
        out = fn(*leaves)
    tape.backward(out)
    for i, leaf in enumerate(leaves):
        np.testing.assert_allclose(leaf.grad, numeric_grad(fn, values, i), rtol=tol, atol=tol)


def test_operations_outside_a_tape_do_not_record():
    p = Parameter(np.ones(3), "p")
    out = (p * 2.0).sum()
    assert not out.requires_grad


def test_backward_on_non_scalar_is_a_contract_error():
    p = Parameter(np.ones(3), "p")
    with Tape() as tape:
        out = p * 2.0
    with pytest.raises(ContractError):
        tape.backward(out)


def test_item_requires_single_element():
    assert Tensor([2.5]).item() == 2.5
    with pytest.raises(ContractError):
        Tensor([1.0, 2.0]).item()


def test_gradients_accumulate_across_backward_calls():
    p = Parameter(np.array([1.0, 2.0]), "p")
    for _ in range(2):
        with Tape() as tape:
            out = (p * p).sum()
        tape.backward(out)
    np.testing.assert_array_equal(p.grad, 2 * 2 * p.data)


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as info:
        T.matmul(np.ones((2, 3)), np.ones((4, 2)))
    assert info.value.shapes == ((2, 3), (4, 2))
    assert "(2, 3)" in str(info.value) and "(4, 2)" in str(info.value)


def test_elementwise_broadcast_mismatch():
    with pytest.raises(DimensionError):
        T.add(np.ones(3), np.ones(4))


@pytest.mark.parametrize("fn", [
    lambda a, b: (a * b + a / (b * b + 1.0)).sum(),
    lambda a, b: (T.exp(a) - T.tanh(b)).mean(),
    lambda a, b: (T.softplus(a) * T.log(b * b + 1.0)).sum(),
    lambda a, b: T.matmul(a, T.transpose(b)).sum(),
])
def test_elementwise_and_matmul_gradients(fn, rng):
    check_gradients(fn, rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))


def test_broadcast_gradient_sums_over_batch(rng):
    check_gradients(lambda x, w: T.matmul(x, w).sum(),
                    rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)))


def test_take_concat_and_split_gradients(rng):
    def fn(a):
        first, second = T.split(a, 1, axis=-2)
        gathered = T.take(a, [2, 0, 2], axis=-2)
        return (T.concat([second, first], axis=-2) * T.concat([gathered], axis=-2)).sum()

    check_gradients(fn, rng.normal(size=(3, 2)))


def test_solve_triangular_gradients(rng):
    upper = np.triu(rng.normal(size=(4, 4))) + 3.0 * np.eye(4)
    lower = np.tril(rng.normal(size=(4, 4)), -1)
    b = rng.normal(size=(4, 2))
    check_gradients(lambda a, y: (T.solve_triangular(a, y) * y).sum(),
                    upper, b)
    check_gradients(lambda a, y: (T.solve_triangular(a + np.eye(4), y, lower=True) * y).sum(),
                    lower, b)


def test_solve_triangular_matches_dense_solve(rng):
    a = np.triu(rng.normal(size=(5, 5))) + 4.0 * np.eye(5)
    b = rng.normal(size=(3, 5, 2))
    x = T.solve_triangular(a, b).data
    np.testing.assert_allclose(a @ x, b, atol=1e-12)


def test_masked_softmax_zeroes_disallowed_entries_exactly(rng):
    mask = np.triu(np.ones((4, 4), dtype=bool))
    p = T.masked_softmax(rng.normal(size=(2, 4, 4)) * 50.0, mask).data
    assert np.all(p[:, ~mask] == 0.0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-15)


def test_masked_softmax_large_logits_stay_exact():
    mask = np.triu(np.ones((3, 3), dtype=bool))
    p = T.masked_softmax(np.tile([1000.0, 1000.0, 999.0], (3, 1)), mask).data
    tail = np.exp(-1.0)
    expected = np.array([
        [1.0, 1.0, tail] / (2.0 + tail),
        [0.0, 1.0 / (1.0 + tail), tail / (1.0 + tail)],
        [0.0, 0.0, 1.0],
    ])
    assert np.isfinite(p).all()
    np.testing.assert_allclose(p, expected, rtol=1e-14, atol=0.0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-15)


def test_masked_softmax_rejects_empty_rows():
    mask = np.triu(np.ones((3, 3), dtype=bool))
    mask[1] = False
    with pytest.raises(ContractError):
        T.masked_softmax(np.zeros((3, 3)), mask)


def test_masked_softmax_gradient(rng):
    mask = np.triu(np.ones((3, 3), dtype=bool))
    weights = rng.normal(size=(3, 3))
    check_gradients(lambda a: (T.masked_softmax(a, mask) * weights).sum(), rng.normal(size=(3, 3)))


def test_layernorm_gradient(rng):
    check_gradients(lambda x, g, b: (T.layernorm(x, g, b) * np.arange(4.0)).sum(),
                    rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=4), tol=1e-5)


def test_logsumexp_gradient(rng):
    check_gradients(lambda a: T.logsumexp(a, axis=-1).sum(), rng.normal(size=(3, 5)))


def test_diagonal_and_reductions(rng):
    check_gradients(lambda a: T.log(T.diagonal(a * a + 1.0)).sum() + a.mean(), rng.normal(size=(3, 3)))


def test_inverse_softplus_round_trip():
    for y in (0.1, 1.0, 2.0, 7.5):
        assert T.softplus(T.inverse_softplus(y)).item() == pytest.approx(y, rel=1e-12)


@given(arrays(np.float64, (3, 5), elements=st.floats(-1e3, 1e3)))
def test_layernorm_rows_are_standardized(x):
    out = T.layernorm(x, np.ones(5), np.zeros(5)).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)


@given(arrays(np.float64, (4, 4), elements=st.floats(-30, 30)))
def test_masked_softmax_rows_are_distributions(logits):
    mask = np.triu(np.ones((4, 4), dtype=bool))
    p = T.masked_softmax(logits, mask).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(np.diagonal(p) > 0.0)
