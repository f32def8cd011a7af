import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vocalign.numerics import (
    ContractError,
    DegenerateInputError,
    ShapeError,
    Tensor,
    backward,
    concatenate,
    cosine_similarity,
    entropy_map,
    finite_difference_check,
    l2_normalize,
    log_softmax,
    no_grad,
    one_hot,
    parameter,
    pixelwise_cross_entropy,
    relative_error,
    softmax,
    stack,
    standardize,
)


def brute_softmax(row):
    """Textbook softmax with math.exp, no stabilisation; fine for small logits."""
    ex = [math.exp(v) for v in row]
    s = math.fsum(ex)
    return [e / s for e in ex]


# -- softmax -----------------------------------------------------------------

def test_softmax_symmetric_pair():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_hand_value_against_brute_force():
    out = softmax(Tensor([0.0, math.log(3.0)])).data
    np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-15)
    np.testing.assert_allclose(out, brute_softmax([0.0, math.log(3.0)]), atol=1e-15)


def test_softmax_bad_axis():
    with pytest.raises(ShapeError):
        softmax(Tensor(np.zeros((2, 3))), axis=2)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_on_simplex(x):
    out = softmax(Tensor(x), axis=-1).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_shift_invariance(x, c):
    np.testing.assert_allclose(softmax(Tensor(x)).data, softmax(Tensor(x + c)).data, atol=1e-12)


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-10, 10)))
def test_softmax_matches_brute_force(x):
    np.testing.assert_allclose(softmax(Tensor(x)).data, brute_softmax(list(x)), atol=1e-12)


def test_softmax_survives_huge_logits():
    out = softmax(Tensor([1000.0, 0.0, -1000.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0, 0.0])


def test_log_softmax_is_log_of_softmax(rng):
    x = rng.normal(size=(3, 5)) * 4
    np.testing.assert_allclose(log_softmax(Tensor(x)).data, np.log(softmax(Tensor(x)).data), atol=1e-12)


# -- cosine similarity ------------------------------------------------------

@pytest.mark.parametrize("a,b,expected", [
    ([1.0, 0.0], [1.0, 0.0], 1.0),
    ([1.0, 0.0], [0.0, 1.0], 0.0),
    ([1.0, 2.0], [2.0, 1.0], 0.8),
])
def test_cosine_examples(a, b, expected):
    a, b = np.array(a), np.array(b)
    oracle = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    assert cosine_similarity(Tensor(a), Tensor(b)).item() == pytest.approx(expected, abs=1e-12)
    assert oracle == pytest.approx(expected, abs=1e-12)


def test_cosine_zero_vector_rejected():
    with pytest.raises(DegenerateInputError):
        cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


def test_cosine_shape_mismatch():
    with pytest.raises(ShapeError):
        cosine_similarity(Tensor([1.0, 0.0]), Tensor([1.0, 0.0, 0.0]))


nonzero_vec = arrays(np.float64, 5, elements=st.floats(-10, 10)).filter(lambda v: np.linalg.norm(v) > 1e-3)


@given(nonzero_vec, nonzero_vec)
def test_cosine_properties(a, b):
    ab = cosine_similarity(Tensor(a), Tensor(b)).item()
    assert -1 - 1e-12 <= ab <= 1 + 1e-12
    assert ab == cosine_similarity(Tensor(b), Tensor(a)).item()
    assert cosine_similarity(Tensor(a), Tensor(a)).item() == pytest.approx(1.0, abs=1e-12)


def test_l2_normalize_rejects_zero_rows():
    with pytest.raises(DegenerateInputError):
        l2_normalize(Tensor(np.array([[1.0, 0.0], [0.0, 0.0]])))


# -- cross-entropy -------------------------------------------------------------

def test_cross_entropy_perfect_prediction_is_zero():
    labels = np.array([[0, 2], [1, 1]])
    target = one_hot(labels, 3)
    assert pixelwise_cross_entropy(Tensor(target), target).item() == 0.0


def test_cross_entropy_uniform_single_pixel():
    pred = Tensor(np.full((1, 1, 4), 0.25))
    target = one_hot(np.array([[2]]), 4)
    assert pixelwise_cross_entropy(pred, target).item() == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_two_by_two_hand_value():
    p_true = np.array([[0.5, 0.25], [0.8, 1.0]])
    pred = np.stack([p_true, 1 - p_true], axis=-1)
    target = one_hot(np.zeros((2, 2), dtype=int), 2)
    expected = -math.fsum(math.log(v) for v in p_true.ravel())
    assert expected == pytest.approx(2.3026, abs=1e-4)
    assert pixelwise_cross_entropy(Tensor(pred), target).item() == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_ignores_sentinel_pixels():
    pred = Tensor(np.full((1, 2, 2), 0.5))
    target = one_hot(np.array([[0, -1]]), 2)
    assert pixelwise_cross_entropy(pred, target).item() == pytest.approx(math.log(2))


def test_cross_entropy_clamps_zero_probability():
    pred = Tensor(np.array([[[0.0, 1.0]]]))
    target = one_hot(np.array([[0]]), 2)
    assert pixelwise_cross_entropy(pred, target).item() == pytest.approx(-math.log(1e-12))


def test_cross_entropy_shape_error():
    with pytest.raises(ShapeError):
        pixelwise_cross_entropy(Tensor(np.full((2, 2, 3), 1 / 3)), one_hot(np.zeros((2, 2), int), 2))


@given(arrays(np.float64, (3, 4), elements=st.floats(-8, 8)),
       arrays(np.int64, 3, elements=st.integers(0, 3)))
def test_cross_entropy_nonnegative(logits, labels):
    probs = softmax(Tensor(logits[None]))
    assert pixelwise_cross_entropy(probs, one_hot(labels[None], 4)).item() >= 0.0


def test_entropy_bounds():
    C = 5
    uniform = Tensor(np.full((2, 3, C), 1 / C))
    np.testing.assert_allclose(entropy_map(uniform).data, math.log(C), atol=1e-12)
    assert np.all(entropy_map(Tensor(one_hot(np.zeros((2, 3), int), C))).data == 0.0)


# -- backward ------------------------------------------------------------------

def test_backward_quadratic():
    w = parameter([1.0, 2.0, 3.0])
    grads = backward((w * w).sum())
    np.testing.assert_array_equal(grads[w], [2.0, 4.0, 6.0])


def test_backward_independent_leaf_gets_zero():
    w, u = parameter([1.0, 2.0]), parameter([5.0])
    grads = backward((w * 3.0).sum() + u * 0.0)
    np.testing.assert_array_equal(grads[u], [0.0])


def test_backward_non_scalar_rejected():
    w = parameter([1.0, 2.0])
    with pytest.raises(ContractError):
        backward(w * 2.0)


def test_backward_skips_frozen_leaves():
    w, frozen = parameter([1.0, 2.0]), Tensor([3.0, 4.0])
    grads = backward((w * frozen).sum())
    assert frozen not in grads and frozen.grad is None
    np.testing.assert_array_equal(grads[w], [3.0, 4.0])


def test_backward_shared_subexpression_visited_once():
    # y used twice; a double visit would double-count
    x = parameter([2.0])
    y = x * x
    grads = backward((y + y).sum())
    np.testing.assert_array_equal(grads[x], [8.0])


def test_cross_entropy_of_softmax_gradient(rng):
    logits = parameter(rng.normal(size=(2, 3, 4)))
    labels = rng.integers(0, 4, size=(2, 3))
    target = one_hot(labels, 4)
    grads = backward(pixelwise_cross_entropy(softmax(logits), target))
    np.testing.assert_allclose(grads[logits], softmax(Tensor(logits.data)).data - target, atol=1e-12)
    res = finite_difference_check(lambda z: pixelwise_cross_entropy(softmax(z), target), logits)
    assert res.max_rel_error < 1e-6


def test_no_grad_records_nothing():
    w = parameter([1.0])
    with no_grad():
        y = w * 2.0
    assert not y.requires_grad and y._parents == ()


# -- finite-difference oracle ----------------------------------------------------

def test_fd_scalar_square():
    x = parameter([3.0])
    res = finite_difference_check(lambda z: (z * z).sum(), x, h=1e-5)
    assert res.analytic[0] == 6.0
    assert relative_error(res.analytic, res.numeric)[0] < 1e-6


def test_fd_frozen_skipped():
    res = finite_difference_check(lambda z: (z * z).sum(), Tensor([3.0]))
    assert not res.trainable and res.n_checked == 0


def test_fd_five_point_stencil_is_more_accurate():
    x = parameter([0.7])
    f = lambda z: (z.exp() * 1e3).sum()  # noqa: E731
    second = finite_difference_check(f, x, h=1e-2)
    fourth = finite_difference_check(f, x, h=1e-2, stencil=4)
    assert fourth.max_rel_error < second.max_rel_error
    assert fourth.max_rel_error < 1e-8


UNARY = {
    "exp": lambda t: t.exp(),
    "log": lambda t: (t * t + 1.0).log(),
    "sqrt": lambda t: (t * t + 1.0).sqrt(),
    "tanh": lambda t: t.tanh(),
    "gelu": lambda t: t.gelu(),
    "pow": lambda t: (t * t + 1.0) ** 1.5,
    "softmax": lambda t: softmax(t, axis=-1) * np.arange(1.0, 5.0),
    "log_softmax": lambda t: log_softmax(t, axis=0),
    "standardize": lambda t: standardize(t, axis=-1) * np.arange(1.0, 5.0),
    "l2_normalize": lambda t: l2_normalize(t, axis=-1) * np.arange(1.0, 5.0),
    "transpose": lambda t: t.T @ Tensor(np.arange(12.0).reshape(3, 4)),
    "getitem": lambda t: t[np.array([0, 2, 2]), 1:] * 2.0,
    "take": lambda t: t.take([3, 0, 3], axis=1),
    "reshape_mean": lambda t: t.reshape(4, 3).mean(axis=0) * t.reshape(4, 3).sum(axis=0),
    "entropy": lambda t: entropy_map(softmax(t)),
    "div": lambda t: t / (t * t + 2.0),
    "concat_stack": lambda t: concatenate([t, t * 2.0], axis=0).sum(axis=0) * stack([t[0], t[1]]).mean(axis=0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_every_primitive_passes_fd(name):
    rng = np.random.default_rng(sum(map(ord, name)))
    for _ in range(10):
        x = parameter(rng.normal(size=(3, 4)))
        weights = rng.normal(size=UNARY[name](Tensor(x.data)).shape)
        res = finite_difference_check(lambda z: (UNARY[name](z) * weights).sum(), x, h=1e-6)
        assert res.max_rel_error < 1e-4, name


def test_matmul_broadcast_gradient(rng):
    a = parameter(rng.normal(size=(2, 3, 4)))
    b = parameter(rng.normal(size=(4, 5)))
    for x in (a, b):
        res = finite_difference_check(lambda _: ((a @ b) ** 2).sum(), x, h=1e-6)
        assert res.max_rel_error < 1e-6


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)) @ Tensor(np.ones((3, 1)))


def test_take_out_of_range():
    with pytest.raises(ContractError):
        Tensor(np.ones((2, 3))).take([3], axis=1)
