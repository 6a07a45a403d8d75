"""Gradient, determinism, and failure-mode tests for the tensor engine."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from learngene import numcore as nc
from learngene.numcore import NumericError, SeededRng, Tensor

from oracles import (
    away_from,
    check_gradients,
    numeric_grad,
    reference_conv2d,
    reference_cross_entropy,
    reference_softmax,
)


def rng(seed):
    return SeededRng(seed)


# ---- finite-difference gradient suite ----
# Each case builds (scalar function, float64 input arrays).  A fixed random
# projection turns multi-output ops into scalars so every output entry
# contributes to the checked gradient.


def _proj(shape, r):
    return Tensor(r.uniform(-1.0, 1.0, shape, dtype=np.float64))


def case_add(r):
    a = r.uniform(-2, 2, (3, 4), dtype=np.float64)
    b = r.uniform(-2, 2, (3, 4), dtype=np.float64)
    w = _proj((3, 4), r)
    return lambda x, y: ((x + y) * w).sum(), [a, b]


def case_add_broadcast(r):
    a = r.uniform(-2, 2, (2, 3, 4), dtype=np.float64)
    b = r.uniform(-2, 2, (4,), dtype=np.float64)
    w = _proj((2, 3, 4), r)
    return lambda x, y: ((x + y) * w).sum(), [a, b]


def case_mul(r):
    a = r.uniform(-2, 2, (5, 3), dtype=np.float64)
    b = r.uniform(-2, 2, (5, 3), dtype=np.float64)
    w = _proj((5, 3), r)
    return lambda x, y: ((x * y) * w).sum(), [a, b]


def case_div(r):
    a = r.uniform(-2, 2, (4, 3), dtype=np.float64)
    b = away_from(r.uniform(-2, 2, (4, 3), dtype=np.float64), [0.0], margin=0.3)
    w = _proj((4, 3), r)
    return lambda x, y: ((x / y) * w).sum(), [a, b]


def case_matmul(r):
    a = r.uniform(-1, 1, (4, 6), dtype=np.float64)
    b = r.uniform(-1, 1, (6, 3), dtype=np.float64)
    w = _proj((4, 3), r)
    return lambda x, y: ((x @ y) * w).sum(), [a, b]


def case_matmul_batched(r):
    a = r.uniform(-1, 1, (2, 3, 4, 5), dtype=np.float64)
    b = r.uniform(-1, 1, (2, 3, 5, 4), dtype=np.float64)
    w = _proj((2, 3, 4, 4), r)
    return lambda x, y: ((x @ y) * w).sum(), [a, b]


def case_relu(r):
    a = away_from(r.uniform(-2, 2, (6, 5), dtype=np.float64), [0.0])
    w = _proj((6, 5), r)
    return lambda x: (x.relu() * w).sum(), [a]


def case_relu6(r):
    a = away_from(r.uniform(-2, 8, (6, 5), dtype=np.float64), [0.0, 6.0])
    w = _proj((6, 5), r)
    return lambda x: (x.relu6() * w).sum(), [a]


def case_softmax(r):
    a = r.uniform(-3, 3, (4, 5), dtype=np.float64)
    w = _proj((4, 5), r)
    return lambda x: (x.softmax(axis=-1) * w).sum(), [a]


def case_mean_all(r):
    a = r.uniform(-2, 2, (3, 4, 2), dtype=np.float64)
    return lambda x: x.mean(), [a]


def case_mean_axis(r):
    a = r.uniform(-2, 2, (3, 4, 2), dtype=np.float64)
    w = _proj((3, 2), r)
    return lambda x: (x.mean(axis=1) * w).sum(), [a]


def case_sum_axis(r):
    a = r.uniform(-2, 2, (2, 5), dtype=np.float64)
    w = _proj((5,), r)
    return lambda x: (x.sum(axis=0) * w).sum(), [a]


def case_exp_log_sqrt(r):
    a = r.uniform(0.2, 3.0, (4, 3), dtype=np.float64)
    w = _proj((4, 3), r)
    return lambda x: ((x.exp().log().sqrt()) * w).sum(), [a]


def case_conv1x1(r):
    x = r.uniform(-1, 1, (2, 3, 5, 5), dtype=np.float64)
    w = r.uniform(-1, 1, (4, 3, 1, 1), dtype=np.float64)
    b = r.uniform(-1, 1, (4,), dtype=np.float64)
    pw = _proj((2, 4, 5, 5), r)
    return lambda a, k, c: (nc.conv2d(a, k, c, padding=0) * pw).sum(), [x, w, b]


def case_conv3x3(r):
    x = r.uniform(-1, 1, (2, 2, 6, 6), dtype=np.float64)
    w = r.uniform(-1, 1, (3, 2, 3, 3), dtype=np.float64)
    b = r.uniform(-1, 1, (3,), dtype=np.float64)
    pw = _proj((2, 3, 6, 6), r)
    return lambda a, k, c: (nc.conv2d(a, k, c, padding=1) * pw).sum(), [x, w, b]


def case_cross_entropy(r):
    logits = r.uniform(-2, 2, (5, 4), dtype=np.float64)
    labels = r.integers(0, 4, (5,))
    return lambda x: nc.cross_entropy(x, labels), [logits]


def case_reshape_transpose(r):
    a = r.uniform(-2, 2, (2, 3, 4), dtype=np.float64)
    w = _proj((4, 6), r)
    return lambda x: ((x.transpose((2, 0, 1)).reshape(4, 6)) * w).sum(), [a]


def case_concat_narrow(r):
    a = r.uniform(-1, 1, (2, 3), dtype=np.float64)
    b = r.uniform(-1, 1, (2, 4), dtype=np.float64)
    w = _proj((2, 5), r)

    def f(x, y):
        joined = nc.concat([x, y], axis=1)
        return (nc.narrow(joined, 1, 1, 5) * w).sum()

    return f, [a, b]


def case_broadcast(r):
    a = r.uniform(-1, 1, (1, 4), dtype=np.float64)
    w = _proj((3, 4), r)
    return lambda x: (x.broadcast_to((3, 4)) * w).sum(), [a]


PRIMITIVE_CASES = [
    case_add,
    case_add_broadcast,
    case_mul,
    case_div,
    case_matmul,
    case_matmul_batched,
    case_relu,
    case_relu6,
    case_softmax,
    case_mean_all,
    case_mean_axis,
    case_sum_axis,
    case_exp_log_sqrt,
    case_conv1x1,
    case_conv3x3,
    case_cross_entropy,
    case_reshape_transpose,
    case_concat_narrow,
    case_broadcast,
]


@pytest.mark.parametrize("case", PRIMITIVE_CASES, ids=lambda c: c.__name__)
@pytest.mark.parametrize("seed", [11, 12, 13, 14])
def test_primitive_gradients_match_finite_differences(case, seed):
    f, arrays = case(rng(seed))
    assert check_gradients(f, arrays) > 0


# ---- frozen value oracles ----


def test_conv2d_matches_sliding_window_reference():
    r = rng(7)
    x = r.uniform(-1, 1, (2, 3, 6, 6), dtype=np.float64)
    w = r.uniform(-1, 1, (4, 3, 3, 3), dtype=np.float64)
    b = r.uniform(-1, 1, (4,), dtype=np.float64)
    for pad in (0, 1):
        got = nc.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=pad).data
        ref = reference_conv2d(x, w, b, padding=pad)
        np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-12)


def test_softmax_matches_reference_and_normalizes():
    r = rng(8)
    x = r.uniform(-5, 5, (6, 9), dtype=np.float64)
    got = nc.softmax(Tensor(x)).data
    np.testing.assert_allclose(got, reference_softmax(x), rtol=1e-12)
    np.testing.assert_allclose(got.sum(axis=-1), np.ones(6), rtol=1e-12)


def test_cross_entropy_matches_scalar_loop():
    r = rng(9)
    logits = r.uniform(-4, 4, (7, 5), dtype=np.float64)
    labels = r.integers(0, 5, (7,))
    got = nc.cross_entropy(Tensor(logits), labels).item()
    assert math.isclose(got, reference_cross_entropy(logits, labels), rel_tol=1e-12)


def test_cross_entropy_uniform_two_classes_is_ln2():
    logits = Tensor(np.zeros((1, 2), dtype=np.float32))
    assert math.isclose(nc.cross_entropy(logits, np.array([0])).item(), math.log(2), rel_tol=1e-6)


def test_cross_entropy_rejects_bad_labels():
    logits = Tensor(np.zeros((2, 3), dtype=np.float32))
    with pytest.raises(ValueError):
        nc.cross_entropy(logits, np.array([0, 3]))
    with pytest.raises(ValueError):
        nc.cross_entropy(logits, np.array([-1, 0]))
    with pytest.raises(ValueError):
        nc.cross_entropy(Tensor(np.zeros((2, 1), dtype=np.float32)), np.array([0, 0]))


def test_relu6_clamps_and_boundary_subgradient_is_zero():
    x = Tensor(np.array([-1.0, 0.0, 3.0, 6.0, 7.5], dtype=np.float32), requires_grad=True)
    y = nc.relu6(x)
    np.testing.assert_array_equal(y.data, np.array([0, 0, 3, 6, 6], dtype=np.float32))
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, np.array([0, 0, 1, 0, 0], dtype=np.float32))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
def test_relu6_range_property(vals):
    y = nc.relu6(Tensor(np.array(vals, dtype=np.float32)))
    assert float(y.data.min()) >= 0.0 and float(y.data.max()) <= 6.0


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.integers(2, 6))
def test_softmax_rows_sum_to_one_property(seed, n, c):
    x = rng(seed).uniform(-10, 10, (n, c))
    s = nc.softmax(Tensor(x)).data.sum(axis=-1)
    np.testing.assert_allclose(s, np.ones(n), rtol=1e-5)


# ---- graph mechanics ----


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2).backward()


def test_shared_node_gradient_counted_once_per_path():
    x = Tensor(np.array([3.0], dtype=np.float32), requires_grad=True)
    y = x * 2.0 + x * 3.0
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, np.array([5.0], dtype=np.float32))


def test_repeated_backward_accumulates_exactly():
    x = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
    y = (x * x).sum()
    y.backward()
    first = x.grad.copy()
    y.backward()
    np.testing.assert_array_equal(x.grad, 2 * first)


def test_no_grad_blocks_recording():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with nc.no_grad():
        y = x * 2
    assert not y.requires_grad
    z = x * 2
    assert z.requires_grad


def test_detach_stops_gradient():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    y = (x.detach() * 5.0).sum() + (x * 1.0).sum()
    y.backward()
    np.testing.assert_array_equal(x.grad, np.ones(3, dtype=np.float32))


def test_non_finite_result_aborts():
    x = Tensor(np.array([1.0, 0.0], dtype=np.float32))
    with pytest.raises(NumericError):
        nc.log(x)
    with pytest.raises(NumericError):
        Tensor(np.array([np.nan], dtype=np.float32))


def test_float32_is_default_storage():
    t = Tensor([1.0, 2.0])
    assert t.dtype == np.float32
    assert (t * 2).dtype == np.float32


# ---- optimizer ----


def test_sgd_quadratic_ten_steps_matches_closed_form():
    p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    for _ in range(10):
        loss = (p * p).sum()
        loss.backward()
        nc.sgd_step([p], lr=0.1)
    assert math.isclose(p.data[0], 0.8**10, rel_tol=1e-5)
    assert p.grad is None


def test_sgd_skips_parameters_without_gradients():
    p = Tensor(np.array([4.0], dtype=np.float32), requires_grad=True)
    nc.sgd_step([p], lr=0.5)
    np.testing.assert_array_equal(p.data, np.array([4.0], dtype=np.float32))


def test_sgd_weight_decay_shrinks_parameter():
    p = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
    p.grad = np.zeros(1, dtype=np.float32)
    nc.sgd_step([p], lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(p.data, np.array([1.9], dtype=np.float32), rtol=1e-6)


def test_sgd_rejects_shape_mismatch():
    p = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    p.grad = np.ones(2, dtype=np.float32)
    with pytest.raises(ValueError):
        nc.sgd_step([p], lr=0.1)


def test_cosine_schedule_endpoints_and_midpoint():
    assert math.isclose(nc.cosine_lr(1e-4, 0, 100), 1e-4)
    assert math.isclose(nc.cosine_lr(1e-4, 50, 100), 5e-5)
    assert nc.cosine_lr(1e-4, 100, 100) < 1e-12


def test_grad_sq_norm_matches_manual_sum():
    a = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    b = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    ((a * a).sum() + (b * 3.0).sum()).backward()
    # grads: a -> 2s (3 entries), b -> 3s (4 entries)
    assert math.isclose(nc.grad_sq_norm([a, b]), 3 * 4.0 + 4 * 9.0, rel_tol=1e-6)


# ---- seeded randomness ----


def test_seeded_rng_reproduces_streams():
    a = SeededRng(123).uniform(0, 1, (10,))
    b = SeededRng(123).uniform(0, 1, (10,))
    np.testing.assert_array_equal(a, b)
    c = SeededRng(124).uniform(0, 1, (10,))
    assert not np.array_equal(a, c)


def test_seeded_rng_children_are_stable_and_distinct():
    root = SeededRng(5)
    c1 = root.child("init")
    c2 = SeededRng(5).child("init")
    assert c1.seed == c2.seed
    assert root.child("init").seed != root.child("data").seed


def test_seeded_rng_rejects_out_of_range_seed():
    with pytest.raises(ValueError):
        SeededRng(2**64)
    with pytest.raises(ValueError):
        SeededRng(-1)


def test_numeric_grad_oracle_on_known_function():
    # d/dx sum(x^2) = 2x, verifying the harness itself
    x = np.array([1.0, -2.0, 0.5])
    fd = numeric_grad(lambda v: float((v**2).sum()), x)
    np.testing.assert_allclose(fd, 2 * x, rtol=1e-6)
