import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathflow.numerics import (
    finite_diff_grad,
    sample_rademacher,
    sample_std_normal,
    seeded_stream,
)


def test_same_key_gives_identical_sequence():
    a = sample_std_normal(seeded_stream(7, 0), 64)
    b = sample_std_normal(seeded_stream(7, 0), 64)
    assert np.array_equal(a, b)


def test_different_stream_ids_differ():
    a = sample_std_normal(seeded_stream(7, 0), 16)
    b = sample_std_normal(seeded_stream(7, 1), 16)
    assert not np.any(a == b)


def test_different_seeds_differ():
    a = sample_std_normal(seeded_stream(7, 0), 16)
    b = sample_std_normal(seeded_stream(8, 0), 16)
    assert not np.array_equal(a, b)


def test_stream_advances():
    rng = seeded_stream(3, 3)
    a = sample_std_normal(rng, 8)
    b = sample_std_normal(rng, 8)
    assert not np.array_equal(a, b)


def test_normal_moments():
    draws = sample_std_normal(seeded_stream(11, 0), 100_000)
    assert abs(draws.mean()) < 0.02
    assert 0.97 < draws.var() < 1.03


def test_normal_shape_and_finite():
    v = sample_std_normal(seeded_stream(1, 1), 3)
    assert v.shape == (3,) and np.all(np.isfinite(v))


def test_rademacher_range():
    v = sample_rademacher(seeded_stream(5, 0), 8)
    assert set(np.unique(v)) <= {-1.0, 1.0}


def test_rademacher_mean():
    draws = sample_rademacher(seeded_stream(5, 1), 100_000)
    assert abs(draws.mean()) < 0.02


def test_rademacher_identity_covariance():
    rng = seeded_stream(5, 2)
    acc = np.zeros((4, 4))
    n = 10_000
    for _ in range(n):
        e = sample_rademacher(rng, 4)
        acc += np.outer(e, e)
    assert np.max(np.abs(acc / n - np.eye(4))) < 0.05


def test_dimension_validation():
    with pytest.raises(ValueError):
        sample_std_normal(seeded_stream(0, 0), 0)
    with pytest.raises(ValueError):
        sample_rademacher(seeded_stream(0, 0), 0)


def test_fd_quadratic():
    g = finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]))
    assert abs(g[0] - 6.0) < 1e-8


def test_fd_constant():
    g = finite_diff_grad(lambda x: 4.2, np.array([1.0, -2.0, 0.5]))
    assert np.array_equal(g, np.zeros(3))


def test_fd_linear_exact():
    x = np.array([0.3, -1.4, 2.2, 0.0])
    g = finite_diff_grad(lambda v: float(np.sum(v)), x)
    assert np.max(np.abs(g - 1.0)) < 1e-10


def test_fd_rejects_nonfinite_probe():
    def fn(x):
        return float("nan") if x[0] > 1.0 else float(x[0])

    with pytest.raises(ValueError, match="non-finite"):
        finite_diff_grad(fn, np.array([1.0]))


@given(
    coeffs=st.lists(st.floats(-3, 3), min_size=3, max_size=3),
    x0=st.floats(-5, 5),
)
@settings(max_examples=50, deadline=None)
def test_fd_exact_on_degree_two_polynomials(coeffs, x0):
    a, b, c = coeffs
    x = np.array([x0])
    g = finite_diff_grad(lambda v: float(a * v[0] ** 2 + b * v[0] + c), x)
    exact = 2 * a * x0 + b
    assert abs(g[0] - exact) <= 1e-7 * max(1.0, abs(exact))


def test_matmul_associativity():
    rng = seeded_stream(21, 0)
    for _ in range(10):
        A = rng.standard_normal(16).reshape(4, 4)
        B = rng.standard_normal(16).reshape(4, 4)
        C = rng.standard_normal(16).reshape(4, 4)
        left = (A @ B) @ C
        right = A @ (B @ C)
        assert np.max(np.abs(left - right)) < 1e-12 * max(1.0, np.max(np.abs(left)))
