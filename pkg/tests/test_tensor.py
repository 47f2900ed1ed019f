import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twograph.errors import NonFiniteError, ShapeError
from twograph.tensor import (
    Rng,
    as_tensor,
    check_finite,
    elementwise,
    gaussian_log_density,
    gaussian_sample,
    heaviside,
    matmul,
    outer_product,
)


def test_as_tensor_is_float64():
    t = as_tensor([1, 2, 3])
    assert t.dtype == np.float64
    assert t.shape == (3,)


def test_matmul_rejects_mismatched_shapes():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert matmul(np.ones((2, 3)), np.ones((3, 4))).shape == (2, 4)


def test_outer_product_values():
    assert np.array_equal(outer_product([1.0, 2.0], [3.0, 4.0, 5.0]), [[3, 4, 5], [6, 8, 10]])


def test_heaviside_is_one_at_zero():
    assert np.array_equal(heaviside([-1.0, 0.0, 2.0]), [0.0, 1.0, 1.0])


def test_check_finite_raises():
    with pytest.raises(NonFiniteError):
        check_finite(np.array([1.0, np.nan]))


def test_elementwise_ops():
    a, b = np.array([1.0, -2.0]), np.array([3.0, 4.0])
    assert np.array_equal(elementwise("add", a, b), a + b)
    assert np.array_equal(elementwise("hadamard", a, b), a * b)
    assert np.array_equal(elementwise("scale", a, c=2.0), 2 * a)
    with pytest.raises(ValueError):
        elementwise("nope", a)


def test_rng_streams_are_reproducible_and_independent():
    a = Rng(7).spawn("x").normal(size=5)
    b = Rng(7).spawn("x").normal(size=5)
    c = Rng(7).spawn("y").normal(size=5)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)


def test_rng_spawn_does_not_depend_on_parent_draws():
    r1, r2 = Rng(3), Rng(3)
    r1.normal(size=10)
    assert np.array_equal(r1.spawn("k").uniform(size=3), r2.spawn("k").uniform(size=3))


def test_gaussian_sample_moments():
    x = gaussian_sample(Rng(0), np.zeros(20000), 2.0)
    assert abs(x.mean()) < 0.05
    assert abs(x.std() - 2.0) < 0.05


def test_gaussian_log_density_matches_closed_form():
    x, m, s = np.array([0.3, -1.0]), np.array([0.0, 0.5]), 0.7
    want = np.sum(-0.5 * ((x - m) / s) ** 2 - np.log(s) - 0.5 * np.log(2 * np.pi))
    assert gaussian_log_density(x, m, s) == pytest.approx(want)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_outer_product_shape_and_rank(u, v):
    o = outer_product(u, v)
    assert o.shape == (len(u), len(v))
    assert np.allclose(o, np.asarray(u)[:, None] * np.asarray(v)[None, :])
