import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from twograph.errors import DomainError, ShapeError
from twograph.operators import (
    KERNELS,
    KernelCall,
    affine,
    bellman_error,
    bellman_gradient_error,
    chain_combine,
    gan_losses,
    get_kernel,
    jacobian,
    kick_compute,
    logistic_loss,
    mlp_layers,
    mlp_param_count,
    mse_loss,
    neg_log_likelihood,
    partials,
    rectifier_layer,
    vlb_terms,
)
from twograph.tensor import Rng
from twograph.verify import central_diff, self_test_kernels

finite = st.floats(-5.0, 5.0, allow_nan=False)


def test_every_differentiable_kernel_passes_self_test():
    errors = self_test_kernels(Rng(0), points=5)
    assert errors, "no kernels were checked"
    bad = {tag: e for tag, e in errors.items() if e > 1e-6}
    assert not bad


def test_unknown_kernel():
    with pytest.raises(KeyError, match="unknown kernel"):
        get_kernel("no-such-kernel")


def test_affine_matches_matrix_product():
    theta = np.arange(6.0).reshape(2, 3)
    s = np.array([1.0, 0.0, -1.0])
    assert np.allclose(affine(theta, s), theta @ s)
    with pytest.raises(ShapeError):
        affine(theta, np.ones(2))


def test_rectifier_layer_feedback_signal():
    theta = np.array([[1.0, -2.0], [0.5, 0.5]])
    s = np.array([1.0, 1.0])
    out, tau = rectifier_layer(theta, s)
    # first unit: 1 - 2 < 0 (off); second unit: 1 > 0 (on)
    assert np.allclose(out, [0.0, 1.0])
    assert np.allclose(tau, theta[1])


def test_rectifier_indicator_at_zero_is_active():
    theta = np.array([[1.0, -1.0]])
    out, tau = rectifier_layer(theta, np.array([2.0, 2.0]))
    assert out[0] == 0.0
    assert np.allclose(tau, theta[0])


def test_losses_values():
    assert mse_loss([[1.0, 2.0]], [[0.0, 0.0]]) == pytest.approx(2.5)
    assert logistic_loss([[0.0]], [[1.0]]) == pytest.approx(np.log(2.0))
    assert neg_log_likelihood([[np.e]]) == pytest.approx(-1.0)
    with pytest.raises(DomainError):
        neg_log_likelihood([[0.0]])


def test_gan_losses_reject_saturated_curator():
    lr, lf = gan_losses([[0.5]], [[0.25]])
    assert lr == pytest.approx(np.log(0.5))
    assert lf == pytest.approx(np.log(0.75))
    with pytest.raises(DomainError):
        gan_losses([[1.0]], [[0.5]])


def test_bellman_errors():
    assert bellman_error([[1.0]], [[2.0]], [[0.5]], gamma=0.5) == pytest.approx((1 + 1 - 0.5) ** 2)
    g, eps = np.array([[1.0, 2.0]]), np.array([[0.5, -0.5]])
    assert bellman_gradient_error([[1.0]], [[0.0]], [[0.0]], g, eps, gamma=0.0) == pytest.approx((1 + 0.5) ** 2)
    with pytest.raises(DomainError):
        bellman_error([[1.0]], [[1.0]], [[1.0]], gamma=1.0)


def test_bellman_target_is_not_differentiated():
    assert 1 in get_kernel("bellman_error").nondiff
    assert 1 in get_kernel("bellman_gradient_error").nondiff


def test_vlb_terms_without_logdet_is_log_ratio():
    eps, z = np.array([[0.3]]), np.array([[0.3]])
    l1, l2 = vlb_terms(eps, np.zeros((1, 2)), z, np.array([[0.5]]), reduce="none")
    # identical noise and prior: the log-ratio vanishes
    assert l1[0, 0] == pytest.approx(0.0)
    assert l2[0, 0] == pytest.approx(-np.log(0.5))


def test_chain_combine_matches_vjp():
    rng = np.random.default_rng(0)
    theta, s = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
    delta = rng.normal(size=(2, 3))
    jac_t = jacobian("affine", (theta, s), 0)
    jac_s = jacobian("affine", (theta, s), 1)
    dense = chain_combine([jac_t, jac_s], delta)
    sparse = partials("affine", (theta, s), out_grads=(delta,))
    assert np.allclose(dense[0], sparse[0])
    assert np.allclose(dense[1], sparse[1])


def test_kernel_call_without_partials():
    call = KernelCall(get_kernel("kick"), {}, (np.ones(2), np.ones(2), np.ones(2)))
    with pytest.raises(TypeError):
        call.vjp([np.ones((2, 2))])


def test_kick_compute_scalar_feedback_broadcasts():
    k = kick_compute([1.0, 2.0], [1.0, 0.0, 1.0], 1.0)
    assert np.array_equal(k, [[1, 0, 1], [2, 0, 2]])
    with pytest.raises(ShapeError):
        kick_compute([1.0], [1.0, 1.0], [1.0])


def test_mlp_layers_unpack_in_order():
    widths = (2, 3, 1)
    p = np.arange(float(mlp_param_count(widths)))
    (w1, b1), (w2, b2) = mlp_layers(p, widths)
    assert w1.shape == (3, 2) and b1.shape == (3,)
    assert w2.shape == (1, 3) and b2.shape == (1,)
    assert w1[0, 0] == 0.0 and b2[0] == p[-1]


def test_every_registered_kernel_documents_its_arity():
    for tag, spec in KERNELS.items():
        assert spec.tag == tag
        assert spec.arity >= 1


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_affine_vjp_matches_finite_differences(theta, s):
    g = np.ones((4, 3))
    g_theta, g_s = partials("affine", (theta, s), out_grads=(g,))
    num_theta = central_diff(lambda t: np.sum(affine(t, s)), theta)
    num_s = central_diff(lambda x: np.sum(affine(theta, x)), s)
    assert np.allclose(g_theta, num_theta, atol=1e-6)
    assert np.allclose(g_s, num_s, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 2), elements=finite), arrays(np.float64, (5, 2), elements=finite))
def test_mse_is_nonnegative_and_zero_on_match(a, b):
    assert mse_loss(a, b) >= 0.0
    assert mse_loss(a, a) == 0.0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (6, 3), elements=finite))
def test_rectifier_outputs_are_consistent(theta, s):
    out, tau, active = get_kernel("rectifier_layer").forward({}, theta, s)
    assert np.all(out >= 0.0)
    assert np.array_equal(active, (s @ theta.T >= 0).astype(float))
    assert np.allclose(tau, active @ theta)
