import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

import pairlasso.urisk as urisk
from pairlasso.core import Dataset, make_custom_basis, make_linear_basis, make_loss, pairwise_loss
from pairlasso.errors import InvalidArgument, SizeLimit
from pairlasso.simulate import sparse_model
from pairlasso.urisk import (PairRisk, empirical_risk_split, empirical_risk_u, loss_arrays,
                             permutation_average, risk_subgradient_u, u_statistic_stderr,
                             variance_comparison)

LOSSES = [make_loss("hinge"), make_loss("logistic"),
          make_loss("truncated_quadratic", sup_bound=5.0), make_loss("exponential", sup_bound=5.0)]


def brute_risk(theta, basis, loss, data):
    """Direct double loop over ordered pairs."""
    total = [pairwise_loss(loss, theta, basis, (data.X[i], data.y[i]), (data.X[j], data.y[j]))
             for i in range(data.n) for j in range(data.n) if i != j]
    return math.fsum(total) / (data.n * (data.n - 1))


def pair_basis(d):
    """Non-difference-form basis: products and a sign feature."""
    def ev(x, xp):
        return np.stack([x[..., 0] * xp[..., 1] - xp[..., 0] * x[..., 1],
                         np.sign(x[..., 0] - xp[..., 0]),
                         np.tanh(x[..., 1]) - np.tanh(xp[..., 1])], axis=-1)
    return make_custom_basis(d, 3, ev, name="pairs")


def random_data(rng, n, d, ties=False):
    X = rng.standard_normal((n, d))
    y = rng.integers(0, 3, n).astype(float) if ties else rng.standard_normal(n)
    return Dataset(X, y)


@pytest.mark.parametrize("loss", LOSSES, ids=lambda l: l.kind)
@pytest.mark.parametrize("ties", [False, True])
def test_u_risk_matches_double_loop(loss, ties):
    rng = np.random.default_rng(1)
    for n in (2, 3, 9, 30):
        data = random_data(rng, n, 3, ties)
        basis = make_linear_basis(3)
        theta = rng.standard_normal(3)
        assert empirical_risk_u(theta, basis, loss, data).value == pytest.approx(
            brute_risk(theta, basis, loss, data), rel=1e-13, abs=1e-14)


@pytest.mark.parametrize("loss", LOSSES[:2], ids=lambda l: l.kind)
def test_generic_basis_path_matches_double_loop(loss):
    rng = np.random.default_rng(2)
    data = random_data(rng, 25, 2, ties=True)
    basis = pair_basis(2)
    theta = rng.standard_normal(3)
    assert empirical_risk_u(theta, basis, loss, data).value == pytest.approx(
        brute_risk(theta, basis, loss, data), rel=1e-13)


def test_difference_and_generic_paths_agree():
    rng = np.random.default_rng(3)
    data = random_data(rng, 40, 3, ties=True)
    lin = make_linear_basis(3)
    generic = make_custom_basis(3, 3, lambda x, xp: x - xp)
    theta = rng.standard_normal(3)
    for loss in LOSSES:
        a = PairRisk(data, lin, loss).value_grad_hess(theta)
        b = PairRisk(data, generic, loss).value_grad_hess(theta)
        assert a[0] == pytest.approx(b[0], rel=1e-12)
        np.testing.assert_allclose(a[1], b[1], rtol=1e-10, atol=1e-13)
        np.testing.assert_allclose(a[2], b[2], rtol=1e-10, atol=1e-13)


def test_uncached_blocks_give_same_values(monkeypatch):
    rng = np.random.default_rng(4)
    data = random_data(rng, 300, 4, ties=True)
    basis = make_linear_basis(4)
    theta = rng.standard_normal(4)
    loss = make_loss("logistic")
    cached = PairRisk(data, basis, loss).value_grad_hess(theta)
    monkeypatch.setattr(urisk, "_CACHE_PAIRS", 10)
    monkeypatch.setattr(urisk, "_BLOCK_ELEMENTS", 1000)
    streamed = PairRisk(data, basis, loss).value_grad_hess(theta)
    assert cached[0] == pytest.approx(streamed[0], rel=1e-14)
    np.testing.assert_allclose(cached[1], streamed[1], rtol=1e-12)
    np.testing.assert_allclose(cached[2], streamed[2], rtol=1e-12)


@pytest.mark.parametrize("loss", LOSSES[1:], ids=lambda l: l.kind)
def test_gradient_and_hessian_match_finite_differences(loss):
    rng = np.random.default_rng(5)
    data = random_data(rng, 15, 3)
    basis = make_linear_basis(3)
    risk = PairRisk(data, basis, loss)
    theta = 0.3 * rng.standard_normal(3)
    _, g, Hm = risk.value_grad_hess(theta)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (risk.value(theta + e) - risk.value(theta - e)) / (2 * h)
        assert g[k] == pytest.approx(fd, rel=1e-6, abs=1e-9)
        fd_g = (risk.value_and_grad(theta + e)[1] - risk.value_and_grad(theta - e)[1]) / (2 * h)
        np.testing.assert_allclose(Hm[:, k], fd_g, rtol=1e-5, atol=1e-8)


def test_smoothed_hinge_derivatives_match_finite_differences():
    rng = np.random.default_rng(6)
    data = random_data(rng, 12, 2)
    risk = PairRisk(data, make_linear_basis(2), make_loss("hinge"))
    theta = rng.standard_normal(2)
    mu = 0.5
    _, g = risk.value_and_grad(theta, mu)
    h = 1e-7
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd = (risk.value(theta + e, mu) - risk.value(theta - e, mu)) / (2 * h)
        assert g[k] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_huber_hinge_within_half_mu():
    t = np.linspace(-3, 3, 601)
    hinge = make_loss("hinge")
    for mu in (1.0, 0.1, 1e-3):
        smooth = loss_arrays(hinge, t, mu, 0)[0]
        exact = hinge.value(t)
        assert np.all(smooth <= exact + 1e-15)
        assert np.all(exact - smooth <= mu / 2 + 1e-15)


def test_logistic_arrays_match_direct_formulas():
    t = np.array([-700.0, -30.0, -1.0, 0.0, 0.5, 30.0, 700.0])
    val, der, curv = loss_arrays(make_loss("logistic"), t, order=2)
    np.testing.assert_allclose(val, np.logaddexp(0, -t), rtol=1e-15)
    np.testing.assert_allclose(der, -expit(-t), rtol=1e-12, atol=1e-300)
    np.testing.assert_allclose(curv, expit(t) * expit(-t), rtol=1e-10, atol=1e-300)
    assert loss_arrays(make_loss("logistic"), 0.0, order=2) == pytest.approx(
        (math.log(2), -0.5, 0.25))


def test_permutation_identity_small_n():
    rng = np.random.default_rng(7)
    basis = make_linear_basis(2)
    for n in range(2, 8):
        data = random_data(rng, n, 2, ties=n % 2 == 0)
        theta = rng.standard_normal(2)
        for loss in LOSSES[:2]:
            assert permutation_average(theta, basis, loss, data) == pytest.approx(
                empirical_risk_u(theta, basis, loss, data).value, abs=1e-12)


def test_permutation_average_size_limit():
    data = random_data(np.random.default_rng(0), 8, 2)
    with pytest.raises(SizeLimit):
        permutation_average(np.zeros(2), make_linear_basis(2), make_loss("hinge"), data)


def test_split_estimator_uses_first_half_pairs():
    rng = np.random.default_rng(8)
    data = random_data(rng, 7, 2)
    basis = make_linear_basis(2)
    theta = rng.standard_normal(2)
    loss = make_loss("logistic")
    expected = np.mean([pairwise_loss(loss, theta, basis, (data.X[i], data.y[i]),
                                      (data.X[3 + i], data.y[3 + i])) for i in range(3)])
    res = empirical_risk_split(theta, basis, loss, data)
    assert res.pair_count == 3
    assert res.value == pytest.approx(expected, rel=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12))
def test_row_order_invariance(seed, n):
    rng = np.random.default_rng(seed)
    data = random_data(rng, n, 2, ties=True)
    basis = make_linear_basis(2)
    theta = rng.standard_normal(2)
    perm = rng.permutation(n)
    for loss in LOSSES[:2]:
        a = empirical_risk_u(theta, basis, loss, data).value
        b = empirical_risk_u(theta, basis, loss, data.permuted(perm)).value
        assert a == pytest.approx(b, rel=1e-13, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_risk_is_convex_in_theta(seed, t):
    rng = np.random.default_rng(seed)
    data = random_data(rng, 10, 3, ties=True)
    basis = make_linear_basis(3)
    a, b = 2 * rng.standard_normal(3), 2 * rng.standard_normal(3)
    for loss in LOSSES:
        Q = lambda th: empirical_risk_u(th, basis, loss, data).value
        assert Q(t * a + (1 - t) * b) <= t * Q(a) + (1 - t) * Q(b) + 1e-12 * max(1, Q(a), Q(b))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_subgradient_inequality(seed):
    rng = np.random.default_rng(seed)
    data = random_data(rng, 10, 3, ties=True)
    basis = make_linear_basis(3)
    theta, other = rng.standard_normal(3), rng.standard_normal(3)
    for loss in LOSSES:
        g = risk_subgradient_u(theta, basis, loss, data)
        Q = lambda th: empirical_risk_u(th, basis, loss, data).value
        assert Q(other) >= Q(theta) + g @ (other - theta) - 1e-10 * max(1.0, Q(other))


def test_u_statistic_stderr_constant_kernel_is_zero():
    assert u_statistic_stderr(np.ones((6, 6))) == 0.0


def test_u_statistic_stderr_matches_projection_formula():
    rng = np.random.default_rng(9)
    a = rng.standard_normal(8)
    h = a[:, None] + a[None, :]
    # projection of h_ij = a_i + a_j given i: a_i + mean_{j != i} a_j
    n = 8
    h1 = a + (a.sum() - a) / (n - 1)
    assert u_statistic_stderr(h) == pytest.approx(2 * np.std(h1, ddof=1) / math.sqrt(n))


def test_variance_comparison_needs_replications():
    with pytest.raises(InvalidArgument):
        variance_comparison(make_loss("hinge"), make_linear_basis(2), np.ones(2),
                            sparse_model(2, 1), 10, 50, 0)


def test_u_statistic_has_smaller_variance_than_split():
    model = sparse_model(3, 2, 1.0, 1.0)
    var_u, var_split = variance_comparison(make_loss("logistic"), make_linear_basis(3),
                                           np.array([1.0, 0.5, 0.0]), model, 16, 300, 11)
    assert var_u < var_split


def test_dimension_mismatch_rejected():
    data = random_data(np.random.default_rng(0), 4, 2)
    with pytest.raises(InvalidArgument):
        PairRisk(data, make_linear_basis(3), make_loss("hinge"))
