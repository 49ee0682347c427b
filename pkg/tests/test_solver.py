import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from pairlasso.core import Dataset, make_custom_basis, make_linear_basis, make_loss
from pairlasso.errors import InvalidArgument
from pairlasso.simulate import generate, sparse_model
from pairlasso.solver import (SolverOptions, fit_lasso, fit_path, lambda_max, objective,
                              soft_threshold, threshold_support)
from pairlasso.urisk import PairRisk

HINGE = make_loss("hinge")
LOGISTIC = make_loss("logistic")


def hinge_lasso_lp(data, lam, weights=None):
    """Exact hinge-Lasso optimum as a linear program over ordered pairs."""
    X, y = data.X, data.y
    n, m = X.shape
    w = np.ones(m) if weights is None else np.asarray(weights)
    rows, ties = [], 0
    for i, j in itertools.permutations(range(n), 2):
        if y[i] == y[j]:
            ties += 1
        else:
            rows.append(np.sign(y[i] - y[j]) * (X[i] - X[j]))
    D = np.array(rows)
    P, N = len(rows), n * (n - 1)
    c = np.concatenate([lam * w, lam * w, np.full(P, 1.0 / N)])
    A = np.hstack([-D, D, -np.eye(P)])
    res = linprog(c, A_ub=A, b_ub=-np.ones(P), bounds=[(0, None)] * (2 * m + P),
                  method="highs")
    assert res.status == 0
    return res.fun + ties / N


def kkt_violation(data, basis, loss, theta, lam, weights=None):
    w = np.ones(basis.m) if weights is None else np.asarray(weights)
    _, g = PairRisk(data, basis, loss).value_and_grad(theta)
    active = theta != 0
    out = np.abs(g + lam * w * np.sign(theta))[active]
    inactive = np.maximum(np.abs(g) - lam * w, 0.0)[~active]
    return max(out.max(initial=0.0), inactive.max(initial=0.0))


@pytest.mark.parametrize("n,m,seed", [(20, 3, 0), (35, 5, 1), (50, 6, 2)])
@pytest.mark.parametrize("frac", [0.6, 0.1, 0.01])
def test_hinge_fit_matches_linear_program(n, m, seed, frac):
    data = generate(sparse_model(m, 2), n, rng_seed=seed)
    basis = make_linear_basis(m)
    lam = frac * lambda_max(data, basis, HINGE)
    fit = fit_lasso(data, basis, HINGE, lam)
    exact = hinge_lasso_lp(data, lam)
    assert fit.objective == pytest.approx(objective(fit.theta_hat, basis, HINGE, data, lam),
                                          rel=1e-14)
    assert exact - 1e-9 <= fit.objective <= exact + 1e-6 * max(1.0, exact)


def test_weighted_hinge_fit_matches_linear_program():
    data = generate(sparse_model(4, 2), 30, rng_seed=5)
    basis = make_linear_basis(4)
    w = np.array([0.5, 1.0, 2.0, 0.0])
    lam = 0.05
    fit = fit_lasso(data, basis, HINGE, lam, weights=w)
    assert fit.objective == pytest.approx(hinge_lasso_lp(data, lam, w), rel=1e-6)


@pytest.mark.parametrize("loss", [LOGISTIC, make_loss("truncated_quadratic", sup_bound=10.0),
                                  make_loss("exponential", sup_bound=5.0)], ids=lambda l: l.kind)
@pytest.mark.parametrize("rule", ["newton", "backtracking"])
def test_smooth_fit_satisfies_optimality_certificate(loss, rule):
    data = generate(sparse_model(8, 3), 60, rng_seed=3)
    basis = make_linear_basis(8)
    lam = 0.2 * lambda_max(data, basis, loss)
    fit = fit_lasso(data, basis, loss, lam, opts=SolverOptions(step_rule=rule, tol=1e-12))
    assert fit.converged
    assert kkt_violation(data, basis, loss, fit.theta_hat, lam) <= 1e-5 * max(1.0, lam)


def test_newton_and_fista_agree():
    data = generate(sparse_model(10, 3), 80, rng_seed=4)
    basis = make_linear_basis(10)
    lam = 0.05 * lambda_max(data, basis, LOGISTIC)
    a = fit_lasso(data, basis, LOGISTIC, lam, opts=SolverOptions(step_rule="newton", tol=1e-12))
    b = fit_lasso(data, basis, LOGISTIC, lam,
                  opts=SolverOptions(step_rule="backtracking", tol=1e-12))
    assert a.objective == pytest.approx(b.objective, rel=1e-8)
    np.testing.assert_allclose(a.theta_hat, b.theta_hat, atol=1e-4)


def test_sqrt_rule_approaches_optimum():
    data = generate(sparse_model(3, 2), 25, rng_seed=6)
    basis = make_linear_basis(3)
    lam = 0.05
    exact = hinge_lasso_lp(data, lam)
    fit = fit_lasso(data, basis, HINGE, lam,
                    opts=SolverOptions(step_rule="sqrt", max_iters=5000, initial_step=0.5))
    assert exact <= fit.objective + 1e-9
    assert fit.objective <= exact + 0.02


@pytest.mark.parametrize("loss", [HINGE, LOGISTIC], ids=lambda l: l.kind)
def test_best_iterate_trace_is_nonincreasing(loss):
    data = generate(sparse_model(5, 2), 40, rng_seed=7)
    basis = make_linear_basis(5)
    for rule in ("backtracking", "sqrt") + (("newton",) if loss.smooth else ()):
        fit = fit_lasso(data, basis, loss, 0.02, opts=SolverOptions(step_rule=rule,
                                                                    max_iters=2000))
        trace = np.array(fit.objective_trace)
        assert np.all(np.diff(trace) <= 0.0)
        assert trace[-1] == pytest.approx(objective(fit.theta_hat, basis, loss, data, 0.02),
                                          rel=1e-13)


@pytest.mark.parametrize("loss", [HINGE, LOGISTIC], ids=lambda l: l.kind)
def test_l1_norm_decreases_along_lambda(loss):
    data = generate(sparse_model(6, 3), 50, rng_seed=8)
    basis = make_linear_basis(6)
    top = lambda_max(data, basis, loss)
    grid = top * np.geomspace(1.0, 1e-2, 8)
    norms = [np.abs(fit.theta_hat).sum() for fit in fit_path(data, basis, loss, grid)]
    # grid is decreasing in lambda, so norms must be nondecreasing
    assert all(b >= a - 1e-4 * max(1.0, a) for a, b in zip(norms, norms[1:]))


def test_lambda_max_zeroes_the_solution():
    data = generate(sparse_model(5, 2), 40, rng_seed=9)
    basis = make_linear_basis(5)
    for loss in (HINGE, LOGISTIC):
        top = lambda_max(data, basis, loss)
        assert not np.any(fit_lasso(data, basis, loss, 1.001 * top).theta_hat)
        assert np.any(fit_lasso(data, basis, loss, 0.9 * top).theta_hat)


def test_fit_path_matches_individual_fits():
    data = generate(sparse_model(5, 2), 40, rng_seed=10)
    basis = make_linear_basis(5)
    grid = [0.001, 0.1, 0.01]
    path = fit_path(data, basis, LOGISTIC, grid)
    assert [f.lam for f in path] == grid
    for fit in path:
        single = fit_lasso(data, basis, LOGISTIC, fit.lam)
        assert fit.objective == pytest.approx(single.objective, rel=1e-8)


def test_zero_lambda_unpenalized_logistic():
    data = generate(sparse_model(2, 1), 30, rng_seed=11)
    basis = make_linear_basis(2)
    fit = fit_lasso(data, basis, LOGISTIC, 0.0, opts=SolverOptions(tol=1e-14))
    _, g = PairRisk(data, basis, LOGISTIC).value_and_grad(fit.theta_hat)
    assert np.abs(g).max() < 1e-7


def test_generic_basis_fit():
    rng = np.random.default_rng(12)
    X = rng.standard_normal((30, 2))
    data = Dataset(X, X[:, 0] - X[:, 1] ** 2 + 0.1 * rng.standard_normal(30))
    basis = make_custom_basis(2, 2, lambda x, xp: np.stack(
        [x[..., 0] - xp[..., 0], x[..., 1] ** 2 - xp[..., 1] ** 2], axis=-1))
    fit = fit_lasso(data, basis, HINGE, 0.01)
    lin = make_custom_basis(2, 2, lambda x, xp: np.stack(
        [x[..., 0] - xp[..., 0], x[..., 1] ** 2 - xp[..., 1] ** 2], axis=-1),
        feature_map=lambda Z: np.stack([Z[:, 0], Z[:, 1] ** 2], axis=-1))
    fast = fit_lasso(data, lin, HINGE, 0.01)
    assert fit.objective == pytest.approx(fast.objective, rel=1e-6)
    assert fit.theta_hat[0] > 0 > fit.theta_hat[1]


@settings(max_examples=200)
@given(st.lists(st.floats(-100, 100), min_size=4, max_size=4),
       st.lists(st.floats(-100, 100), min_size=4, max_size=4),
       st.lists(st.floats(0, 50), min_size=4, max_size=4))
def test_soft_threshold_is_a_contraction(v, vp, t):
    a, b = soft_threshold(v, t), soft_threshold(vp, t)
    assert np.linalg.norm(a - b) <= np.linalg.norm(np.subtract(v, vp)) + 1e-12


def test_soft_threshold_values():
    np.testing.assert_array_equal(soft_threshold([3.0, -3.0, 0.5], 1.0), [2.0, -2.0, 0.0])
    with pytest.raises(InvalidArgument):
        soft_threshold([1.0], -1.0)


def test_threshold_support():
    assert threshold_support([0.1, -3.0, 2.5, 0.0], 1.0) == (1, 2)
    with pytest.raises(InvalidArgument):
        threshold_support([1.0], -0.1)


def test_invalid_options():
    with pytest.raises(InvalidArgument):
        SolverOptions(step_rule="bfgs")
    with pytest.raises(InvalidArgument):
        SolverOptions(max_iters=0)
    data = generate(sparse_model(2, 1), 10, rng_seed=0)
    with pytest.raises(InvalidArgument):
        fit_lasso(data, make_linear_basis(2), HINGE, -1.0)
    with pytest.raises(InvalidArgument):
        fit_lasso(data, make_linear_basis(2), HINGE, 0.1, opts=SolverOptions(step_rule="newton"))
    with pytest.raises(InvalidArgument):
        fit_lasso(data, make_linear_basis(2), HINGE, 0.1, weights=[1.0])


def test_iteration_cap_reports_nonconvergence():
    data = generate(sparse_model(4, 2), 40, rng_seed=13)
    fit = fit_lasso(data, make_linear_basis(4), HINGE, 0.01,
                    opts=SolverOptions(step_rule="backtracking", max_iters=3))
    assert not fit.converged
    assert fit.n_iter <= 3


def test_fit_result_serialization():
    data = generate(sparse_model(3, 1), 20, rng_seed=14)
    fit = fit_lasso(data, make_linear_basis(3), LOGISTIC, 0.01)
    out = fit.to_dict(trace_points=5)
    assert set(out) >= {"theta_hat", "lambda", "weights", "support", "converged",
                        "objective_trace_summary", "partitions"}
    assert len(out["objective_trace_summary"]) <= 5
    assert out["partitions"] == 1
