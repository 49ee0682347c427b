"""Weighted-Lasso minimization of the pairwise U-statistic risk.

Minimizes ``Q_n(f_theta) + lam * sum_k w_k |theta_k|`` over all of R^m.

Step rules:

``auto`` (default)
    ``newton`` for smooth losses with at most ``NEWTON_MAX_M`` coefficients,
    ``backtracking`` otherwise.
``newton``
    Proximal Newton: each step minimizes the local quadratic model plus the
    weighted l1 penalty by coordinate descent, followed by an Armijo
    backtracking line search on the exact objective.
``backtracking``
    Monotone FISTA with a backtracking Lipschitz estimate.  The hinge loss is
    handled by continuation on a Huber-smoothed hinge, whose risk is within
    ``mu / 2`` of the true one; the best iterate is tracked on the exact
    (unsmoothed) objective.
``sqrt``
    Proximal subgradient steps ``initial_step / sqrt(k)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import BasisSpec, Dataset, LossSpec, check_theta, support
from .errors import InvalidArgument
from .urisk import PairRisk

AUTO = "auto"
NEWTON = "newton"
BACKTRACKING = "backtracking"
SQRT = "sqrt"
NEWTON_MAX_M = 400
HINGE_SMOOTHING = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)


@dataclass
class SolverOptions:
    max_iters: int = 50_000
    step_rule: str = AUTO
    initial_step: float = 1.0
    tol: float = 1e-8
    theta0: Optional[np.ndarray] = None
    window: int = 10
    smoothing: Sequence[float] = HINGE_SMOOTHING

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidArgument("max_iters must be >= 1")
        if not self.tol > 0:
            raise InvalidArgument("tol must be positive")
        if not self.initial_step > 0:
            raise InvalidArgument("initial_step must be positive")
        if self.step_rule not in (AUTO, NEWTON, BACKTRACKING, SQRT):
            raise InvalidArgument(f"unknown step rule {self.step_rule!r}")
        if self.window < 1:
            raise InvalidArgument("window must be >= 1")


@dataclass
class FitResult:
    theta_hat: np.ndarray
    lam: float
    weights: np.ndarray
    objective_trace: list
    converged: bool
    support: tuple
    n_iter: int = 0
    partitions: int = 1
    extra: dict = field(default_factory=dict)

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]

    def to_dict(self, trace_points: int = 20) -> dict:
        trace = self.objective_trace
        if len(trace) > trace_points:
            idx = np.unique(np.linspace(0, len(trace) - 1, trace_points).astype(int))
            trace = [trace[i] for i in idx]
        return {
            "theta_hat": [float(v) for v in self.theta_hat],
            "lambda": float(self.lam),
            "weights": [float(v) for v in self.weights],
            "support": [int(k) for k in self.support],
            "converged": bool(self.converged),
            "n_iter": int(self.n_iter),
            "objective": float(self.objective),
            "objective_trace_summary": [float(v) for v in trace],
            "partitions": int(self.partitions),
            **self.extra,
        }


def soft_threshold(v, thresholds) -> np.ndarray:
    """``sign(v_k) * max(|v_k| - t_k, 0)``: the prox of a weighted l1 norm."""
    v = np.asarray(v, dtype=float)
    t = np.broadcast_to(np.asarray(thresholds, dtype=float), v.shape)
    if np.any(t < 0):
        raise InvalidArgument("thresholds must be nonnegative")
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def _weights(weights, m) -> np.ndarray:
    if weights is None:
        return np.ones(m)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != m:
        raise InvalidArgument(f"weights must have length {m}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidArgument("weights must be finite and nonnegative")
    return w


def objective(theta, basis: BasisSpec, loss: LossSpec, data: Dataset, lam: float,
              weights=None) -> float:
    """``Q_n(f_theta) + lam * sum_k w_k |theta_k|`` (unit weights by default)."""
    if lam < 0:
        raise InvalidArgument("lambda must be nonnegative")
    theta = check_theta(theta, basis)
    w = _weights(weights, basis.m)
    return PairRisk(data, basis, loss).value(theta) + lam * float(w @ np.abs(theta))


class _Tracker:
    """Best iterate and the non-increasing trace of its objective."""

    def __init__(self, theta, value):
        self.best_theta = theta.copy()
        self.best = value
        self.trace = [value]

    def update(self, theta, value):
        if value < self.best:
            self.best = value
            self.best_theta = theta.copy()
        self.trace.append(self.best)


def _fista_stage(risk, lam, w, x, mu, opts, tracker, budget, state):
    """Monotone FISTA on the (possibly smoothed) risk; returns (x, iters, converged)."""
    pen = lambda th: lam * float(w @ np.abs(th))
    fx = risk.value(x, mu)
    Fx = fx + pen(x)
    y = x.copy()
    t = 1.0
    history = [Fx]
    for it in range(1, budget + 1):
        fy, gy = risk.value_and_grad(y, mu)
        L = state["L"]
        while True:
            step = 1.0 / L
            z = soft_threshold(y - step * gy, step * lam * w)
            dz = z - y
            fz = risk.value(z, mu)
            if fz <= fy + gy @ dz + 0.5 * L * (dz @ dz) + 1e-12 * (1.0 + abs(fy)):
                break
            L *= 2.0
            if L > 1e300:
                break
        state["L"] = max(L * 0.9, 1e-12)
        Fz = fz + pen(z)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        if Fz <= Fx:
            x_next, F_next = z, Fz
        else:
            x_next, F_next = x, Fx
        y = x_next + (t / t_next) * (z - x_next) + ((t - 1.0) / t_next) * (x_next - x)
        x, Fx, t = x_next, F_next, t_next
        true_F = Fz if mu == 0 else risk.value(z, 0.0) + pen(z)
        tracker.update(z, true_F)
        history.append(Fx)
        if len(history) > opts.window:
            old = history[-1 - opts.window]
            if old - Fx <= opts.tol * max(abs(Fx), 1.0):
                return x, it, True
    return x, budget, False


def _subgradient_run(risk, lam, w, x, opts, tracker):
    pen = lambda th: lam * float(w @ np.abs(th))
    window = opts.window * 100
    for k in range(1, opts.max_iters + 1):
        _, g = risk.value_and_grad(x)
        step = opts.initial_step / np.sqrt(k)
        x = soft_threshold(x - step * g, step * lam * w)
        tracker.update(x, risk.value(x) + pen(x))
        if len(tracker.trace) > window:
            old = tracker.trace[-1 - window]
            if old - tracker.best <= opts.tol * max(abs(tracker.best), 1.0):
                return k, True
    return opts.max_iters, False


def _quadratic_l1_cd(A, g, x, tau, max_sweeps=500, tol=1e-13):
    """Minimize ``g.(z - x) + (z - x).A.(z - x) / 2 + sum tau_k |z_k|`` over ``z``.

    Cyclic coordinate descent identifies the nonzero coordinates and their
    signs; the quadratic restricted to them is then solved directly, which
    coordinate descent alone does slowly when ``A`` is ill-conditioned.
    """
    m = x.shape[0]
    z = x.copy()
    Aq = np.zeros(m)
    diag = np.maximum(np.diag(A), 1e-300)
    scale = 1.0 + float(np.abs(x).max(initial=0.0))

    def sweep():
        biggest = 0.0
        for j in range(m):
            c = g[j] + Aq[j] - diag[j] * (z[j] - x[j])
            v = x[j] - c / diag[j]
            zj = math.copysign(max(abs(v) - tau[j] / diag[j], 0.0), v)
            delta = zj - z[j]
            if delta != 0.0:
                Aq[:] += delta * A[:, j]
                z[j] = zj
                biggest = max(biggest, abs(delta))
        return biggest

    for _ in range(max_sweeps):
        if sweep() <= tol * scale:
            break
        act = np.flatnonzero(z)
        if act.size == 0:
            continue
        signs = np.sign(z[act])
        # stationarity on the active block with the inactive coordinates at zero
        rhs = -(g[act] + tau[act] * signs) + A[np.ix_(act, act)] @ x[act]
        inactive = np.setdiff1d(np.arange(m), act)
        rhs += A[np.ix_(act, inactive)] @ x[inactive]
        try:
            z_act = np.linalg.solve(A[np.ix_(act, act)], rhs)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.sign(z_act) == signs):
            z[:] = 0.0
            z[act] = z_act
            Aq[:] = A @ (z - x)
    return z


def _newton_run(risk, lam, w, x, opts, tracker):
    """Proximal Newton with Armijo backtracking; returns (x, iters, converged)."""
    pen = lambda th: lam * float(w @ np.abs(th))
    tau = lam * w
    budget = opts.max_iters
    f, g, A = risk.value_grad_hess(x)
    for k in range(1, budget + 1):
        F = f + pen(x)
        # keep the model strictly convex where the risk is flat
        A = A + (1e-10 * max(np.trace(A) / A.shape[0], 1e-12)) * np.eye(A.shape[0])
        z = _quadratic_l1_cd(A, g, x, tau)
        d = z - x
        predicted = float(g @ d) + pen(z) - pen(x)
        if predicted >= -opts.tol * max(abs(F), 1.0):
            return x, k, True
        # full steps are usually accepted, so evaluate curvature there at once
        xn = z
        fn, gn, An = risk.value_grad_hess(xn)
        Fn = fn + pen(xn)
        alpha = 1.0
        while Fn > F + 1e-4 * alpha * predicted:
            alpha *= 0.5
            if alpha < 1e-12:
                return x, k, True
            xn = x + alpha * d
            Fn = risk.value(xn) + pen(xn)
            gn = None
        tracker.update(xn, Fn)
        if F - Fn <= 0.1 * opts.tol * max(abs(Fn), 1.0):
            return xn, k, True
        x = xn
        if gn is None:
            fn, gn, An = risk.value_grad_hess(x)
        f, g, A = fn, gn, An
    return x, budget, False


def _resolve_step_rule(risk, opts) -> str:
    if opts.step_rule != AUTO:
        return opts.step_rule
    smooth = getattr(risk, "smooth", True)
    if smooth and getattr(risk, "has_hessian", False) and risk.m <= NEWTON_MAX_M:
        return NEWTON
    return BACKTRACKING


def minimize_penalized(risk, lam: float, weights=None, opts: Optional[SolverOptions] = None):
    """Minimize ``risk(theta) + lam * sum w_k |theta_k|`` for any risk object.

    ``risk`` must expose ``m``, a boolean ``smooth``, ``value(theta, mu=0)``
    and ``value_and_grad(theta, mu=0)``; the Newton rule also needs
    ``value_grad_hess``.  Returns ``(theta, trace, converged, n_iter)``.
    """
    if lam < 0:
        raise InvalidArgument("lambda must be nonnegative")
    opts = opts or SolverOptions()
    m = risk.m
    w = _weights(weights, m)
    x = np.zeros(m) if opts.theta0 is None else np.asarray(opts.theta0, dtype=float).copy()
    if x.shape != (m,):
        raise InvalidArgument(f"theta0 must have length {m}")
    smooth = risk.smooth
    tracker = _Tracker(x, risk.value(x) + lam * float(w @ np.abs(x)))
    rule = _resolve_step_rule(risk, opts)

    if rule == NEWTON:
        if not smooth:
            raise InvalidArgument("the newton step rule needs a smooth loss")
        _, n_iter, converged = _newton_run(risk, lam, w, x, opts, tracker)
        return tracker.best_theta, tracker.trace, converged, n_iter
    if rule == SQRT:
        n_iter, converged = _subgradient_run(risk, lam, w, x, opts, tracker)
        return tracker.best_theta, tracker.trace, converged, n_iter

    state = {"L": 1.0 / opts.initial_step}
    stages = [0.0] if smooth else list(opts.smoothing)
    used = 0
    converged = False
    for mu in stages:
        budget = opts.max_iters - used
        if budget <= 0:
            converged = False
            break
        x, iters, converged = _fista_stage(risk, lam, w, x, mu, opts, tracker, budget, state)
        # restart each stage from the best exact iterate
        x = tracker.best_theta.copy()
        used += iters
    return tracker.best_theta, tracker.trace, converged, used


def fit_lasso(data: Dataset, basis: BasisSpec, loss: LossSpec, lam: float,
              weights=None, opts: Optional[SolverOptions] = None) -> FitResult:
    """Penalized pairwise-ranking fit; returns the best iterate found.

    Non-convergence within ``max_iters`` is reported through
    ``converged=False``; the best iterate is still returned.
    """
    risk = PairRisk(data, basis, loss)
    w = _weights(weights, basis.m)
    theta, trace, converged, n_iter = minimize_penalized(risk, lam, w, opts)
    return FitResult(theta_hat=theta, lam=float(lam), weights=w,
                     objective_trace=trace, converged=converged,
                     support=support(theta), n_iter=n_iter,
                     partitions=risk.partitions)


def fit_path(data: Dataset, basis: BasisSpec, loss: LossSpec, lambdas,
             weights=None, opts: Optional[SolverOptions] = None) -> list:
    """Fits along ``lambdas`` (visited largest first, warm-started).

    Results are returned in the order of ``lambdas``.
    """
    opts = opts or SolverOptions()
    lambdas = [float(v) for v in lambdas]
    order = sorted(range(len(lambdas)), key=lambda i: -lambdas[i])
    risk = PairRisk(data, basis, loss)
    w = _weights(weights, basis.m)
    out = [None] * len(lambdas)
    theta0 = opts.theta0
    for i in order:
        run_opts = SolverOptions(max_iters=opts.max_iters, step_rule=opts.step_rule,
                                 initial_step=opts.initial_step, tol=opts.tol,
                                 theta0=theta0, window=opts.window,
                                 smoothing=opts.smoothing)
        theta, trace, converged, n_iter = minimize_penalized(risk, lambdas[i], w, run_opts)
        out[i] = FitResult(theta_hat=theta, lam=lambdas[i], weights=w,
                           objective_trace=trace, converged=converged,
                           support=support(theta), n_iter=n_iter,
                           partitions=risk.partitions)
        theta0 = theta
    return out


def lambda_max(data: Dataset, basis: BasisSpec, loss: LossSpec, weights=None) -> float:
    """Smallest ``lam`` for which ``theta = 0`` is optimal.

    Uses the (sub)gradient at zero; for the hinge this is the smoothed-hinge
    gradient with the kink subgradient ``-1`` at ``t = 0``, which is exact.
    """
    w = _weights(weights, basis.m)
    _, g = PairRisk(data, basis, loss).value_and_grad(np.zeros(basis.m))
    ratios = np.where(w > 0, np.abs(g) / np.where(w > 0, w, 1.0), 0.0)
    return float(ratios.max())


def threshold_support(theta_hat, tau: float) -> tuple:
    """Thresholded-Lasso support ``{k : |theta_k| > tau}`` (0-based)."""
    if tau < 0:
        raise InvalidArgument("tau must be nonnegative")
    return tuple(int(k) for k in np.flatnonzero(np.abs(np.asarray(theta_hat)) > tau))
