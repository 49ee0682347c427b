"""Gaussian linear model, Bayes ranking rule and Monte Carlo risks.

Observations follow ``Y = theta0 . X + eps`` with ``X ~ N(0, V)`` and
``eps ~ N(0, sigma^2)``.  For two independent draws,
``Y - Y' = theta0 . (X - X') + (eps - eps')`` with ``eps - eps' ~ N(0, 2 sigma^2)``,
so ``P(Y > Y' | x, x') = Phi(theta0 . (x - x') / (sigma sqrt 2))``.

Population risks are estimated on fresh predictor pairs using the
conditional form ``E[phi(s f) | x, x'] = eta phi(f) + (1 - eta) phi(-f)``,
which is unbiased and has lower variance than sampling responses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy import integrate, optimize, special

from .core import LINEAR, BasisSpec, Dataset, LossSpec, check_theta
from .errors import InvalidArgument
from .urisk import loss_arrays

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class SyntheticModel:
    theta0: np.ndarray
    V: np.ndarray
    sigma_noise: float = 1.0

    def __post_init__(self):
        theta0 = np.array(self.theta0, dtype=float).reshape(-1)
        V = np.array(self.V, dtype=float)
        if V.ndim == 0:
            V = V * np.eye(theta0.shape[0])
        if V.shape != (theta0.shape[0], theta0.shape[0]):
            raise InvalidArgument("V must be a d x d matrix matching theta0")
        if not (np.all(np.isfinite(theta0)) and np.all(np.isfinite(V))):
            raise InvalidArgument("model parameters must be finite")
        if not np.allclose(V, V.T, atol=1e-12, rtol=0):
            raise InvalidArgument("V must be symmetric")
        if np.linalg.eigvalsh(V).min() < -1e-10 * max(1.0, np.abs(V).max()):
            raise InvalidArgument("V must be positive semidefinite")
        if not self.sigma_noise >= 0:
            raise InvalidArgument("sigma_noise must be nonnegative")
        object.__setattr__(self, "theta0", theta0)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "sigma_noise", float(self.sigma_noise))

    @property
    def d(self) -> int:
        return self.theta0.shape[0]

    @property
    def true_support(self) -> tuple:
        return tuple(int(k) for k in np.flatnonzero(self.theta0))

    def extend(self, d_ambient: Optional[int]) -> "SyntheticModel":
        """Embed in ``d_ambient`` dimensions: zero coefficients, identity variance."""
        if d_ambient is None or d_ambient == self.d:
            return self
        if d_ambient < self.d:
            raise InvalidArgument(
                f"d_ambient = {d_ambient} is smaller than the model dimension {self.d}")
        theta0 = np.zeros(d_ambient)
        theta0[:self.d] = self.theta0
        V = np.eye(d_ambient)
        V[:self.d, :self.d] = self.V
        return SyntheticModel(theta0, V, self.sigma_noise)

    def to_dict(self) -> dict:
        return {"theta0": self.theta0.tolist(), "V": self.V.tolist(),
                "sigma_noise": self.sigma_noise}


def sparse_model(d: int, s: int, amplitude: float = 1.0, sigma: float = 1.0,
                 V=None) -> SyntheticModel:
    """``theta0`` equal to ``amplitude`` on the first ``s`` of ``d`` coordinates."""
    if not 0 <= s <= d:
        raise InvalidArgument("need 0 <= s <= d")
    theta0 = np.zeros(d)
    theta0[:s] = amplitude
    return SyntheticModel(theta0, np.eye(d) if V is None else V, sigma)


def _rng(rng_seed) -> np.random.Generator:
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def _draw_x(model: SyntheticModel, count: int, rng) -> np.ndarray:
    w, Q = np.linalg.eigh(model.V)
    root = Q * np.sqrt(np.clip(w, 0.0, None))
    return rng.standard_normal((count, model.d)) @ root.T


def generate(model: SyntheticModel, n: int, d_ambient: Optional[int] = None,
             rng_seed=None) -> Dataset:
    """``n`` draws of ``(X, theta0 . X + eps)``, reproducible from ``rng_seed``."""
    model = model.extend(d_ambient)
    rng = _rng(rng_seed)
    X = _draw_x(model, n, rng)
    eps = rng.standard_normal(n)
    y = X @ model.theta0 + model.sigma_noise * eps
    return Dataset(X, y)


def _eta_from_margin(z, sigma):
    z = np.asarray(z, dtype=float)
    if sigma == 0:
        return np.where(z > 0, 1.0, np.where(z < 0, 0.0, 0.5))
    return special.ndtr(z / (sigma * SQRT2))


def eta(model: SyntheticModel, x, xp):
    """``P(Y > Y' | X = x, X' = x')``."""
    z = (np.asarray(x, dtype=float) - np.asarray(xp, dtype=float)) @ model.theta0
    out = _eta_from_margin(z, model.sigma_noise)
    return float(out) if np.ndim(out) == 0 else out


def bayes_score(model: SyntheticModel, x, xp):
    """``sign(theta0 . (x - x'))`` with ties mapped to ``+1``."""
    z = (np.asarray(x, dtype=float) - np.asarray(xp, dtype=float)) @ model.theta0
    out = np.where(z >= 0, 1.0, -1.0)
    return float(out) if np.ndim(out) == 0 else out


def bayes_conditional_risk(loss: LossSpec, eta_values):
    """Pointwise minimum over ``f`` of ``eta phi(f) + (1 - eta) phi(-f)``."""
    p = np.clip(np.asarray(eta_values, dtype=float), 0.0, 1.0)
    q = 1.0 - p
    if loss.kind == "hinge":
        return 2.0 * np.minimum(p, q)
    if loss.kind == "logistic":
        return special.entr(p) + special.entr(q)
    if loss.kind == "truncated_quadratic":
        return 4.0 * p * q
    return 2.0 * np.sqrt(p * q)


@dataclass
class PairSample:
    """Fresh predictor pairs with their conditional ordering probabilities."""

    X: np.ndarray
    Xp: np.ndarray
    eta: np.ndarray

    @property
    def size(self) -> int:
        return self.X.shape[0]


def draw_pairs(model: SyntheticModel, count: int, rng_seed=None) -> PairSample:
    rng = _rng(rng_seed)
    X = _draw_x(model, count, rng)
    Xp = _draw_x(model, count, rng)
    return PairSample(X, Xp, _eta_from_margin((X - Xp) @ model.theta0, model.sigma_noise))


def conditional_loss(loss: LossSpec, scores, eta_values, mu: float = 0.0, order: int = 0):
    """``eta phi(f) + (1 - eta) phi(-f)`` and optionally its f-derivatives."""
    f = np.asarray(scores, dtype=float)
    plus = loss_arrays(loss, f, mu, order)
    minus = loss_arrays(loss, -f, mu, order)
    out = [eta_values * plus[0] + (1.0 - eta_values) * minus[0]]
    if order >= 1:
        out.append(eta_values * plus[1] - (1.0 - eta_values) * minus[1])
    if order >= 2:
        out.append(eta_values * plus[2] + (1.0 - eta_values) * minus[2])
    return tuple(out)


class PopulationRisk:
    """Monte Carlo surrogate of ``Q(f_theta)`` on a fixed pair sample.

    Optionally restricted to the coordinates in ``support``; ``m`` is then
    the support size and ``embed`` maps back to the full vector.
    """

    has_hessian = True

    def __init__(self, pairs: PairSample, basis: BasisSpec, loss: LossSpec,
                 support=None, psi: Optional[np.ndarray] = None):
        self.loss = loss
        self.smooth = loss.smooth
        self.full_m = basis.m
        self.eta = pairs.eta
        psi = basis.evaluate(pairs.X, pairs.Xp) if psi is None else psi
        self.support = tuple(range(basis.m)) if support is None else tuple(support)
        self.psi = psi[:, list(self.support)]
        self.m = len(self.support)

    def embed(self, theta_s) -> np.ndarray:
        out = np.zeros(self.full_m)
        out[list(self.support)] = theta_s
        return out

    def _eval(self, theta, mu, order):
        f = self.psi @ np.asarray(theta, dtype=float)
        out = conditional_loss(self.loss, f, self.eta, mu, order)
        M = f.shape[0]
        value = float(np.mean(out[0]))
        grad = self.psi.T @ out[1] / M if order >= 1 else None
        hess = (self.psi * out[2][:, None]).T @ self.psi / M if order >= 2 else None
        return value, grad, hess

    def value(self, theta, mu: float = 0.0) -> float:
        return self._eval(theta, mu, 0)[0]

    def value_and_grad(self, theta, mu: float = 0.0):
        return self._eval(theta, mu, 1)[:2]

    def value_grad_hess(self, theta, mu: float = 0.0):
        return self._eval(theta, mu, 2)


# ---------------------------------------------------------------------------
# Reference rules and excess risk
# ---------------------------------------------------------------------------


def _reduced_risk(loss: LossSpec, model: SyntheticModel, c: float) -> float:
    """``Q(c * theta0 . (x - x'))`` by quadrature over ``Z = theta0 . (X - X')``."""
    sd = math.sqrt(2.0 * float(model.theta0 @ model.V @ model.theta0))

    def integrand(z):
        p = _eta_from_margin(z, model.sigma_noise)
        f = c * z
        val = (p * loss_arrays(loss, f, 0.0, 0)[0]
               + (1 - p) * loss_arrays(loss, -f, 0.0, 0)[0])
        return float(val) * math.exp(-0.5 * (z / sd) ** 2) / (sd * math.sqrt(2 * math.pi))

    points = [0.0] if c > 0 else None
    lim = 12.0 * sd
    val, _ = integrate.quad(integrand, -lim, lim, points=points, limit=200,
                            epsabs=1e-13, epsrel=1e-11)
    return val


def best_linear_scale(loss: LossSpec, model: SyntheticModel, c_max: float = 1e3) -> float:
    """``c*`` minimizing ``Q(c * theta0)`` over ``c >= 0``.

    In the Gaussian model the population minimizer over linear rules lies on
    the ray through ``theta0``: the component of ``theta . (X - X')``
    independent of ``theta0 . (X - X')`` only adds convex noise.
    """
    if not np.any(model.theta0):
        raise InvalidArgument("theta0 = 0 has no best linear direction")
    res = optimize.minimize_scalar(lambda c: _reduced_risk(loss, model, c),
                                   bounds=(0.0, c_max), method="bounded",
                                   options={"xatol": 1e-9})
    return float(res.x)


Scorer = Union[np.ndarray, Callable]


def _reference_kind(reference: str, loss: LossSpec, basis: BasisSpec) -> str:
    if reference != "auto":
        if reference not in ("bayes", "best_linear"):
            raise InvalidArgument(f"unknown reference {reference!r}")
        return reference
    if loss.kind != "hinge" and basis.kind == LINEAR:
        return "best_linear"
    return "bayes"


class ExcessRiskEvaluator:
    """Excess risk ``Q(f) - Q(f0)`` on one fixed sample of fresh pairs.

    ``reference`` selects ``f0``: ``bayes`` is the pointwise risk minimizer
    (``sign(theta0 . (x - x'))`` for the hinge); ``best_linear`` is the best
    rule in the linear family, ``c* theta0``; ``auto`` uses ``bayes`` for
    the hinge and ``best_linear`` for smooth losses with the linear basis.
    Reusing one evaluator across fits gives common random numbers.
    """

    def __init__(self, model: SyntheticModel, basis: BasisSpec, loss: LossSpec,
                 mc_pairs: int, rng_seed=None, reference: str = "auto"):
        if mc_pairs < 1000:
            raise InvalidArgument("mc_pairs must be at least 1000")
        model = model.extend(basis.d)
        self.model, self.basis, self.loss = model, basis, loss
        self.reference = _reference_kind(reference, loss, basis)
        self.pairs = draw_pairs(model, mc_pairs, rng_seed)
        self.psi = basis.evaluate(self.pairs.X, self.pairs.Xp)
        if self.reference == "best_linear":
            self.ref_scale = best_linear_scale(loss, model)
            self.ref_theta = self.ref_scale * model.theta0
            f0 = (self.pairs.X - self.pairs.Xp) @ self.ref_theta
            self.ref_loss = conditional_loss(loss, f0, self.pairs.eta)[0]
        else:
            self.ref_scale = None
            self.ref_theta = None
            self.ref_loss = bayes_conditional_risk(loss, self.pairs.eta)

    def risk(self, theta=None, support=None) -> PopulationRisk:
        return PopulationRisk(self.pairs, self.basis, self.loss, support=support,
                              psi=self.psi)

    def scores(self, f: Scorer) -> np.ndarray:
        if callable(f):
            return np.asarray(f(self.pairs.X, self.pairs.Xp), dtype=float)
        return self.psi @ check_theta(f, self.basis)

    def excess(self, f: Scorer, clip: Optional[float] = None) -> tuple:
        """``(estimate, stderr)`` of ``Q(f) - Q(f0)``."""
        scores = self.scores(f)
        if clip is not None:
            scores = np.clip(scores, -clip, clip)
        diff = conditional_loss(self.loss, scores, self.pairs.eta)[0] - self.ref_loss
        M = diff.shape[0]
        return float(np.mean(diff)), float(np.std(diff, ddof=1) / math.sqrt(M))


def excess_risk_mc(theta: Scorer, basis: BasisSpec, loss: LossSpec, model: SyntheticModel,
                   mc_pairs: int, rng_seed=None, reference: str = "auto") -> tuple:
    """Monte Carlo ``(estimate, stderr)`` of ``Q(f_theta) - Q(f0)`` on fresh pairs.

    ``theta`` is a coefficient vector or a scorer ``f(X, X') -> scores``
    evaluated row-wise on arrays of predictor pairs.
    """
    ev = ExcessRiskEvaluator(model, basis, loss, mc_pairs, rng_seed, reference)
    return ev.excess(theta)
