"""Gram matrices, pseudonorms, compatibility constants, margin and oracle.

Compatibility constants use the exact identity
``A(S)^2 = |S| * min { theta' Sigma theta : |theta_S|_1 = 1, |theta_S'|_1 <= 3 }``.
The feasible set is a union over sign patterns ``s`` of the convex sets
``{s . theta_S >= 1, |theta_S'|_1 <= 3 s . theta_S}``, so the search solves
one small convex quadratic program per pattern (half of them, by the
symmetry ``theta -> -theta``).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, optimize, special

from .core import LINEAR, BasisSpec, Dataset, LossSpec, check_theta
from .errors import InsufficientData, InvalidArgument, SizeLimit
from .simulate import ExcessRiskEvaluator, SyntheticModel, bayes_score, _draw_x, _rng
from .solver import SolverOptions, minimize_penalized
from .urisk import _BLOCK_ELEMENTS

EMPIRICAL = "empirical_pairs"
CLOSED_FORM = "closed_form_linear_gaussian"
MONTE_CARLO = "monte_carlo_pairs"
L2 = "l2"
CONDITIONAL = "conditional"
EIGEN = "eigen"
CONE = "cone"
CONE_MAX_M = 30
CONE_EXACT_MAX_S = 10
ORACLE_MAX_SUPPORT = 4
ORACLE_MAX_CANDIDATES = 500


@dataclass(frozen=True)
class GramMatrix:
    sigma: np.ndarray
    source: str
    stderr: Optional[np.ndarray] = None

    def __post_init__(self):
        sigma = np.array(self.sigma, dtype=float)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise InvalidArgument("Gram matrix must be square")
        object.__setattr__(self, "sigma", 0.5 * (sigma + sigma.T))

    @property
    def m(self) -> int:
        return self.sigma.shape[0]

    @property
    def smallest_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.sigma)[0])

    def summary(self) -> dict:
        w = np.linalg.eigvalsh(self.sigma)
        out = {"source": self.source, "m": self.m, "sigma": self.sigma.tolist(),
               "eigenvalue_min": float(w[0]), "eigenvalue_max": float(w[-1])}
        if self.stderr is not None:
            out["stderr"] = self.stderr.tolist()
        return out


def gram_empirical(data: Dataset, basis: BasisSpec) -> GramMatrix:
    """Pair average of ``Psi Psi^T`` with entrywise first-order standard errors."""
    if data.n < 2:
        raise InsufficientData("at least 2 observations are required")
    n = data.n
    if basis.difference_form:
        C = basis.features(data.X)
        C = C - C.mean(axis=0)
        sigma = 2.0 * C.T @ C / (n - 1)
        # leave-one-out Hoeffding projection of (h_i - h_j)(h_i - h_j)' given i,
        # up to a constant: n / (n - 1) C_i C_i'
        proj = (n / (n - 1)) * C[:, :, None] * C[:, None, :]
    else:
        proj = np.zeros((n, basis.m, basis.m))
        block = max(1, _BLOCK_ELEMENTS // max(1, n * basis.m))
        for start in range(0, n, block):
            stop = min(n, start + block)
            psi = basis.evaluate(data.X[start:stop, None, :], data.X[None, :, :])
            outer = np.einsum("ijk,ijl->ikl", psi, psi)
            own = basis.evaluate(data.X[start:stop], data.X[start:stop])
            outer -= np.einsum("ik,il->ikl", own, own)
            proj[start:stop] = outer / (n - 1)
        # the projection of the symmetrized kernel averages both orderings
        sigma = proj.sum(axis=0) / n
        proj = 0.5 * (proj + _column_projection(data, basis))
    stderr = 2.0 * proj.std(axis=0, ddof=1) / math.sqrt(n)
    return GramMatrix(sigma, EMPIRICAL, stderr)


def _column_projection(data, basis):
    n = data.n
    out = np.zeros((n, basis.m, basis.m))
    block = max(1, _BLOCK_ELEMENTS // max(1, n * basis.m))
    for start in range(0, n, block):
        stop = min(n, start + block)
        psi = basis.evaluate(data.X[None, :, :], data.X[start:stop, None, :])
        outer = np.einsum("ijk,ijl->ikl", psi, psi)
        own = basis.evaluate(data.X[start:stop], data.X[start:stop])
        outer -= np.einsum("ik,il->ikl", own, own)
        out[start:stop] = outer / (n - 1)
    return out


def gram_closed_form(model: SyntheticModel, basis: BasisSpec, which: str = L2) -> GramMatrix:
    """``2 V`` for the ``l2`` pseudonorm, ``V`` for the conditional one (linear basis)."""
    if basis.kind != LINEAR:
        raise InvalidArgument("closed-form Gram matrices exist for the linear basis only")
    V = model.extend(basis.d).V
    if which == L2:
        return GramMatrix(2.0 * V, CLOSED_FORM)
    if which == CONDITIONAL:
        return GramMatrix(V.copy(), CLOSED_FORM)
    raise InvalidArgument(f"unknown pseudonorm {which!r}")


def pseudonorm(theta, which: str, model_or_data, basis: Optional[BasisSpec] = None) -> float:
    """``||f_theta||_2`` or the conditional ``||f_theta||_c``.

    With a :class:`SyntheticModel` (linear basis) the closed forms
    ``2 theta' V theta`` and ``theta' V theta`` are used.  With a
    :class:`Dataset`, pair averages over the sample: the conditional norm
    averages the squared leave-one-out means ``mean_{j != i} f(X_i, X_j)``.
    """
    if which not in (L2, CONDITIONAL):
        raise InvalidArgument(f"unknown pseudonorm {which!r}")
    if isinstance(model_or_data, SyntheticModel):
        if basis is not None and basis.kind != LINEAR:
            raise InvalidArgument("model pseudonorms are closed form for the linear basis only")
        theta = np.asarray(theta, dtype=float)
        V = model_or_data.extend(theta.shape[0]).V
        q = float(theta @ V @ theta)
        return math.sqrt(max(0.0, 2.0 * q if which == L2 else q))
    if isinstance(model_or_data, Dataset):
        data = model_or_data
        if basis is None:
            from .core import make_linear_basis
            basis = make_linear_basis(data.d)
        theta = check_theta(theta, basis)
        if which == L2:
            q = float(theta @ gram_empirical(data, basis).sigma @ theta)
            return math.sqrt(max(0.0, q))
        n = data.n
        scores = basis.evaluate(data.X[:, None, :], data.X[None, :, :]) @ theta
        np.fill_diagonal(scores, 0.0)
        means = scores.sum(axis=1) / (n - 1)
        return math.sqrt(float(np.mean(means ** 2)))
    raise InvalidArgument("pseudonorm needs a SyntheticModel or a Dataset")


# ---------------------------------------------------------------------------
# Compatibility constants
# ---------------------------------------------------------------------------


def _cone_qp(sigma, S, rest, signs):
    """``min theta' Sigma theta`` over ``{signs . theta_S >= 1, |theta_rest|_1 <= 3 signs . theta_S}``."""
    s, r = len(S), len(rest)
    idx = list(S) + list(rest)
    P = sigma[np.ix_(idx, idx)]
    # variables: theta_S (s), positive and negative parts of theta_rest (r each)
    E = np.zeros((s + 2 * r, s + r))
    E[:s, :s] = np.eye(s)
    E[s:s + r, s:] = np.eye(r)
    E[s + r:, s:] = -np.eye(r)
    Q = E @ P @ E.T
    a_sign = np.concatenate([signs, np.zeros(2 * r)])
    a_cone = np.concatenate([3.0 * signs, -np.ones(2 * r)])
    x0 = np.concatenate([signs / s, np.zeros(2 * r)])
    res = optimize.minimize(
        lambda z: float(z @ Q @ z), x0, jac=lambda z: 2.0 * Q @ z, method="SLSQP",
        bounds=[(None, None)] * s + [(0.0, None)] * (2 * r),
        constraints=[{"type": "ineq", "fun": lambda z: a_sign @ z - 1.0, "jac": lambda z: a_sign},
                     {"type": "ineq", "fun": lambda z: a_cone @ z, "jac": lambda z: a_cone}],
        options={"ftol": 1e-15, "maxiter": 500})
    z = res.x
    theta = np.zeros(sigma.shape[0])
    theta[list(S)] = z[:s]
    theta[list(rest)] = z[s:s + r] - z[s + r:]
    # normalize onto signs . theta_S = 1 to absorb constraint round-off
    scale = float(signs @ z[:s])
    if scale <= 0:
        return math.inf, theta
    theta /= scale
    return float(theta @ sigma @ theta), theta


def compatibility_constant(sigma, S: Sequence[int], mode: str = CONE,
                           restarts: int = 20, rng_seed=0) -> float:
    """Compatibility constant ``A(S)`` for the Gram matrix ``sigma``.

    ``eigen`` returns ``sqrt(rho_min)``, valid for every ``S``.  ``cone``
    minimizes over the cone exactly for ``|S| <= 10``; for larger ``S`` only
    ``restarts`` random sign patterns are tried, which can overestimate.
    """
    sig = sigma.sigma if isinstance(sigma, GramMatrix) else np.asarray(sigma, dtype=float)
    sig = 0.5 * (sig + sig.T)
    m = sig.shape[0]
    S = sorted({int(k) for k in S})
    if not S:
        raise InvalidArgument("S must be nonempty")
    if S[0] < 0 or S[-1] >= m:
        raise InvalidArgument(f"S must index coordinates 0..{m - 1}")
    rho = float(np.linalg.eigvalsh(sig)[0])
    eigen_bound = math.sqrt(max(rho, 0.0))
    if mode == EIGEN:
        return eigen_bound
    if mode != CONE:
        raise InvalidArgument(f"unknown compatibility mode {mode!r}")
    if m > CONE_MAX_M:
        raise SizeLimit(f"cone search is limited to m <= {CONE_MAX_M}")
    rest = [k for k in range(m) if k not in S]
    s = len(S)
    if s <= CONE_EXACT_MAX_S:
        patterns = [np.array((1.0,) + tail)
                    for tail in itertools.product((1.0, -1.0), repeat=s - 1)]
    else:
        rng = np.random.default_rng(rng_seed)
        patterns = [np.where(rng.random(s) < 0.5, -1.0, 1.0) for _ in range(restarts)]
    best = min(_cone_qp(sig, S, rest, p)[0] for p in patterns)
    cone = math.sqrt(max(best, 0.0) * s)
    # the cone only shrinks the feasible set, so the eigen bound is a floor
    return max(cone, eigen_bound)


# ---------------------------------------------------------------------------
# Margin function and its conjugate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MarginSpec:
    """Power-family margin ``G(u) = a u^(2 / alpha)``."""

    a: float
    alpha: float

    def __post_init__(self):
        if not self.a > 0:
            raise InvalidArgument("margin constant a must be positive")
        if not 0 < self.alpha <= 1:
            raise InvalidArgument("alpha must lie in (0, 1]")

    def G(self, u):
        return self.a * np.asarray(u, dtype=float) ** (2.0 / self.alpha)

    def to_dict(self) -> dict:
        return {"a": self.a, "alpha": self.alpha}


def conjugate_H(margin: MarginSpec) -> Callable:
    """``H(v) = sup_{u >= 0} (u v - G(u))`` in closed form."""
    a, alpha = margin.a, margin.alpha
    coef = (2.0 - alpha) / 2.0 * (alpha / (2.0 * a)) ** (alpha / (2.0 - alpha))
    power = 2.0 / (2.0 - alpha)

    def H(v):
        v = np.asarray(v, dtype=float)
        if np.any(v < 0):
            raise InvalidArgument("H is defined for v >= 0")
        out = coef * v ** power
        return float(out) if out.ndim == 0 else out

    return H


@dataclass
class MarginConstant:
    """``sup_x E_{X'} |2 eta(x, X') - 1|^(-alpha)`` estimates.

    ``estimate`` is the maximum over sampled ``x``; ``sup_global`` maximizes
    over all ``x``; ``mean`` and ``stderr`` describe the sampled values.
    """

    estimate: float
    stderr: float
    mean: float
    sup_global: float
    divergent: bool
    samples: int

    def to_dict(self) -> dict:
        def num(v):
            return None if not math.isfinite(v) else v
        return {"estimate": num(self.estimate), "stderr": num(self.stderr),
                "mean": num(self.mean), "sup_global": num(self.sup_global),
                "divergent": self.divergent, "samples": self.samples}


def _inner_margin_moment(t, alpha, sd, sigma):
    """``E |erf((t - S) / (2 sigma))|^(-alpha)`` for ``S ~ N(0, sd^2)``.

    Integrated over ``u = t - S`` on each side of the integrable
    singularity at ``u = 0``.
    """
    def integrand(u):
        g = abs(special.erf(u / (2.0 * sigma)))
        if g == 0.0:
            return 0.0
        return g ** (-alpha) * math.exp(-0.5 * ((u - t) / sd) ** 2) / (sd * math.sqrt(2 * math.pi))

    lo, hi = t - 12.0 * sd, t + 12.0 * sd
    total = 0.0
    if lo < 0:
        total += integrate.quad(integrand, lo, min(0.0, hi), limit=200, epsabs=1e-12)[0]
    if hi > 0:
        total += integrate.quad(integrand, max(0.0, lo), hi, limit=200, epsabs=1e-12)[0]
    return total


def margin_constant_mc(model: SyntheticModel, alpha: float, mc_samples: int,
                       rng_seed=None) -> MarginConstant:
    """Estimate the margin constant ``B(alpha)`` of the Gaussian model.

    The outer supremum is over ``mc_samples`` sampled ``x``; the inner
    expectation only depends on ``t = theta0 . x`` and is integrated by
    adaptive quadrature (its integrand has infinite variance for
    ``alpha >= 1/2``, ruling out plain Monte Carlo).
    """
    if not 0 < alpha < 1:
        raise InvalidArgument("alpha must lie in (0, 1)")
    if mc_samples < 1:
        raise InvalidArgument("mc_samples must be positive")
    var = float(model.theta0 @ model.V @ model.theta0)
    if var <= 0:
        inf = math.inf
        return MarginConstant(inf, inf, inf, inf, True, mc_samples)
    if model.sigma_noise == 0:
        return MarginConstant(1.0, 0.0, 1.0, 1.0, False, mc_samples)
    sd, sigma = math.sqrt(var), model.sigma_noise
    t = _draw_x(model, mc_samples, _rng(rng_seed)) @ model.theta0
    values = np.array([_inner_margin_moment(ti, alpha, sd, sigma) for ti in t])
    res = optimize.minimize_scalar(lambda u: -_inner_margin_moment(u, alpha, sd, sigma),
                                   bounds=(-6 * sd, 6 * sd), method="bounded")
    sup_global = max(-float(res.fun), _inner_margin_moment(0.0, alpha, sd, sigma),
                     float(values.max()))
    stderr = float(values.std(ddof=1) / math.sqrt(mc_samples)) if mc_samples > 1 else 0.0
    return MarginConstant(float(values.max()), stderr, float(values.mean()),
                          sup_global, False, mc_samples)


def hinge_margin(B_alpha: float, alpha: float) -> MarginSpec:
    """``G(u) = [B(alpha) 2^(2 - alpha)]^(-1 / alpha) u^(2 / alpha)``."""
    return MarginSpec((B_alpha * 2.0 ** (2.0 - alpha)) ** (-1.0 / alpha), alpha)


@dataclass
class MarginReport:
    rows: list
    violations: int
    constant: float
    alpha: float
    B_alpha: float

    def to_dict(self) -> dict:
        return {"violations": self.violations, "constant": self.constant,
                "alpha": self.alpha, "B_alpha": self.B_alpha, "rows": self.rows}


def margin_inequality_check(model: SyntheticModel, theta_samples, alpha: float,
                            B_alpha: float, mc_samples: int, rng_seed=None,
                            inner_samples: int = 64) -> MarginReport:
    """Check the hinge margin inequality on clipped linear scores.

    For each ``theta`` the excess risk ``E |f - f0| |2 eta - 1|`` and the
    conditional pseudonorm ``||f - f0||_c^2`` are estimated from
    ``mc_samples`` outer draws of ``X``, each with ``inner_samples`` draws
    of ``X'``; the squared conditional mean uses the unbiased U-statistic
    ``(sum^2 - sum of squares) / (J (J - 1))``.  A violation is an excess
    risk below the bound by more than 3 combined standard errors.
    """
    if not 0 < alpha <= 1:
        raise InvalidArgument("alpha must lie in (0, 1]")
    if mc_samples < 2 or inner_samples < 2:
        raise InvalidArgument("need at least 2 outer and 2 inner samples")
    thetas = np.atleast_2d(np.asarray(theta_samples, dtype=float))
    model = model.extend(thetas.shape[1])
    rng = _rng(rng_seed)
    K, J = mc_samples, inner_samples
    X = _draw_x(model, K, rng)
    Xp = _draw_x(model, K * J, rng).reshape(K, J, model.d)
    diff = X[:, None, :] - Xp
    z = diff @ model.theta0
    if model.sigma_noise == 0:
        gap = np.where(z != 0, 1.0, 0.0)
    else:
        gap = np.abs(special.erf(z / (2.0 * model.sigma_noise)))
    f0 = bayes_score(model, X[:, None, :], Xp)
    const = (B_alpha * 2.0 ** (2.0 - alpha)) ** (-1.0 / alpha)
    rows = []
    violations = 0
    for theta in thetas:
        f = np.clip(diff @ theta, -1.0, 1.0)
        delta = f - f0
        lhs_k = np.mean(np.abs(delta) * gap, axis=1)
        sums = delta.sum(axis=1)
        norm_k = (sums ** 2 - (delta ** 2).sum(axis=1)) / (J * (J - 1))
        lhs, lhs_se = float(lhs_k.mean()), float(lhs_k.std(ddof=1) / math.sqrt(K))
        norm2, norm2_se = float(norm_k.mean()), float(norm_k.std(ddof=1) / math.sqrt(K))
        base = max(norm2, 0.0)
        rhs = const * base ** (1.0 / alpha)
        rhs_se = const * (1.0 / alpha) * base ** (1.0 / alpha - 1.0) * norm2_se
        combined = math.hypot(lhs_se, rhs_se)
        violated = lhs < rhs - 3.0 * combined
        violations += violated
        rows.append({"theta": theta.tolist(), "excess": lhs, "excess_se": lhs_se,
                     "norm_c_sq": norm2, "norm_c_sq_se": norm2_se, "bound": rhs,
                     "bound_se": rhs_se, "violated": bool(violated)})
    return MarginReport(rows, int(violations), const, alpha, B_alpha)


# ---------------------------------------------------------------------------
# Oracle
# ---------------------------------------------------------------------------


def all_supports(m: int, max_size: int, include_empty: bool = True) -> list:
    sizes = range(0 if include_empty else 1, max_size + 1)
    return [tuple(c) for k in sizes for c in itertools.combinations(range(m), k)]


@dataclass
class OracleResult:
    theta_star: np.ndarray
    S_star: tuple
    A_star: float
    epsilon_star: float
    delta: float
    approx: float
    approx_stderr: float
    H_term: float
    lambda_n: float
    margin: MarginSpec
    table: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"theta_star": self.theta_star.tolist(), "S_star": list(self.S_star),
                "A_star": self.A_star if math.isfinite(self.A_star) else None,
                "epsilon_star": self.epsilon_star, "delta": self.delta,
                "approx": self.approx, "approx_stderr": self.approx_stderr,
                "H_term": self.H_term, "lambda_n": self.lambda_n,
                "margin": self.margin.to_dict(), "supports": self.table}


def _oracle_gram(evaluator: ExcessRiskEvaluator, basis: BasisSpec, norm: str) -> np.ndarray:
    if basis.kind == LINEAR:
        return gram_closed_form(evaluator.model, basis, norm).sigma
    if norm != L2:
        raise InvalidArgument("the conditional pseudonorm needs the linear basis")
    psi = evaluator.psi
    return psi.T @ psi / psi.shape[0]


def oracle_search(model: SyntheticModel, basis: BasisSpec, loss: LossSpec, lambda_n: float,
                  delta: float, margin: MarginSpec, candidate_supports, inner_mc: int,
                  rng_seed=None, norm: str = CONDITIONAL, reference: str = "auto",
                  opts: Optional[SolverOptions] = None,
                  evaluator: Optional[ExcessRiskEvaluator] = None) -> OracleResult:
    """Minimize ``(1 + 4 delta) [Q(f) - Q(f0)] + 8 delta H(lambda_n sqrt|S| / (delta A(S)))``.

    The population risk is replaced by a Monte Carlo surrogate on
    ``inner_mc`` fresh pairs shared by all supports.  Supports are visited
    in increasing order of their ``H`` term; once that term alone reaches
    the best criterion the remaining supports cannot win and are skipped.
    The empty support is allowed (``H(0) = 0``, ``A = inf``); supports
    with ``A(S) = 0`` violate the compatibility condition and are excluded.
    """
    if not 0 < delta < 0.25:
        raise InvalidArgument("delta must lie in (0, 1/4)")
    if lambda_n < 0:
        raise InvalidArgument("lambda_n must be nonnegative")
    supports = [tuple(sorted({int(k) for k in S})) for S in candidate_supports]
    if not supports:
        raise InvalidArgument("candidate_supports is empty")
    if len(supports) > ORACLE_MAX_CANDIDATES or max(len(S) for S in supports) > ORACLE_MAX_SUPPORT:
        raise SizeLimit(f"oracle search is limited to {ORACLE_MAX_CANDIDATES} supports "
                        f"of size <= {ORACLE_MAX_SUPPORT}")
    if any(S and (S[0] < 0 or S[-1] >= basis.m) for S in supports):
        raise InvalidArgument(f"supports must index coordinates 0..{basis.m - 1}")
    if evaluator is None:
        evaluator = ExcessRiskEvaluator(model, basis, loss, inner_mc, rng_seed, reference)
    sigma = _oracle_gram(evaluator, basis, norm)
    H = conjugate_H(margin)

    candidates = []
    for S in supports:
        if not S:
            candidates.append((0.0, S, math.inf))
            continue
        A = compatibility_constant(sigma, S, CONE)
        if A <= 0:
            continue
        candidates.append((8.0 * delta * H(lambda_n * math.sqrt(len(S)) / (delta * A)), S, A))
    if not candidates:
        raise InvalidArgument("no candidate support satisfies the compatibility condition")
    candidates.sort(key=lambda c: (c[0], len(c[1]), c[1]))

    opts = opts or SolverOptions()
    best = None
    table = []
    for h_term, S, A in candidates:
        row = {"support": list(S), "A": A if math.isfinite(A) else None, "H_term": h_term}
        if best is not None and h_term >= best["criterion"]:
            row["pruned"] = True
            table.append(row)
            continue
        if S:
            risk = evaluator.risk(support=S)
            theta_s = minimize_penalized(risk, 0.0, np.zeros(len(S)), opts)[0]
            theta = risk.embed(theta_s)
        else:
            theta = np.zeros(basis.m)
        approx, approx_se = evaluator.excess(theta)
        criterion = (1.0 + 4.0 * delta) * approx + h_term
        row.update({"approx": approx, "approx_stderr": approx_se, "criterion": criterion,
                    "pruned": False})
        table.append(row)
        if best is None or criterion < best["criterion"]:
            best = {"criterion": criterion, "theta": theta, "S": S, "A": A,
                    "approx": approx, "approx_se": approx_se, "H_term": h_term}
    return OracleResult(theta_star=best["theta"], S_star=best["S"], A_star=best["A"],
                        epsilon_star=best["criterion"], delta=delta, approx=best["approx"],
                        approx_stderr=best["approx_se"], H_term=best["H_term"],
                        lambda_n=float(lambda_n), margin=margin, table=table)
