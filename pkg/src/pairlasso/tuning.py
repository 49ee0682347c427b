"""Smoothing-parameter formulas, normalization weights and cross-validation."""

from __future__ import annotations

import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .core import LINEAR, BasisSpec, Dataset, LossSpec
from .errors import InsufficientData, InvalidArgument
from .solver import SolverOptions, fit_path
from .urisk import _BLOCK_ELEMENTS, empirical_risk_u

DEFAULT_B = 998.0
LAMBDA_FLOOR = 6.0


def pair_second_moments(data: Dataset, basis: BasisSpec) -> np.ndarray:
    """Per-coordinate U-statistics ``1/(n(n-1)) sum_{i != j} psi_k(X_i, X_j)^2``."""
    if data.n < 2:
        raise InsufficientData("at least 2 observations are required")
    n = data.n
    if basis.difference_form:
        H = basis.features(data.X)
        # sum_{i != j} (h_i - h_j)^2 = 2 n sum_i (h_i - mean)^2
        centered = H - H.mean(axis=0)
        return 2.0 * np.einsum("ik,ik->k", centered, centered) / (n - 1)
    total = np.zeros(basis.m)
    block = max(1, _BLOCK_ELEMENTS // max(1, n * basis.m))
    for start in range(0, n, block):
        stop = min(n, start + block)
        psi = basis.evaluate(data.X[start:stop, None, :], data.X[None, :, :])
        # diagonal pairs (i, i) contribute psi(x, x)^2, removed below
        total += np.einsum("ijk,ijk->k", psi, psi)
        diag = basis.evaluate(data.X[start:stop], data.X[start:stop])
        total -= np.einsum("ik,ik->k", diag, diag)
    return total / (n * (n - 1))


def estimate_C_hat(data: Dataset, basis: BasisSpec) -> float:
    return float(math.sqrt(pair_second_moments(data, basis).max()))


def normalization_weights(data: Dataset, basis: BasisSpec) -> np.ndarray:
    """``w_k`` = root of the pair second moment of ``psi_k``; ``max_k w_k`` is ``C_hat``."""
    return np.sqrt(pair_second_moments(data, basis))


def _lambda_formula(C, L, n, m, B):
    if m < 2:
        raise InvalidArgument("m must be at least 2 so that log m > 0")
    if n < 2:
        raise InvalidArgument("n must be at least 2")
    if not (B > 0 and L > 0):
        raise InvalidArgument("B and L must be positive")
    if not C >= 0:
        raise InvalidArgument("C must be nonnegative")
    return B * L * math.sqrt(math.log(m) / n) * max(C, LAMBDA_FLOOR)


def lambda_hat(C_hat: float, L: float, n: int, m: int, B: float = DEFAULT_B) -> float:
    """Data-driven smoothing parameter ``B L sqrt(ln m / n) max(C_hat, 6)``."""
    return _lambda_formula(C_hat, L, n, m, B)


def lambda_theoretical(C: float, L: float, n: int, m: int, B: float = DEFAULT_B) -> float:
    """Same formula with the population constant ``C``."""
    return _lambda_formula(C, L, n, m, B)


def envelope_threshold(n: int, m: int) -> float:
    if m < 2:
        raise InvalidArgument("m must be at least 2 so that log m > 0")
    return math.sqrt(n / math.log(m))


def envelope_max(data: Dataset, basis: BasisSpec) -> float:
    """Largest ``|psi_k(X_i, X_j)|`` over observed ordered pairs."""
    if basis.difference_form:
        H = basis.features(data.X)
        return float((H.max(axis=0) - H.min(axis=0)).max())
    n = data.n
    best = 0.0
    block = max(1, _BLOCK_ELEMENTS // max(1, n * basis.m))
    for start in range(0, n, block):
        stop = min(n, start + block)
        psi = np.abs(basis.evaluate(data.X[start:stop, None, :], data.X[None, :, :]))
        rows = np.arange(stop - start)
        psi[rows, np.arange(start, stop)] = 0.0
        best = max(best, float(psi.max()))
    return best


def check_envelope(data: Dataset, basis: BasisSpec, n: Optional[int] = None,
                   m: Optional[int] = None) -> tuple:
    """``(ok, max_observed)``: observed envelope against ``sqrt(n / ln m)``.

    The observed maximum only lower-bounds the true supremum, so this is a
    warning signal, never a hard failure.
    """
    n = data.n if n is None else n
    m = basis.m if m is None else m
    observed = envelope_max(data, basis)
    return observed <= envelope_threshold(n, m), observed


def C_true_linear_gaussian(V) -> float:
    """``C`` for the linear basis under ``Var(X) = V``: ``E(X_k - X'_k)^2 = 2 V_kk``."""
    V = np.asarray(V, dtype=float)
    return float(math.sqrt(2.0 * np.diag(V).max()))


@dataclass
class TuningReport:
    C_hat: float
    C_true: Optional[float]
    lambda_hat: float
    lambda_theoretical: Optional[float]
    B: float
    L: float
    envelope_ok: bool
    envelope_max: float
    envelope_threshold: float
    weights: list

    def to_dict(self) -> dict:
        return asdict(self)


def tune(data: Dataset, basis: BasisSpec, loss: LossSpec, B: float = DEFAULT_B,
         model=None) -> TuningReport:
    """All data-driven tuning quantities; population ones when ``model`` is given."""
    moments = pair_second_moments(data, basis)
    C_hat = float(math.sqrt(moments.max()))
    L = loss.lipschitz
    lam = lambda_hat(C_hat, L, data.n, basis.m, B)
    C_true = lam_true = None
    if model is not None and basis.kind == LINEAR:
        V = model.extend(basis.d).V
        C_true = C_true_linear_gaussian(V)
        lam_true = lambda_theoretical(C_true, L, data.n, basis.m, B)
    ok, observed = check_envelope(data, basis)
    return TuningReport(C_hat, C_true, lam, lam_true, float(B), float(L), bool(ok),
                        observed, envelope_threshold(data.n, basis.m),
                        np.sqrt(moments).tolist())


_LOGSPACE = re.compile(r"^\s*logspace\(\s*([^,]+),\s*([^,]+),\s*([^,)]+)\)\s*$")


def parse_lambda_grid(text: str) -> list:
    """``"0.1,0.2,1"`` or ``"logspace(a,b,count)"`` (``count`` points from 10^a to 10^b)."""
    match = _LOGSPACE.match(text)
    try:
        if match:
            a, b, count = float(match[1]), float(match[2]), int(match[3])
            if count < 1:
                raise InvalidArgument("logspace count must be positive")
            grid = np.logspace(a, b, count).tolist()
        else:
            grid = [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise InvalidArgument(f"cannot parse lambda grid {text!r}") from exc
    if not grid:
        raise InvalidArgument("lambda grid is empty")
    if any(not (math.isfinite(v) and v >= 0) for v in grid):
        raise InvalidArgument("lambda grid values must be finite and nonnegative")
    return grid


def default_cv_grid(lam_hat: float, count: int = 20, ratio: float = 1e-4) -> list:
    """``count`` log-spaced values from ``lam_hat * ratio`` up to ``lam_hat``."""
    return np.geomspace(lam_hat * ratio, lam_hat, count).tolist()


def cross_validate_lambda(data: Dataset, basis: BasisSpec, loss: LossSpec,
                          lambda_grid: Sequence[float], K: int = 5, rng_seed=None,
                          weights=None, opts: Optional[SolverOptions] = None,
                          threads: int = 1) -> tuple:
    """K-fold selection of ``lambda`` by held-out U-statistic risk.

    Observations (never pairs) are split into folds, so held-out pairs only
    involve held-out points.  ``weights`` may be ``None``, a fixed vector, or
    ``"normalize"`` to recompute normalization weights on each training part.
    Folds run on up to ``threads`` threads; results do not depend on it.
    Returns ``(best_lambda, table)``; ties go to the larger ``lambda``.
    """
    grid = [float(v) for v in lambda_grid]
    if not grid:
        raise InvalidArgument("lambda grid is empty")
    if K < 2:
        raise InvalidArgument("K must be at least 2")
    if isinstance(weights, str) and weights != "normalize":
        raise InvalidArgument(f"unknown weights option {weights!r}")
    order = np.random.default_rng(rng_seed).permutation(data.n)
    folds = np.array_split(order, K)
    if min(len(f) for f in folds) < 2:
        raise InvalidArgument(
            f"{K} folds of {data.n} observations leave a fold with fewer than 2")

    def fold_risks(held):
        mask = np.ones(data.n, dtype=bool)
        mask[held] = False
        train, test = data.subset(np.flatnonzero(mask)), data.subset(np.sort(held))
        w = normalization_weights(train, basis) if isinstance(weights, str) else weights
        fits = fit_path(train, basis, loss, grid, w, opts)
        return [empirical_risk_u(fit.theta_hat, basis, loss, test).value for fit in fits]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            risks = np.array(list(pool.map(fold_risks, folds)))
    else:
        risks = np.array([fold_risks(held) for held in folds])
    mean = risks.mean(axis=0)
    best = min(range(len(grid)), key=lambda g: (mean[g], -grid[g]))
    table = [{"lambda": grid[g], "mean_risk": float(mean[g]),
              "fold_risks": risks[:, g].tolist()} for g in range(len(grid))]
    return grid[best], table


def lambda_sandwich_frequency(model, n: int, m: int, replications: int, rng_seed=None,
                              B: float = DEFAULT_B, L: float = 1.0) -> dict:
    """Frequency of ``lambda_n / 2 <= lambda_hat <= 2 lambda_n`` for the linear basis."""
    from .core import make_linear_basis
    from .simulate import generate

    model = model.extend(m)
    basis = make_linear_basis(m)
    lam_n = lambda_theoretical(C_true_linear_gaussian(model.V), L, n, m, B)
    hits = 0
    ratios = []
    for seed in np.random.SeedSequence(rng_seed).spawn(replications):
        data = generate(model, n, rng_seed=seed)
        lam = lambda_hat(estimate_C_hat(data, basis), L, n, m, B)
        ratios.append(lam / lam_n)
        hits += lam_n / 2 <= lam <= 2 * lam_n
    return {"frequency": hits / replications, "lambda_n": lam_n,
            "ratio_min": float(min(ratios)), "ratio_max": float(max(ratios)),
            "replications": replications}
