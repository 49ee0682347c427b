"""Rate sweeps and oracle-inequality frequency experiments on synthetic data."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .core import LossSpec, make_linear_basis, make_loss
from .diagnostics import (CONDITIONAL, ORACLE_MAX_CANDIDATES, ORACLE_MAX_SUPPORT,
                          MarginSpec, all_supports, hinge_margin, margin_constant_mc,
                          oracle_search)
from .errors import InvalidArgument
from .simulate import (ExcessRiskEvaluator, SyntheticModel, _reference_kind, generate,
                       sparse_model)
from .solver import (SolverOptions, fit_lasso, lambda_max, minimize_penalized,
                     threshold_support)
from .tuning import (DEFAULT_B, C_true_linear_gaussian, cross_validate_lambda,
                     estimate_C_hat, lambda_hat, lambda_theoretical)

CV = "cv"
FORMULA = "formula"
RECORD_FIELDS = ("n", "m", "s", "replicate", "excess_risk", "excess_stderr",
                 "l1_to_oracle", "recovered", "lambda", "seed")


def derived_seed(seed: int, *key: int) -> int:
    """Independent 63-bit seed for the stream labelled by ``key``."""
    seq = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass
class RateSweepConfig:
    n_grid: list
    m_grid: list
    model: SyntheticModel
    loss: LossSpec
    lambda_mode: str = CV
    B: float = DEFAULT_B
    replications: int = 20
    seed: int = 0
    cv_folds: int = 5
    cv_grid_size: int = 10
    cv_grid_ratio: float = 1e-3
    mc_pairs: int = 200_000
    reference: str = "auto"
    tau: Optional[float] = None
    oracle: str = "auto"
    oracle_max_support: int = 3
    delta: float = 0.1
    margin: MarginSpec = field(default_factory=lambda: MarginSpec(1.0, 1.0))

    def validate(self):
        if not self.n_grid or not self.m_grid:
            raise InvalidArgument("n_grid and m_grid must be nonempty")
        if self.replications < 1:
            raise InvalidArgument("replications must be positive")
        if self.lambda_mode not in (CV, FORMULA):
            raise InvalidArgument(f"unknown lambda_mode {self.lambda_mode!r}")
        if self.oracle not in ("auto", "search", "true_support"):
            raise InvalidArgument(f"unknown oracle mode {self.oracle!r}")
        if min(self.m_grid) < max(2, self.model.d):
            raise InvalidArgument("every m must be at least 2 and at least the model dimension")
        if min(self.n_grid) < 2 * self.cv_folds and self.lambda_mode == CV:
            raise InvalidArgument("every n must allow at least 2 observations per fold")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["model"] = self.model.to_dict()
        out["loss"] = {"kind": self.loss.kind, "sup_bound": self.loss.sup_bound}
        out["margin"] = self.margin.to_dict()
        return out


@dataclass
class RateRecord:
    n: int
    m: int
    s: int
    replicate: int
    excess_risk: float
    excess_stderr: float
    l1_to_oracle: float
    recovered: bool
    lam: float
    seed: int

    def row(self) -> list:
        return [self.n, self.m, self.s, self.replicate, repr(self.excess_risk),
                repr(self.excess_stderr), repr(self.l1_to_oracle), int(self.recovered),
                repr(self.lam), self.seed]


@dataclass
class RateSweepResult:
    records: list
    summary: dict

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(RECORD_FIELDS)
            for rec in self.records:
                writer.writerow(rec.row())

    def medians_rows(self) -> list:
        """Plot-ready ``(m, n, median_excess, fitted)`` rows."""
        rows = []
        for cell in self.summary["cells"]:
            slope = cell.get("slope")
            for n, med in zip(cell["n"], cell["median_excess"]):
                fitted = None
                if slope is not None:
                    fitted = math.exp(cell["intercept"] + slope * math.log(n))
                rows.append((cell["m"], n, med, fitted))
        return rows


def fit_log_slope(n_values, medians) -> dict:
    """Least-squares slope of ``log median`` against ``log n``."""
    pts = [(math.log(n), math.log(v)) for n, v in zip(n_values, medians) if v > 0]
    out = {"slope": None, "intercept": None, "flags": []}
    if len(pts) < len(n_values):
        out["flags"].append("nonpositive medians excluded")
    if len(set(p[0] for p in pts)) < 2:
        out["flags"].append("insufficient grid")
        return out
    x, y = np.array(pts).T
    slope, intercept = np.polyfit(x, y, 1)
    out["slope"], out["intercept"] = float(slope), float(intercept)
    return out


def _solver_opts() -> SolverOptions:
    return SolverOptions()


def _choose_lambda(data, basis, loss, config, seed):
    if config.lambda_mode == FORMULA:
        return lambda_hat(estimate_C_hat(data, basis), loss.lipschitz, data.n, basis.m,
                          config.B)
    top = lambda_max(data, basis, loss)
    grid = np.geomspace(top, top * config.cv_grid_ratio, config.cv_grid_size).tolist()
    best, _ = cross_validate_lambda(data, basis, loss, grid, config.cv_folds,
                                    rng_seed=seed, opts=_solver_opts())
    return best


def _true_support_oracle(evaluator, model):
    S = model.true_support
    if not S:
        return np.zeros(evaluator.basis.m)
    risk = evaluator.risk(support=S)
    theta_s = minimize_penalized(risk, 0.0, np.zeros(len(S)), _solver_opts())[0]
    return risk.embed(theta_s)


def run_rate_sweep(config: RateSweepConfig) -> RateSweepResult:
    """Fit, score and summarize every ``(n, m, replicate)`` cell.

    Excess risks for all fits with the same ``m`` share one Monte Carlo pair
    sample.  ``l1_to_oracle`` uses the oracle search when it is feasible
    (``oracle`` = ``auto`` or ``search``) and otherwise the minimizer of the
    Monte Carlo risk on the true support, flagged in the summary.
    """
    config.validate()
    records = []
    cells = []
    oracle_info = []
    for m in config.m_grid:
        model = config.model.extend(m)
        basis = make_linear_basis(m)
        evaluator = ExcessRiskEvaluator(model, basis, config.loss, config.mc_pairs,
                                        derived_seed(config.seed, 0, m), config.reference)
        supports = all_supports(m, config.oracle_max_support)
        feasible = (len(supports) <= ORACLE_MAX_CANDIDATES
                    and config.oracle_max_support <= ORACLE_MAX_SUPPORT)
        use_search = config.oracle == "search" or (config.oracle == "auto" and feasible)
        fallback = None if use_search else _true_support_oracle(evaluator, model)
        medians = []
        for n in config.n_grid:
            if use_search:
                C = C_true_linear_gaussian(model.V)
                lam_n = lambda_theoretical(C, config.loss.lipschitz, n, m, config.B)
                oracle = oracle_search(model, basis, config.loss, lam_n, config.delta,
                                       config.margin, supports, config.mc_pairs,
                                       norm=CONDITIONAL, evaluator=evaluator,
                                       opts=_solver_opts())
                theta_star = oracle.theta_star
                oracle_info.append({"m": m, "n": n, "mode": "search",
                                    "S_star": list(oracle.S_star),
                                    "epsilon_star": oracle.epsilon_star})
            else:
                theta_star = fallback
                oracle_info.append({"m": m, "n": n, "mode": "true_support_fallback",
                                    "S_star": list(model.true_support)})
            nonzero = np.abs(theta_star[theta_star != 0])
            tau = config.tau if config.tau is not None else (
                0.5 * float(nonzero.min()) if nonzero.size else 0.0)
            target = tuple(int(k) for k in np.flatnonzero(theta_star))
            excesses = []
            for rep in range(config.replications):
                seed = derived_seed(config.seed, n, m, rep)
                data = generate(model, n, rng_seed=seed)
                lam = _choose_lambda(data, basis, config.loss, config, seed + 1)
                fit = fit_lasso(data, basis, config.loss, lam, opts=_solver_opts())
                exc, se = evaluator.excess(fit.theta_hat)
                excesses.append(exc)
                records.append(RateRecord(
                    n=n, m=m, s=len(model.true_support), replicate=rep, excess_risk=exc,
                    excess_stderr=se,
                    l1_to_oracle=float(np.abs(fit.theta_hat - theta_star).sum()),
                    recovered=threshold_support(fit.theta_hat, tau) == target,
                    lam=float(lam), seed=seed))
            medians.append(float(np.median(excesses)))
        fit_info = fit_log_slope(config.n_grid, medians)
        cells.append({"m": m, "n": list(config.n_grid), "median_excess": medians,
                      **fit_info})
    summary = {"config": config.to_dict(), "seed": config.seed, "cells": cells,
               "oracle": oracle_info,
               "reference": _reference_label(config)}
    return RateSweepResult(records, summary)


def _reference_label(config) -> str:
    return _reference_kind(config.reference, config.loss, make_linear_basis(config.model.d))


@dataclass
class OracleInequalityConfig:
    n: int = 200
    m: int = 10
    s: int = 2
    amplitude: float = 1.0
    sigma: float = 1.0
    loss: LossSpec = field(default_factory=lambda: make_loss("hinge"))
    B: float = DEFAULT_B
    delta: float = 0.1
    alpha: float = 0.5
    margin: Optional[MarginSpec] = None
    max_support: int = 3
    replications: int = 200
    seed: int = 0
    mc_pairs: int = 200_000
    margin_samples: int = 200

    def to_dict(self) -> dict:
        out = asdict(self)
        out["loss"] = {"kind": self.loss.kind, "sup_bound": self.loss.sup_bound}
        out["margin"] = None if self.margin is None else self.margin.to_dict()
        return out


def oracle_inequality_frequency(config: OracleInequalityConfig) -> dict:
    """Fraction of replicates satisfying either oracle inequality.

    With the default hinge loss the margin function comes from the model's
    margin constant, ``G(u) = [B(alpha) 2^(2 - alpha)]^(-1/alpha) u^(2/alpha)``
    on the conditional pseudonorm.  All risks use one shared pair sample.
    """
    if not 0 < config.delta < 0.25:
        raise InvalidArgument("delta must lie in (0, 1/4)")
    model = sparse_model(config.m, config.s, config.amplitude, config.sigma)
    basis = make_linear_basis(config.m)
    loss = config.loss
    margin = config.margin
    B_alpha = None
    if margin is None:
        B_alpha = margin_constant_mc(model, config.alpha, config.margin_samples,
                                     derived_seed(config.seed, 1)).sup_global
        margin = hinge_margin(B_alpha, config.alpha)
    evaluator = ExcessRiskEvaluator(model, basis, loss, config.mc_pairs,
                                    derived_seed(config.seed, 0))
    C = C_true_linear_gaussian(model.V)
    lam_n = lambda_theoretical(C, loss.lipschitz, config.n, config.m, config.B)
    supports = all_supports(config.m, config.max_support)
    oracle = oracle_search(model, basis, loss, lam_n, config.delta, margin, supports,
                           config.mc_pairs, evaluator=evaluator)
    eps = oracle.epsilon_star
    d = config.delta
    rows = []
    for rep in range(config.replications):
        seed = derived_seed(config.seed, 2, rep)
        data = generate(model, config.n, rng_seed=seed)
        lam = lambda_hat(estimate_C_hat(data, basis), loss.lipschitz, data.n, basis.m,
                         config.B)
        fit = fit_lasso(data, basis, loss, lam)
        exc, se = evaluator.excess(fit.theta_hat)
        l1 = float(np.abs(fit.theta_hat - oracle.theta_star).sum())
        first = (1 - 4 * d) * exc + lam * l1 <= 2 * eps
        second = exc + lam * l1 <= 4 * eps
        hi = exc + 3 * se
        conservative = ((1 - 4 * d) * hi + lam * l1 <= 2 * eps) or (hi + lam * l1 <= 4 * eps)
        rows.append({"replicate": rep, "seed": seed, "lambda_hat": lam, "excess": exc,
                     "excess_stderr": se, "l1_to_oracle": l1, "first": bool(first),
                     "second": bool(second), "holds": bool(first or second),
                     "holds_conservative": bool(conservative),
                     "sandwich": bool(lam_n / 2 <= lam <= 2 * lam_n)})
    holds = sum(r["holds"] for r in rows)
    return {"config": config.to_dict(), "seed": config.seed,
            "frequency": holds / config.replications,
            "frequency_conservative": sum(r["holds_conservative"] for r in rows)
            / config.replications,
            "bound": 1 - 3 / config.m ** 2, "lambda_n": lam_n, "B_alpha": B_alpha,
            "margin": margin.to_dict(), "oracle": oracle.to_dict(), "replicates": rows}
