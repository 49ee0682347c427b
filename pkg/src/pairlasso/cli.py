"""Command-line interface: fit, rank, tune, diagnose, simulate, rates, oracle-inequality.

Parameters come from built-in defaults, then an optional ``--config`` JSON
file, then explicit flags.  Every output records the resolved parameters
and seed.  Exit codes: 0 success, 2 usage or data error, 3 size limit.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import LINEAR, LOSS_KINDS, make_loss, make_named_basis, read_dataset_csv, write_dataset_csv
from .errors import InvalidArgument, PairLassoError, SizeLimit

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SIZE = 3


class ConfigError(InvalidArgument):
    def __init__(self, name, message):
        super().__init__(f"invalid config field '{name}': {message}")
        self.field = name


# ---------------------------------------------------------------------------
# Field validators
# ---------------------------------------------------------------------------


def _int(minimum=None):
    def check(name, v):
        if isinstance(v, bool) or not isinstance(v, (int, float, str)):
            raise ConfigError(name, "expected an integer")
        try:
            out = int(v)
        except (TypeError, ValueError):
            raise ConfigError(name, "expected an integer") from None
        if isinstance(v, float) and v != out:
            raise ConfigError(name, "expected an integer")
        if minimum is not None and out < minimum:
            raise ConfigError(name, f"must be at least {minimum}")
        return out
    return check


def _float(minimum=None, strict=False, maximum=None):
    def check(name, v):
        if isinstance(v, bool):
            raise ConfigError(name, "expected a number")
        try:
            out = float(v)
        except (TypeError, ValueError):
            raise ConfigError(name, "expected a number") from None
        if not math.isfinite(out):
            raise ConfigError(name, "must be finite")
        if minimum is not None and (out <= minimum if strict else out < minimum):
            raise ConfigError(name, f"must be {'>' if strict else '>='} {minimum}")
        if maximum is not None and out > maximum:
            raise ConfigError(name, f"must be <= {maximum}")
        return out
    return check


def _optional(check):
    def wrapped(name, v):
        return None if v is None else check(name, v)
    return wrapped


def _choice(*options):
    def check(name, v):
        if v not in options:
            raise ConfigError(name, f"must be one of {', '.join(map(str, options))}")
        return v
    return check


def _loss_kind(name, v):
    aliases = {"truncquad": "truncated_quadratic", "exp": "exponential"}
    v = aliases.get(v, v)
    if v not in LOSS_KINDS:
        raise ConfigError(name, f"must be one of {', '.join(LOSS_KINDS)}")
    return v


def _lambda_spec(name, v):
    if v in ("auto", "cv"):
        return v
    return _float(0.0)(name, v)


def _int_list(minimum):
    def check(name, v):
        if isinstance(v, str):
            v = [part for part in v.split(",") if part.strip()]
        if not isinstance(v, (list, tuple)) or not v:
            raise ConfigError(name, "expected a nonempty list of integers")
        return [_int(minimum)(name, item) for item in v]
    return check


def _vector(name, v):
    if isinstance(v, str):
        v = [part for part in v.split(",") if part.strip()]
    if not isinstance(v, (list, tuple)) or not v:
        raise ConfigError(name, "expected a nonempty list of numbers")
    return [_float()(name, item) for item in v]


def _matrix(name, v):
    if v is None or v == "identity":
        return None
    try:
        arr = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(name, "expected a square matrix or 'identity'") from None
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or not np.all(np.isfinite(arr)):
        raise ConfigError(name, "expected a finite square matrix or 'identity'")
    return arr.tolist()


def _supports(name, v):
    if v is None:
        return None
    if not isinstance(v, list) or not all(isinstance(s, list) for s in v):
        raise ConfigError(name, "expected a list of index lists")
    return [[_int(0)(name, k) for k in s] for s in v]


def _string(name, v):
    if not isinstance(v, str):
        raise ConfigError(name, "expected a string")
    return v


# name -> (validator, default)
COMMON = {
    "seed": (_int(0), 0),
    "threads": (_int(1), 1),
}
SOLVER = {
    "max_iters": (_int(1), 50_000),
    "tol": (_float(0.0, strict=True), 1e-8),
    "step_rule": (_choice("auto", "newton", "backtracking", "sqrt"), "auto"),
    "initial_step": (_float(0.0, strict=True), 1.0),
}
LOSS = {
    "loss": (_loss_kind, "hinge"),
    "sup_bound": (_optional(_float(0.0, strict=True)), None),
}
MODEL = {
    "theta0": (_vector, [1.0]),
    "V": (_matrix, None),
    "sigma": (_float(0.0), 1.0),
}

SCHEMAS = {
    "fit": {**COMMON, **SOLVER, **LOSS,
            "basis": (_choice("linear", "quadratic", "sign"), "linear"),
            "lambda": (_lambda_spec, "auto"),
            "weights": (_choice("none", "normalize"), "none"),
            "B": (_float(0.0, strict=True), 998.0),
            "cv_folds": (_int(2), 5),
            "cv_grid": (_optional(_string), None),
            "cv_grid_count": (_int(1), 20),
            "cv_grid_ratio": (_float(0.0, strict=True), 1e-4)},
    "rank": {**COMMON},
    "tune": {**COMMON, **SOLVER, **LOSS,
             "basis": (_choice("linear", "quadratic", "sign"), "linear"),
             "B": (_float(0.0, strict=True), 998.0),
             "cv_folds": (_int(2), 5),
             "lambda_grid": (_optional(_string), None),
             "weights": (_choice("none", "normalize"), "none")},
    "simulate": {**COMMON, **MODEL,
                 "n": (_int(2), 100),
                 "d_ambient": (_optional(_int(1)), None)},
    "diagnose": {**COMMON, **MODEL, **LOSS,
                 "m": (_optional(_int(2)), None),
                 "data": (_optional(_string), None),
                 "supports": (_supports, None),
                 "alpha": (_float(0.0, strict=True, maximum=1.0), 0.5),
                 "margin_samples": (_int(1), 200),
                 "margin_thetas": (_int(0), 50),
                 "margin_mc": (_int(2), 2000),
                 "oracle": (_choice(True, False), True),
                 "oracle_max_support": (_int(0), 2),
                 "lambda_n": (_optional(_float(0.0)), None),
                 "B": (_float(0.0, strict=True), 998.0),
                 "n": (_int(2), 200),
                 "delta": (_float(0.0, strict=True, maximum=0.25), 0.1),
                 "mc_pairs": (_int(1000), 50_000)},
    "rates": {**COMMON, **MODEL, **LOSS,
              "n_grid": (_int_list(2), [100, 200, 400]),
              "m_grid": (_int_list(2), [10]),
              "lambda_mode": (_choice("cv", "formula"), "cv"),
              "B": (_float(0.0, strict=True), 998.0),
              "replications": (_int(1), 20),
              "cv_folds": (_int(2), 5),
              "cv_grid_size": (_int(1), 10),
              "cv_grid_ratio": (_float(0.0, strict=True), 1e-3),
              "mc_pairs": (_int(1000), 200_000),
              "reference": (_choice("auto", "bayes", "best_linear"), "auto"),
              "tau": (_optional(_float(0.0)), None),
              "oracle": (_choice("auto", "search", "true_support"), "auto"),
              "oracle_max_support": (_int(0), 3),
              "delta": (_float(0.0, strict=True, maximum=0.25), 0.1),
              "margin_a": (_float(0.0, strict=True), 1.0),
              "alpha": (_float(0.0, strict=True, maximum=1.0), 1.0)},
    "oracle-inequality": {**COMMON, **LOSS,
                 "n": (_int(2), 200), "m": (_int(2), 10), "s": (_int(0), 2),
                 "amplitude": (_float(), 1.0), "sigma": (_float(0.0), 1.0),
                 "B": (_float(0.0, strict=True), 998.0),
                 "delta": (_float(0.0, strict=True, maximum=0.25), 0.1),
                 "alpha": (_float(0.0, strict=True, maximum=1.0), 0.5),
                 "max_support": (_int(0), 3),
                 "replications": (_int(1), 200),
                 "mc_pairs": (_int(1000), 200_000)},
}


def resolve_config(command: str, file_values: dict, flag_values: dict) -> dict:
    """Merge defaults, config-file values and flags; validate every field."""
    schema = SCHEMAS[command]
    for source in (file_values, flag_values):
        for key in source:
            if key not in schema:
                raise ConfigError(key, f"unknown field for '{command}'")
    out = {}
    for key, (check, default) in schema.items():
        if key in flag_values and flag_values[key] is not None:
            value = flag_values[key]
        elif key in file_values:
            value = file_values[key]
        else:
            out[key] = default
            continue
        out[key] = check(key, value)
    return out


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            values = json.load(fh)
    except OSError as exc:
        raise InvalidArgument(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InvalidArgument(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(values, dict):
        raise InvalidArgument("config file must hold a JSON object")
    return values


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _clean(obj):
    """Replace non-finite floats by None so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)) and not math.isfinite(obj):
        return None
    return obj


def _write_json(payload: dict, path) -> None:
    text = json.dumps(_clean(payload), indent=2, default=_json_default, allow_nan=False)
    if path is None:
        print(text)
    else:
        Path(path).write_text(text + "\n")


def _envelope(command, config, extra=None) -> dict:
    out = {"command": command, "version": __version__, "config": config,
           "seed": config.get("seed"), "threads": config.get("threads")}
    if extra:
        out.update(extra)
    return out


def _solver_options(config):
    from .solver import SolverOptions
    return SolverOptions(max_iters=config["max_iters"], step_rule=config["step_rule"],
                         initial_step=config["initial_step"], tol=config["tol"])


def _model(config):
    from .simulate import SyntheticModel
    theta0 = np.asarray(config["theta0"], dtype=float)
    V = np.eye(theta0.shape[0]) if config["V"] is None else np.asarray(config["V"])
    if V.shape[0] != theta0.shape[0]:
        raise ConfigError("V", f"must be {theta0.shape[0]} x {theta0.shape[0]} to match theta0")
    return SyntheticModel(theta0, V, config["sigma"])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_fit(args, config) -> int:
    from .solver import fit_lasso
    from .tuning import (cross_validate_lambda, default_cv_grid, estimate_C_hat, lambda_hat,
                         normalization_weights, parse_lambda_grid, check_envelope)

    data = read_dataset_csv(args.data)
    basis = make_named_basis(config["basis"], data.d)
    loss = make_loss(config["loss"], config["sup_bound"])
    opts = _solver_options(config)
    weights = normalization_weights(data, basis) if config["weights"] == "normalize" else None
    C_hat = estimate_C_hat(data, basis)
    lam_formula = lambda_hat(C_hat, loss.lipschitz, data.n, basis.m, config["B"]) \
        if basis.m >= 2 else None
    cv_table = None
    if config["lambda"] == "auto":
        if lam_formula is None:
            raise ConfigError("lambda", "'auto' needs m >= 2")
        lam = lam_formula
    elif config["lambda"] == "cv":
        if config["cv_grid"] is not None:
            grid = parse_lambda_grid(config["cv_grid"])
        else:
            if lam_formula is None:
                raise ConfigError("cv_grid", "required when m < 2")
            grid = default_cv_grid(lam_formula, config["cv_grid_count"], config["cv_grid_ratio"])
        lam, cv_table = cross_validate_lambda(
            data, basis, loss, grid, config["cv_folds"], rng_seed=config["seed"],
            weights="normalize" if config["weights"] == "normalize" else None, opts=opts,
            threads=config["threads"])
    else:
        lam = config["lambda"]
    fit = fit_lasso(data, basis, loss, lam, weights, opts)
    envelope = None
    if basis.m >= 2:
        ok, observed = check_envelope(data, basis)
        envelope = {"ok": bool(ok), "max_observed": observed,
                    "threshold": math.sqrt(data.n / math.log(basis.m))}
        if not ok:
            print("warning: observed base-function envelope exceeds sqrt(n / log m)",
                  file=sys.stderr)
    payload = _envelope("fit", config, {
        "data": str(args.data), "n": data.n, "d": data.d,
        "basis": {"name": basis.name, "m": basis.m},
        "lambda": lam, "lambda_formula": lam_formula, "C_hat": C_hat,
        "envelope": envelope, "result": fit.to_dict(), "cv": cv_table})
    _write_json(payload, args.out)
    return EXIT_OK


def _read_pairs(path, d):
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                values = [float(c) for c in row]
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise InvalidArgument(f"line {lineno}: non-numeric value") from None
            if len(values) != 2 * d:
                raise InvalidArgument(
                    f"line {lineno}: expected {2 * d} values (x then x'), found {len(values)}")
            rows.append(values)
    arr = np.asarray(rows, dtype=float).reshape(-1, 2 * d)
    return arr[:, :d], arr[:, d:]


def order_label(score: float) -> str:
    if score > 0:
        return "first"
    if score < 0:
        return "second"
    return "tie"


def cmd_rank(args, config) -> int:
    try:
        result = json.loads(Path(args.result).read_text())
        theta = np.asarray(result["result"]["theta_hat"], dtype=float)
        basis_name = result["config"]["basis"]
        d = int(result["d"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InvalidArgument(f"cannot read fit result {args.result}: {exc}") from None
    basis = make_named_basis(basis_name, d)
    X, Xp = _read_pairs(args.pairs, d)
    scores = basis.evaluate(X, Xp) @ theta if X.shape[0] else np.zeros(0)
    rows = [{"score": float(s), "label": order_label(float(s))} for s in scores]
    payload = _envelope("rank", config, {"result_file": str(args.result),
                                         "pairs_file": str(args.pairs),
                                         "fit_config": result.get("config"), "rows": rows})
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["score", "label"])
            for r in rows:
                writer.writerow([repr(r["score"]), r["label"]])
    _write_json(payload, args.out)
    return EXIT_OK


def cmd_tune(args, config) -> int:
    from .tuning import cross_validate_lambda, parse_lambda_grid, tune

    data = read_dataset_csv(args.data)
    basis = make_named_basis(config["basis"], data.d)
    if basis.m < 2:
        raise InvalidArgument("tuning formulas need m >= 2 base functions (log m > 0)")
    loss = make_loss(config["loss"], config["sup_bound"])
    report = tune(data, basis, loss, config["B"])
    extra = {"data": str(args.data), "n": data.n, "d": data.d,
             "basis": {"name": basis.name, "m": basis.m}, "report": report.to_dict()}
    if config["lambda_grid"] is not None:
        grid = parse_lambda_grid(config["lambda_grid"])
        best, table = cross_validate_lambda(
            data, basis, loss, grid, config["cv_folds"], rng_seed=config["seed"],
            weights="normalize" if config["weights"] == "normalize" else None,
            opts=_solver_options(config), threads=config["threads"])
        extra["cv"] = {"best_lambda": best, "table": table}
    _write_json(_envelope("tune", config, extra), args.out)
    return EXIT_OK


def cmd_simulate(args, config) -> int:
    from .simulate import generate

    model = _model(config)
    if config["d_ambient"] is not None and config["d_ambient"] < model.d:
        raise ConfigError("d_ambient", "must be at least the length of theta0")
    data = generate(model, config["n"], config["d_ambient"], rng_seed=config["seed"])
    write_dataset_csv(data, args.out)
    meta = Path(args.out).with_suffix(".json") if args.meta is None else Path(args.meta)
    _write_json(_envelope("simulate", config, {"output": str(args.out),
                                               "model": model.to_dict()}), meta)
    return EXIT_OK


def cmd_diagnose(args, config) -> int:
    from .core import make_linear_basis
    from .diagnostics import (CONDITIONAL, EIGEN, CONE, L2, all_supports, compatibility_constant,
                              conjugate_H, gram_closed_form, gram_empirical, hinge_margin,
                              margin_constant_mc, margin_inequality_check, oracle_search)
    from .simulate import generate
    from .tuning import C_true_linear_gaussian, lambda_theoretical

    base = _model(config)
    m = config["m"] or max(base.d, 2)
    if m < base.d:
        raise ConfigError("m", "must be at least the length of theta0")
    model = base.extend(m)
    basis = make_linear_basis(m)
    loss = make_loss(config["loss"], config["sup_bound"])
    seed = config["seed"]
    if config["data"] is not None:
        data = read_dataset_csv(config["data"])
        if data.d != m:
            raise ConfigError("data", f"has d = {data.d}, expected m = {m}")
    else:
        data = generate(model, config["n"], rng_seed=seed)
    gram_hat = gram_empirical(data, basis)
    gram_true = gram_closed_form(model, basis, L2)
    supports = config["supports"] or [list(model.true_support) or [0]]
    for S in supports:
        if any(k >= m for k in S):
            raise ConfigError("supports", f"indices must be below m = {m}")
    compat = []
    for S in supports:
        if not S:
            continue
        compat.append({"support": S,
                       "empirical": {"eigen": compatibility_constant(gram_hat, S, EIGEN),
                                     "cone": compatibility_constant(gram_hat, S, CONE)},
                       "model": {"eigen": compatibility_constant(gram_true, S, EIGEN),
                                 "cone": compatibility_constant(gram_true, S, CONE)}})
    report = {"gram_empirical": gram_hat.summary(), "gram_model": gram_true.summary(),
              "compatibility": compat, "model": model.to_dict()}
    alpha = config["alpha"]
    if alpha < 1:
        B_alpha = margin_constant_mc(model, alpha, config["margin_samples"], seed)
        report["margin_constant"] = B_alpha.to_dict()
        if not B_alpha.divergent:
            margin = hinge_margin(B_alpha.sup_global, alpha)
            H = conjugate_H(margin)
            report["margin"] = {**margin.to_dict(), "H_coefficient": H(1.0),
                                "H_exponent": 2.0 / (2.0 - alpha)}
            if config["margin_thetas"]:
                rng = np.random.default_rng(seed)
                thetas = rng.standard_normal((config["margin_thetas"], m))
                rep = margin_inequality_check(model, thetas, alpha, B_alpha.sup_global,
                                              config["margin_mc"], rng_seed=seed)
                report["margin_check"] = rep.to_dict()
            if config["oracle"]:
                lam_n = config["lambda_n"]
                if lam_n is None:
                    lam_n = lambda_theoretical(C_true_linear_gaussian(model.V), loss.lipschitz,
                                               config["n"], m, config["B"])
                oracle = oracle_search(model, basis, loss, lam_n, config["delta"], margin,
                                       all_supports(m, config["oracle_max_support"]),
                                       config["mc_pairs"], rng_seed=seed, norm=CONDITIONAL)
                report["oracle"] = oracle.to_dict()
    _write_json(_envelope("diagnose", config, {"report": report}), args.out)
    return EXIT_OK


def cmd_rates(args, config) -> int:
    from .diagnostics import MarginSpec
    from .experiments import RateSweepConfig, run_rate_sweep

    sweep = RateSweepConfig(
        n_grid=config["n_grid"], m_grid=config["m_grid"], model=_model(config),
        loss=make_loss(config["loss"], config["sup_bound"]),
        lambda_mode=config["lambda_mode"], B=config["B"],
        replications=config["replications"], seed=config["seed"],
        cv_folds=config["cv_folds"], cv_grid_size=config["cv_grid_size"],
        cv_grid_ratio=config["cv_grid_ratio"], mc_pairs=config["mc_pairs"],
        reference=config["reference"], tau=config["tau"], oracle=config["oracle"],
        oracle_max_support=config["oracle_max_support"], delta=config["delta"],
        margin=MarginSpec(config["margin_a"], config["alpha"]))
    if min(sweep.m_grid) < sweep.model.d:
        raise ConfigError("m_grid", "every m must be at least the length of theta0")
    result = run_rate_sweep(sweep)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.write_csv(out_dir / "records.csv")
    with open(out_dir / "medians.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["m", "n", "median_excess", "fitted"])
        for m, n, med, fitted in result.medians_rows():
            writer.writerow([m, n, repr(med), "" if fitted is None else repr(fitted)])
    summary = _envelope("rates", config, {"summary": result.summary,
                                          "records_file": "records.csv",
                                          "medians_file": "medians.csv"})
    _write_json(summary, out_dir / "summary.json")
    return EXIT_OK


def cmd_oracle_inequality(args, config) -> int:
    from .experiments import OracleInequalityConfig, oracle_inequality_frequency

    cfg = OracleInequalityConfig(n=config["n"], m=config["m"], s=config["s"],
                         amplitude=config["amplitude"], sigma=config["sigma"],
                         loss=make_loss(config["loss"], config["sup_bound"]), B=config["B"],
                         delta=config["delta"], alpha=config["alpha"],
                         max_support=config["max_support"],
                         replications=config["replications"], seed=config["seed"],
                         mc_pairs=config["mc_pairs"])
    if cfg.s > cfg.m:
        raise ConfigError("s", "must not exceed m")
    _write_json(_envelope("oracle-inequality", config, {"report": oracle_inequality_frequency(cfg)}), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_common(p):
    p.add_argument("--config", help="JSON file with parameters (flags take precedence)")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--threads", type=int, help="worker threads (default 1)")


def _add_solver(p):
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--step-rule", dest="step_rule")
    p.add_argument("--initial-step", dest="initial_step", type=float)


def _add_loss(p):
    p.add_argument("--loss", help=f"one of {', '.join(LOSS_KINDS)}")
    p.add_argument("--sup-bound", dest="sup_bound", type=float,
                   help="bound on |f| (required by truncated_quadratic and exponential)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pairlasso", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit the penalized pairwise ranking rule")
    p.add_argument("data", help="CSV with header x1,...,xd,y")
    _add_common(p)
    _add_solver(p)
    _add_loss(p)
    p.add_argument("--lambda", dest="lambda", help="auto, cv or a nonnegative number")
    p.add_argument("--weights", help="none or normalize")
    p.add_argument("--basis", help="linear, quadratic or sign")
    p.add_argument("--B", dest="B", type=float, help="constant in the lambda formula")
    p.add_argument("--cv-folds", dest="cv_folds", type=int)
    p.add_argument("--cv-grid", dest="cv_grid",
                   help="comma-separated values or logspace(a,b,count)")
    p.add_argument("--out", help="output JSON (default stdout)")
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("rank", help="score pairs with a fitted rule")
    p.add_argument("result", help="JSON written by 'fit'")
    p.add_argument("pairs", help="CSV rows of x followed by x'")
    _add_common(p)
    p.add_argument("--out", help="output JSON (default stdout)")
    p.add_argument("--csv", help="also write score,label rows to this CSV")
    p.set_defaults(handler=cmd_rank)

    p = sub.add_parser("tune", help="tuning constants, envelope check and optional CV")
    p.add_argument("data", help="CSV with header x1,...,xd,y")
    _add_common(p)
    _add_solver(p)
    _add_loss(p)
    p.add_argument("--basis")
    p.add_argument("--B", dest="B", type=float)
    p.add_argument("--cv-folds", dest="cv_folds", type=int)
    p.add_argument("--lambda-grid", dest="lambda_grid",
                   help="comma-separated values or logspace(a,b,count)")
    p.add_argument("--weights")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_tune)

    p = sub.add_parser("simulate", help="draw a dataset from the Gaussian linear model")
    _add_common(p)
    p.add_argument("--theta0", help="comma-separated coefficients")
    p.add_argument("--sigma", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--d-ambient", dest="d_ambient", type=int)
    p.add_argument("--out", required=True, help="output dataset CSV")
    p.add_argument("--meta", help="metadata JSON (default: next to --out)")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("diagnose", help="Gram, compatibility, margin and oracle report")
    _add_common(p)
    _add_loss(p)
    p.add_argument("--theta0")
    p.add_argument("--sigma", type=float)
    p.add_argument("--m", type=int)
    p.add_argument("--data")
    p.add_argument("--alpha", type=float)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_diagnose)

    p = sub.add_parser("rates", help="rate sweep over n and m")
    _add_common(p)
    _add_loss(p)
    p.add_argument("--n-grid", dest="n_grid")
    p.add_argument("--m-grid", dest="m_grid")
    p.add_argument("--replications", type=int)
    p.add_argument("--lambda-mode", dest="lambda_mode")
    p.add_argument("--mc-pairs", dest="mc_pairs", type=int)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(handler=cmd_rates)

    p = sub.add_parser("oracle-inequality", help="frequency of the oracle inequalities")
    _add_common(p)
    _add_loss(p)
    p.add_argument("--n", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--replications", type=int)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_oracle_inequality)
    return parser


_NON_CONFIG = {"command", "handler", "config", "out", "csv", "meta", "out_dir", "data",
               "result", "pairs"}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        flags = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}
        if args.command == "diagnose" and args.data is not None:
            flags["data"] = args.data
        config = resolve_config(args.command, _load_config(args.config), flags)
        return args.handler(args, config)
    except SizeLimit as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SIZE
    except (PairLassoError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
