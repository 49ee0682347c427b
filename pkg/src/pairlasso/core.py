"""Datasets, base-function families, ranking scores and convex losses.

A ranking rule is a linear combination ``f_theta(x, x') = sum_k theta_k psi_k(x, x')``
of base functions on pairs of predictor vectors.  Its sign predicts which of
two objects has the larger response.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import DataFormatError, InvalidArgument

HINGE = "hinge"
LOGISTIC = "logistic"
TRUNCATED_QUADRATIC = "truncated_quadratic"
EXPONENTIAL = "exponential"

LOSS_KINDS = (HINGE, LOGISTIC, TRUNCATED_QUADRATIC, EXPONENTIAL)

LINEAR = "linear"
CUSTOM = "custom"


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """``n`` observations of a ``d``-vector of predictors and a real response."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        y = np.array(self.y, dtype=float).reshape(-1)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2:
            raise InvalidArgument("X must be a 2-d array")
        if X.shape[0] != y.shape[0]:
            raise InvalidArgument(
                f"X has {X.shape[0]} rows but y has {y.shape[0]} entries")
        if X.shape[0] < 2:
            raise InvalidArgument("a dataset needs at least 2 observations")
        if X.shape[1] < 1:
            raise InvalidArgument("a dataset needs at least 1 predictor")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise InvalidArgument("dataset entries must be finite")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.X[index], self.y[index])

    def permuted(self, order) -> "Dataset":
        return self.subset(order)


def read_dataset_csv(path) -> Dataset:
    """Read a dataset with header ``x1,...,xd,y``.

    Raises
    ------
    DataFormatError
        On a missing ``y`` column, ragged rows or non-numeric cells; the
        message carries the 1-based line number.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("empty file", line=1) from None
        header = [h.strip() for h in header]
        if len(header) < 2 or header[-1] != "y":
            raise DataFormatError(
                "header must be x1,...,xd,y with the response column last "
                "and named 'y'", line=1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(
                    f"expected {len(header)} fields, found {len(row)}",
                    line=lineno)
            try:
                values = [float(c) for c in row]
            except ValueError:
                raise DataFormatError(f"non-numeric value in row {row!r}",
                                      line=lineno) from None
            if not all(math.isfinite(v) for v in values):
                raise DataFormatError("non-finite value", line=lineno)
            rows.append(values)
    if len(rows) < 2:
        raise DataFormatError("need at least 2 observations")
    arr = np.asarray(rows, dtype=float)
    return Dataset(arr[:, :-1], arr[:, -1])


def write_dataset_csv(data: Dataset, path) -> None:
    header = [f"x{k + 1}" for k in range(data.d)] + ["y"]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for xi, yi in zip(data.X, data.y):
            writer.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])


# ---------------------------------------------------------------------------
# Base functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BasisSpec:
    """The family ``psi_1, ..., psi_m`` of base functions on predictor pairs.

    ``evaluator(x, xp)`` must broadcast over leading axes of arrays whose last
    axis has length ``d`` and return an array whose last axis has length
    ``m``.  Bases of difference form ``psi(x, x') = h(x) - h(x')`` also carry
    the row map ``h`` as ``feature_map``; pair sums over such bases take a
    fast path that only needs ``h(X) @ theta``.
    """

    kind: str
    m: int
    d: int
    evaluator: Callable = field(repr=False, compare=False)
    feature_map: Optional[Callable] = field(default=None, repr=False,
                                            compare=False)
    name: str = LINEAR

    def __post_init__(self):
        if self.kind not in (LINEAR, CUSTOM):
            raise InvalidArgument(f"unknown basis kind {self.kind!r}")
        if self.m < 1:
            raise InvalidArgument("a basis needs m >= 1 base functions")
        if self.kind == LINEAR and self.m != self.d:
            raise InvalidArgument("the linear basis has m = d")

    @property
    def difference_form(self) -> bool:
        return self.feature_map is not None

    def evaluate(self, x, xp) -> np.ndarray:
        """Vector ``Psi(x, x')`` of all base functions (broadcasting)."""
        x = np.asarray(x, dtype=float)
        xp = np.asarray(xp, dtype=float)
        if x.shape[-1] != self.d or xp.shape[-1] != self.d:
            raise InvalidArgument(
                f"predictor vectors must have length {self.d}, got "
                f"{x.shape[-1]} and {xp.shape[-1]}")
        out = np.asarray(self.evaluator(x, xp), dtype=float)
        if out.shape[-1] != self.m:
            raise InvalidArgument("basis evaluator returned wrong length")
        return out

    def features(self, X) -> np.ndarray:
        """Row map ``h(X)`` of a difference-form basis, shape ``(n, m)``."""
        if self.feature_map is None:
            raise InvalidArgument(f"basis {self.name!r} is not of difference form")
        return np.asarray(self.feature_map(np.asarray(X, dtype=float)), dtype=float)


def make_linear_basis(d: int) -> BasisSpec:
    """Linear ranking rules: ``psi_k(x, x') = x_k - x'_k`` with ``m = d``."""
    if int(d) != d or d < 1:
        raise InvalidArgument(f"d must be a positive integer, got {d!r}")
    d = int(d)
    return BasisSpec(kind=LINEAR, m=d, d=d,
                     evaluator=lambda x, xp: x - xp,
                     feature_map=lambda X: X,
                     name=LINEAR)


def make_custom_basis(d: int, m: int, evaluator: Callable, name: str = CUSTOM,
                      feature_map: Optional[Callable] = None) -> BasisSpec:
    """Wrap a user-supplied deterministic evaluator as a basis."""
    return BasisSpec(kind=CUSTOM, m=int(m), d=int(d), evaluator=evaluator,
                     feature_map=feature_map, name=name)


def _quadratic_features(X):
    return np.concatenate([X, X * X], axis=-1)


def make_named_basis(name: str, d: int) -> BasisSpec:
    """Built-in bases available from the command line.

    ``linear``     ``x_k - x'_k`` (m = d)
    ``quadratic``  ``x_k - x'_k`` followed by ``x_k^2 - x'_k^2`` (m = 2d)
    ``sign``       ``sign(x_k - x'_k)`` (m = d)
    """
    if name == LINEAR:
        return make_linear_basis(d)
    if name == "quadratic":
        return make_custom_basis(
            d, 2 * d,
            lambda x, xp: _quadratic_features(x) - _quadratic_features(xp),
            name="quadratic", feature_map=_quadratic_features)
    if name == "sign":
        return make_custom_basis(d, d, lambda x, xp: np.sign(x - xp), name="sign")
    raise InvalidArgument(f"unknown basis {name!r}; choose linear, quadratic or sign")


def check_theta(theta, basis: BasisSpec) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape[0] != basis.m:
        raise InvalidArgument(
            f"theta has length {theta.shape[0]}, basis has m = {basis.m}")
    if not np.all(np.isfinite(theta)):
        raise InvalidArgument("theta must be finite")
    return theta


def support(theta) -> tuple:
    """Indices of the nonzero coordinates (0-based)."""
    return tuple(int(k) for k in np.flatnonzero(np.asarray(theta) != 0))


def score(theta, basis: BasisSpec, x, xp) -> float:
    """Ranking score ``f_theta(x, x')``; positive predicts ``y > y'``."""
    theta = check_theta(theta, basis)
    return float(basis.evaluate(x, xp) @ theta)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossSpec:
    """Convex, nonnegative loss ``phi`` applied to ``sign(y - y') f(x, x')``.

    Hinge and logistic losses are globally 1-Lipschitz.  The truncated
    quadratic and exponential losses are Lipschitz only on bounded sets, so
    they require ``sup_bound``, a bound on ``|f_theta|`` from which the
    constant is computed.
    """

    kind: str
    sup_bound: Optional[float] = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise InvalidArgument(
                f"unknown loss {self.kind!r}; choose one of {', '.join(LOSS_KINDS)}")
        if self.kind in (TRUNCATED_QUADRATIC, EXPONENTIAL):
            if self.sup_bound is None:
                raise InvalidArgument(
                    f"the {self.kind} loss is not globally Lipschitz; "
                    "pass sup_bound (a bound on |f_theta|)")
            if not self.sup_bound > 0 or not math.isfinite(self.sup_bound):
                raise InvalidArgument("sup_bound must be a positive finite number")

    @property
    def lipschitz(self) -> float:
        if self.kind in (HINGE, LOGISTIC):
            return 1.0
        if self.kind == TRUNCATED_QUADRATIC:
            return 2.0 * (1.0 + self.sup_bound)
        return math.exp(self.sup_bound)

    @property
    def smooth(self) -> bool:
        return self.kind != HINGE

    @property
    def domain(self) -> tuple:
        """Interval of ``t`` on which ``lipschitz`` is valid."""
        if self.sup_bound is None:
            return (-math.inf, math.inf)
        return (-self.sup_bound, self.sup_bound)

    def value(self, t):
        return loss_value(self, t)

    def subgradient(self, t):
        return loss_subgradient(self, t)


def make_loss(kind: str, sup_bound: Optional[float] = None) -> LossSpec:
    aliases = {"truncquad": TRUNCATED_QUADRATIC, "exp": EXPONENTIAL}
    return LossSpec(aliases.get(kind, kind), sup_bound)


def _scalar_or_array(out, t):
    return float(out) if np.ndim(t) == 0 else out


def loss_value(loss: LossSpec, t):
    """``phi(t)``, vectorized over ``t``."""
    t = np.asarray(t, dtype=float)
    if loss.kind == HINGE:
        out = np.maximum(0.0, 1.0 - t)
    elif loss.kind == LOGISTIC:
        out = np.logaddexp(0.0, -t)
    elif loss.kind == TRUNCATED_QUADRATIC:
        out = np.maximum(0.0, 1.0 - t) ** 2
    else:
        out = np.exp(-t)
    return _scalar_or_array(out, t)


def loss_subgradient(loss: LossSpec, t):
    """One element of the subdifferential of ``phi`` at ``t``.

    At the hinge kink ``t = 1`` the element 0 is returned.
    """
    t = np.asarray(t, dtype=float)
    if loss.kind == HINGE:
        out = np.where(t < 1.0, -1.0, 0.0)
    elif loss.kind == LOGISTIC:
        # -1 / (1 + e^t), written to avoid overflow
        out = -0.5 * (1.0 - np.tanh(0.5 * t))
    elif loss.kind == TRUNCATED_QUADRATIC:
        out = -2.0 * np.maximum(0.0, 1.0 - t)
    else:
        out = -np.exp(-t)
    return _scalar_or_array(out, t)


def pair_sign(y, yp):
    """``sign(y - y')`` with ``sign(0) = 0``."""
    return np.sign(np.asarray(y, dtype=float) - np.asarray(yp, dtype=float))


def pairwise_loss(loss: LossSpec, theta, basis: BasisSpec, z, zp) -> float:
    """``phi(sign(y - y') f_theta(x, x'))`` for observations ``z = (x, y)``."""
    (x, y), (xp, yp) = z, zp
    f = score(theta, basis, np.atleast_1d(x), np.atleast_1d(xp))
    return float(loss_value(loss, float(pair_sign(y, yp)) * f))
