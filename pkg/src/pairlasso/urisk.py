"""Empirical pairwise risks.

``Q_n(f) = 1/(n(n-1)) sum_{i != j} phi(sign(Y_i - Y_j) f(X_i, X_j))`` is a
U-statistic over all ordered pairs of distinct indices.  The half-sample
estimator pairs ``Z_i`` with ``Z_{N+i}`` for ``N = n // 2``; averaging it over
all ``n!`` reorderings of the sample recovers ``Q_n`` exactly.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .core import BasisSpec, Dataset, LossSpec, check_theta, pair_sign
from .errors import InsufficientData, InvalidArgument, SizeLimit

PERMUTATION_LIMIT = 7
_BLOCK_ELEMENTS = 1 << 20
_CACHE_PAIRS = 1 << 23


@dataclass(frozen=True)
class RiskValue:
    value: float
    pair_count: int


def _require_pairs(data: Dataset):
    if data.n < 2:
        raise InsufficientData("at least 2 observations are required")


def loss_arrays(loss: LossSpec, t, mu: float = 0.0, order: int = 1):
    """``phi`` and its first ``order`` derivatives at ``t``.

    ``mu > 0`` replaces the hinge by its Huber smoothing (within ``mu / 2``
    below the hinge); smooth losses ignore ``mu``.  At the hinge kink the
    derivative 0 is used.
    """
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return tuple(arr[0] for arr in loss_arrays(loss, t[None], mu, order))
    kind = loss.kind
    if kind == "hinge":
        a = 1.0 - t
        if mu > 0:
            val = np.where(a <= 0, 0.0, np.where(a >= mu, a - 0.5 * mu, a * a / (2 * mu)))
            der = -np.clip(a / mu, 0.0, 1.0)
            curv = np.where((a > 0) & (a < mu), 1.0 / mu, 0.0)
        else:
            val = np.maximum(0.0, a)
            der = np.where(a > 0, -1.0, 0.0)
            curv = np.zeros_like(t)
    elif kind == "logistic":
        e = np.exp(-np.abs(t))
        val = np.log1p(e)
        val += np.maximum(-t, 0.0)
        if order >= 1:
            # with e = exp(-|t|): phi' = -e / (1 + e) for t > 0, -1 / (1 + e) otherwise
            inv = 1.0 / (1.0 + e)
            der = np.where(t > 0, e, 1.0)
            der *= -inv
        if order >= 2:
            curv = e * inv * inv
    elif kind == "truncated_quadratic":
        a = np.maximum(0.0, 1.0 - t)
        val = a * a
        der = -2.0 * a
        curv = np.where(a > 0, 2.0, 0.0)
    else:
        val = np.exp(-t)
        der = -val
        curv = val
    if order == 0:
        return (val,)
    if order == 1:
        return val, der
    return val, der, curv


class PairRisk:
    """``theta -> Q_n(f_theta)`` on a fixed sample, with derivatives.

    ``value``, ``value_and_grad`` and ``value_grad_hess`` accept a smoothing
    parameter ``mu`` that swaps the hinge for its Huber smoothing; smooth
    losses ignore it.  Pair sums are streamed over blocks of rows, never
    materializing all ``n^2`` pairs.  For difference-form bases the ordered
    pairs ``(i, j)`` and ``(j, i)`` carry identical terms, so only ``i < j``
    is visited.  Row sums are combined with ``math.fsum``.
    """

    partitions = 1

    def __init__(self, data: Dataset, basis: BasisSpec, loss: LossSpec):
        _require_pairs(data)
        if data.d != basis.d:
            raise InvalidArgument(
                f"data has d = {data.d} predictors, basis expects {basis.d}")
        self.data = data
        self.basis = basis
        self.loss = loss
        self.smooth = loss.smooth
        self.m = basis.m
        n = data.n
        self.pair_count = n * (n - 1)
        self._H = basis.features(data.X) if basis.difference_form else None
        self._blocks = None

    @property
    def has_hessian(self) -> bool:
        return True

    def value(self, theta, mu: float = 0.0) -> float:
        return self._evaluate(theta, mu, 0)[0]

    def value_and_grad(self, theta, mu: float = 0.0):
        return self._evaluate(theta, mu, 1)[:2]

    def value_grad_hess(self, theta, mu: float = 0.0):
        return self._evaluate(theta, mu, 2)

    def _evaluate(self, theta, mu, order):
        theta = np.asarray(theta, dtype=float)
        if self._H is not None:
            return self._evaluate_difference(theta, mu, order)
        return self._evaluate_blocks(theta, mu, order)

    def _sign_blocks(self):
        """Row blocks ``(a, b, s, live)`` of the strict upper triangle.

        ``s`` holds ``sign(y_i - y_j)`` for ``j > i`` and 0 elsewhere; cached
        when the triangle is small enough.
        """
        if self._blocks is not None:
            yield from self._blocks
            return
        y = self.data.y
        n = y.shape[0]
        block = max(8, min(256, _BLOCK_ELEMENTS // max(1, n)))
        idx = np.arange(n)
        cache = [] if n * n <= _CACHE_PAIRS else None
        for a in range(0, n - 1, block):
            b = min(n - 1, a + block)
            upper = idx[None, a + 1:] > idx[a:b, None]
            s = np.sign(y[a:b, None] - y[None, a + 1:]) * upper
            item = (a, b, s, np.abs(s), int(np.count_nonzero(upper & (s == 0))))
            if cache is not None:
                cache.append(item)
            yield item
        if cache is not None:
            self._blocks = cache

    def _evaluate_difference(self, theta, mu, order):
        H = self._H
        u = H @ theta
        n = u.shape[0]
        rowsums = []
        r = np.zeros(n) if order >= 1 else None
        if order >= 2:
            deg = np.zeros(n)
            WH = np.zeros_like(H)
        phi0 = None
        for a, b, s, live, ties in self._sign_blocks():
            t = s * (u[a:b, None] - u[None, a + 1:])
            out = loss_arrays(self.loss, t, mu, order)
            rowsums.extend((out[0] * live).sum(axis=1).tolist())
            # ties contribute phi(0) but no gradient or curvature (s = 0)
            if ties:
                if phi0 is None:
                    phi0 = float(loss_arrays(self.loss, np.zeros(1), mu, 0)[0][0])
                rowsums.append(phi0 * ties)
            if order >= 1:
                c = out[1] * s
                r[a:b] += c.sum(axis=1)
                r[a + 1:] -= c.sum(axis=0)
            if order >= 2:
                W = out[2] * live
                deg[a:b] += W.sum(axis=1)
                deg[a + 1:] += W.sum(axis=0)
                WH[a:b] += W @ H[a + 1:]
                WH[a + 1:] += W.T @ H[a:b]
        scale = 2.0 / self.pair_count
        value = scale * math.fsum(rowsums)
        grad = scale * (H.T @ r) if order >= 1 else None
        hess = None
        if order >= 2:
            hess = scale * ((H * deg[:, None]).T @ H - H.T @ WH)
            hess = 0.5 * (hess + hess.T)
        return value, grad, hess

    def _evaluate_blocks(self, theta, mu, order):
        X, y = self.data.X, self.data.y
        n, m = X.shape[0], self.m
        block = max(1, _BLOCK_ELEMENTS // max(1, n * m))
        rowsums = []
        grad = np.zeros(m) if order >= 1 else None
        hess = np.zeros((m, m)) if order >= 2 else None
        for start in range(0, n, block):
            stop = min(n, start + block)
            rows = np.arange(start, stop)
            psi = self.basis.evaluate(X[start:stop, None, :], X[None, :, :])
            s = pair_sign(y[start:stop, None], y[None, :])
            t = s * (psi @ theta)
            out = loss_arrays(self.loss, t, mu, order)
            offdiag = np.ones_like(t)
            offdiag[rows - start, rows] = 0.0
            rowsums.extend((out[0] * offdiag).sum(axis=1).tolist())
            if order >= 1:
                grad += np.einsum("ij,ijk->k", out[1] * s * offdiag, psi)
            if order >= 2:
                hess += np.einsum("ij,ijk,ijl->kl", out[2] * s * s * offdiag, psi, psi)
        value = math.fsum(rowsums) / self.pair_count
        if order >= 1:
            grad /= self.pair_count
        if order >= 2:
            hess /= self.pair_count
        return value, grad, hess


def empirical_risk_u(theta, basis: BasisSpec, loss: LossSpec, data: Dataset) -> RiskValue:
    """U-statistic risk over all ``n(n-1)`` ordered pairs."""
    _require_pairs(data)
    theta = check_theta(theta, basis)
    risk = PairRisk(data, basis, loss)
    return RiskValue(risk.value(theta), risk.pair_count)


def risk_subgradient_u(theta, basis: BasisSpec, loss: LossSpec, data: Dataset) -> np.ndarray:
    """A subgradient of ``theta -> Q_n(f_theta)`` (chain rule on each pair)."""
    _require_pairs(data)
    theta = check_theta(theta, basis)
    return PairRisk(data, basis, loss).value_and_grad(theta)[1]


def _pair_loss_matrix(theta, basis, loss, data):
    """Dense ``n x n`` matrix of ``phi_f(Z_i, Z_j)``; for small samples only."""
    psi = basis.evaluate(data.X[:, None, :], data.X[None, :, :])
    s = pair_sign(data.y[:, None], data.y[None, :])
    return loss_arrays(loss, s * (psi @ theta))[0]


def empirical_risk_split(theta, basis: BasisSpec, loss: LossSpec, data: Dataset) -> RiskValue:
    """Average of ``phi_f(Z_i, Z_{N+i})``, ``i = 1..N``, ``N = n // 2``.

    With odd ``n`` the last observation is unused.
    """
    _require_pairs(data)
    theta = check_theta(theta, basis)
    N = data.n // 2
    first, second = data.X[:N], data.X[N:2 * N]
    s = pair_sign(data.y[:N], data.y[N:2 * N])
    t = s * (basis.evaluate(first, second) @ theta)
    vals = loss_arrays(loss, t)[0]
    return RiskValue(math.fsum(vals) / N, N)


def permutation_average(theta, basis: BasisSpec, loss: LossSpec, data: Dataset) -> float:
    """Mean of the half-sample estimator over every reordering of the sample.

    Equal to :func:`empirical_risk_u`; enumerates ``n!`` permutations, so
    ``n`` is limited to 7.
    """
    _require_pairs(data)
    if data.n > PERMUTATION_LIMIT:
        raise SizeLimit(f"permutation enumeration limited to n <= {PERMUTATION_LIMIT}")
    theta = check_theta(theta, basis)
    P = _pair_loss_matrix(theta, basis, loss, data)
    n = data.n
    N = n // 2
    terms = []
    for perm in itertools.permutations(range(n)):
        terms.append(math.fsum(P[perm[i], perm[N + i]] for i in range(N)) / N)
    return math.fsum(terms) / math.factorial(n)


def u_statistic_stderr(h: np.ndarray) -> float:
    """First-order standard error of the U-statistic with kernel matrix ``h``.

    Uses the Hoeffding projection ``h1(i) = mean_{j != i} (h_ij + h_ji) / 2``
    and ``Var(U) ~ 4 Var(h1) / n``.
    """
    h = np.asarray(h, dtype=float)
    n = h.shape[0]
    sym = 0.5 * (h + h.T)
    np.fill_diagonal(sym, 0.0)
    h1 = sym.sum(axis=1) / (n - 1)
    return float(2.0 * np.std(h1, ddof=1) / math.sqrt(n))


def variance_comparison(loss: LossSpec, basis: BasisSpec, theta, model, n: int,
                        replications: int, rng_seed) -> tuple:
    """Sample variances of the U-statistic and half-sample risk estimators.

    Each replication draws a fresh dataset of size ``n`` from ``model``.
    """
    from .simulate import generate

    if replications < 100:
        raise InvalidArgument("variance_comparison needs at least 100 replications")
    theta = check_theta(theta, basis)
    seeds = np.random.SeedSequence(rng_seed).spawn(replications)
    u_vals = np.empty(replications)
    split_vals = np.empty(replications)
    for r, seed in enumerate(seeds):
        data = generate(model, n, d_ambient=basis.d, rng_seed=seed)
        u_vals[r] = empirical_risk_u(theta, basis, loss, data).value
        split_vals[r] = empirical_risk_split(theta, basis, loss, data).value
    return float(np.var(u_vals, ddof=1)), float(np.var(split_vals, ddof=1))
