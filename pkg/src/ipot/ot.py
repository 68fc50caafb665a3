"""Entropic optimal transport by Sinkhorn scaling.

Plans are dense ``float64`` arrays. The default solver runs in the log
domain; the multiplicative form ``diag(a) K diag(b)`` is kept behind
``SinkhornConfig(log_domain=False)`` for cross-checking.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConvergenceWarning",
    "SinkhornConfig",
    "SinkhornResult",
    "UnsupportedInstanceError",
    "as_marginal",
    "as_cost",
    "sinkhorn",
    "partial_sinkhorn",
    "ot_oracle",
    "plan_entropy",
    "marginal_violation",
]


class ConvergenceWarning(UserWarning):
    """Sinkhorn stopped at ``max_iter`` before reaching ``tol``."""


class UnsupportedInstanceError(ValueError):
    pass


@dataclass(frozen=True)
class SinkhornConfig:
    lam: float = 1.0
    tol: float = 1e-9
    max_iter: int = 500
    log_domain: bool = True
    # warm-start from a geometric ladder of larger lambdas (log domain only)
    eps_scaling: bool = False
    scaling_factor: float = 4.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")
        if not self.tol > 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if not self.scaling_factor > 1:
            raise ValueError("scaling_factor must be > 1")


@dataclass
class SinkhornResult:
    """A transport plan together with its convergence record."""

    plan: np.ndarray
    n_iter: int
    violation: float
    converged: bool

    def __array__(self, dtype=None, copy=None):
        return self.plan if dtype is None else self.plan.astype(dtype)


def as_cost(cost) -> np.ndarray:
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
        raise ValueError(f"cost must be a non-empty 2-D matrix, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    return c


def as_marginal(weights) -> np.ndarray:
    """Validate a nonnegative weight vector and normalize it to sum 1."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size == 0:
        raise ValueError("marginal is empty")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("marginal weights must be finite and nonnegative")
    total = w.sum()
    if not total > 0:
        raise ValueError("marginal needs at least one strictly positive weight")
    return w / total


def marginal_violation(plan: np.ndarray, mu: np.ndarray, gamma: np.ndarray) -> float:
    return float(max(np.abs(plan.sum(axis=1) - mu).max(), np.abs(plan.sum(axis=0) - gamma).max()))


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))


def log_sweeps(c, mu, gamma, lam, tol, max_iter, f):
    """Log-domain sweeps at a fixed lam, warm-started from row potential ``f``."""
    log_k = -c / lam
    with np.errstate(divide="ignore"):
        log_mu = np.log(mu)[:, None]
        log_gamma = np.log(gamma)[None, :]
    log_a = f / lam
    for it in range(1, max_iter + 1):
        log_b = log_gamma - _lse(log_k + log_a, axis=0)
        lse_r = _lse(log_k + log_b, axis=1)
        # columns are exact after the b-update; only rows can be off
        viol = float(np.abs(np.exp(log_a + lse_r) - mu[:, None]).max())
        if viol < tol:
            break
        log_a = log_mu - lse_r
    return log_a + log_k + log_b, lam * log_a, it


def anneal_schedule(c, cfg):
    if not cfg.eps_scaling:
        return []
    spread = float(c.max() - c.min())
    lams = []
    lam = cfg.lam * cfg.scaling_factor
    while lam < spread:
        lams.append(lam)
        lam *= cfg.scaling_factor
    return lams[::-1]


def _sinkhorn_log(c, mu, gamma, cfg):
    f = np.zeros((c.shape[0], 1))
    total = 0
    for lam in anneal_schedule(c, cfg):
        _, f, n = log_sweeps(c, mu, gamma, lam, cfg.tol, cfg.max_iter, f)
        f = np.where(np.isfinite(f), f, 0.0)
        total += n
    log_plan, _, n = log_sweeps(c, mu, gamma, cfg.lam, cfg.tol, cfg.max_iter, f)
    return np.exp(log_plan), total + n


def _sinkhorn_mult(c, mu, gamma, cfg):
    k = np.exp(-c / cfg.lam)
    a = np.ones(c.shape[0])
    for it in range(1, cfg.max_iter + 1):
        b = gamma / (k.T @ a)
        kb = k @ b
        viol = float(np.abs(a * kb - mu).max())
        if viol < cfg.tol:
            break
        a = mu / kb
    return a[:, None] * k * b[None, :], it


def sinkhorn(cost, mu, gamma, cfg: SinkhornConfig | None = None) -> SinkhornResult:
    """Solve ``min <C, T> + lam <T, log T>`` over plans with marginals (mu, gamma).

    Marginals are normalized on entry. Iteration stops once the largest
    row-marginal violation is below ``cfg.tol`` (column marginals are exact
    after every column update) or after ``cfg.max_iter`` sweeps, in which case
    a :class:`ConvergenceWarning` is emitted and the last iterate is returned.
    """
    cfg = cfg or SinkhornConfig()
    c = as_cost(cost)
    mu = as_marginal(mu)
    gamma = as_marginal(gamma)
    if mu.size != c.shape[0] or gamma.size != c.shape[1]:
        raise ValueError(f"marginal sizes {mu.size}, {gamma.size} do not match cost shape {c.shape}")

    if cfg.log_domain:
        plan, n_iter = _sinkhorn_log(c, mu, gamma, cfg)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            plan, n_iter = _sinkhorn_mult(c, mu, gamma, cfg)
        if not np.all(np.isfinite(plan)):
            raise FloatingPointError("multiplicative Sinkhorn underflowed; use log_domain=True")

    viol = marginal_violation(plan, mu, gamma)
    converged = viol < cfg.tol
    if not converged:
        warnings.warn(
            f"Sinkhorn did not reach tol={cfg.tol:g} in {cfg.max_iter} iterations (violation {viol:.3e})",
            ConvergenceWarning,
            stacklevel=2,
        )
    return SinkhornResult(plan, n_iter, viol, converged)


def partial_sinkhorn(cost, selection, gamma, cfg: SinkhornConfig | None = None) -> SinkhornResult:
    """Entropic OT restricted to the rows with a positive selection count.

    Rows whose count is zero are exactly zero in the returned plan. The
    selected rows are solved as an ordinary problem with row marginal equal
    to the normalized counts, then scattered back.
    """
    c = as_cost(cost)
    sel = np.asarray(selection, dtype=np.float64).reshape(-1)
    if sel.size != c.shape[0]:
        raise ValueError(f"selection has length {sel.size}, cost has {c.shape[0]} rows")
    if np.any(sel < 0) or not np.all(np.isfinite(sel)):
        raise ValueError("selection counts must be finite and nonnegative")
    rows = np.flatnonzero(sel > 0)
    if rows.size == 0:
        raise ValueError("selection is all zero")
    sub = sinkhorn(c[rows], sel[rows], gamma, cfg)
    plan = np.zeros_like(c)
    plan[rows] = sub.plan
    return SinkhornResult(plan, sub.n_iter, sub.violation, sub.converged)


def ot_oracle(cost, mu=None, gamma=None) -> np.ndarray:
    """Exact OT for small square problems with uniform marginals.

    Enumerates all permutations (n <= 8) and returns ``P / n`` for the
    cheapest one; ties go to the lexicographically smallest permutation.
    """
    c = as_cost(cost)
    n, m = c.shape
    if n != m:
        raise UnsupportedInstanceError(f"oracle needs a square cost, got {c.shape}")
    if n > 8:
        raise UnsupportedInstanceError(f"oracle limited to n <= 8, got {n}")
    uniform = np.full(n, 1.0 / n)
    for w in (mu, gamma):
        if w is not None and not np.allclose(as_marginal(w), uniform, rtol=0, atol=1e-12):
            raise UnsupportedInstanceError("oracle needs uniform marginals")

    best, best_cost = None, math.inf
    cols = np.arange(n)
    for perm in itertools.permutations(range(n)):  # lexicographic order
        total = c[cols, perm].sum()
        if total < best_cost:
            best, best_cost = perm, total
    plan = np.zeros((n, n))
    plan[cols, best] = 1.0 / n
    return plan


def plan_entropy(plan) -> float:
    """Shannon entropy ``-sum t log t`` with ``0 log 0 = 0``."""
    t = np.asarray(plan, dtype=np.float64)
    t = t[t > 0]
    return float(-(t * np.log(t)).sum())
