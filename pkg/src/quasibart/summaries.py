"""Posterior summaries: inclusion probabilities, variable importance,
credible intervals, projection summaries and MCMC diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DesignError(ValueError):
    """Rank-deficient or misaligned design matrix."""


@dataclass
class Draws:
    """Retained posterior draws from one chain.

    Arrays share the leading retained-iteration axis of length ``S``.
    ``fitted_mu`` and ``r_fitted`` are ``(S, N)`` for scalar families and
    ``(S, N, K)`` for the multinomial family.
    """

    phi: np.ndarray
    kappa: np.ndarray
    sigma_lambda: np.ndarray
    split_counts: np.ndarray
    fitted_mu: np.ndarray | None = None
    r_fitted: np.ndarray | None = None
    test_mu: np.ndarray | None = None
    iterations: np.ndarray | None = None
    ensembles: list | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        S = len(self.phi)
        for name in ("kappa", "sigma_lambda", "split_counts", "fitted_mu", "r_fitted", "test_mu", "iterations"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != S:
                raise ValueError(f"{name} has {len(arr)} draws, expected {S}")
        if self.split_counts is not None and np.any(np.asarray(self.split_counts) < 0):
            raise ValueError("split counts must be nonnegative")

    @property
    def n_draws(self) -> int:
        return len(self.phi)

    def posterior_mean_mu(self) -> np.ndarray:
        return self.fitted_mu.mean(axis=0)


def inclusion_probabilities(draws) -> np.ndarray:
    """Fraction of retained iterations in which each variable appears in at
    least one splitting rule of the ensemble."""
    counts = np.asarray(draws.split_counts if hasattr(draws, "split_counts") else draws)
    if counts.shape[0] == 0:
        raise ValueError("no draws")
    return (counts >= 1).mean(axis=0)


def variable_importance(draws) -> np.ndarray:
    """Posterior mean number of splits using each variable."""
    counts = np.asarray(draws.split_counts if hasattr(draws, "split_counts") else draws, dtype=float)
    if counts.shape[0] == 0:
        raise ValueError("no draws")
    return counts.mean(axis=0)


def _check_full_rank(basis: np.ndarray) -> None:
    if basis.shape[0] < basis.shape[1] or np.linalg.matrix_rank(basis) < basis.shape[1]:
        raise DesignError(f"summary basis with {basis.shape[1]} columns is rank deficient")


@dataclass
class ProjectionSummary:
    coefficients: np.ndarray   # (S, B)
    r2: np.ndarray             # (S,)
    fitted: np.ndarray         # (S, N)


def projection_summary(r_draws, basis) -> ProjectionSummary:
    """Least-squares projection of every draw of ``r(X_i)`` onto ``basis``.

    Summary ``R^2 = 1 - sum (r - r_tilde)^2 / sum (r - r_bar)^2``.
    """
    r = np.atleast_2d(np.asarray(r_draws, dtype=float))
    basis = np.asarray(basis, dtype=float)
    if basis.ndim == 1:
        basis = basis[:, None]
    if basis.shape[0] != r.shape[1]:
        raise DesignError(f"basis has {basis.shape[0]} rows but draws have {r.shape[1]} points")
    _check_full_rank(basis)
    coef, *_ = np.linalg.lstsq(basis, r.T, rcond=None)
    fitted = (basis @ coef).T
    rss = np.sum((r - fitted) ** 2, axis=1)
    tss = np.sum((r - r.mean(axis=1, keepdims=True)) ** 2, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        r2 = np.where(tss > 0, 1.0 - rss / np.where(tss > 0, tss, 1.0), np.where(rss <= 1e-20, 1.0, -np.inf))
    return ProjectionSummary(coef.T, r2, fitted)


def hinge_basis(x, n_knots: int = 9, intercept: bool = True) -> tuple[np.ndarray, list[str]]:
    """Additive linear + hinge basis; knots at the interior deciles of each column.

    Binary/low-cardinality columns get only their linear term.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    cols, names = [], []
    if intercept:
        cols.append(np.ones(x.shape[0]))
        names.append("(intercept)")
    for j in range(x.shape[1]):
        xj = x[:, j]
        if np.unique(xj).size < 2:
            continue
        cols.append(xj)
        names.append(f"x{j + 1}")
        if np.unique(xj).size <= 2:
            continue
        knots = np.unique(np.quantile(xj, np.arange(1, n_knots + 1) / (n_knots + 1)))
        for k in knots:
            h = np.maximum(xj - k, 0.0)
            if np.ptp(h) > 0:
                cols.append(h)
                names.append(f"x{j + 1}>{k:.4g}")
    B = np.column_stack(cols)
    # drop columns that make the basis singular (ties in the knots)
    keep = []
    for c in range(B.shape[1]):
        trial = keep + [c]
        if np.linalg.matrix_rank(B[:, trial]) == len(trial):
            keep = trial
    return B[:, keep], [names[c] for c in keep]


def equal_tail_interval(draws, level: float = 0.95) -> tuple[float, float]:
    d = np.asarray(draws, dtype=float).ravel()
    a = (1 - level) / 2
    # order statistics (no interpolation), so the interval holds at least ceil(level n) draws
    lo, hi = np.quantile(d, [a, 1 - a], method="inverted_cdf")
    return float(lo), float(hi)


def hpd_interval(draws, level: float = 0.95) -> tuple[float, float]:
    """Shortest window containing ``ceil(level n)`` sorted draws."""
    d = np.sort(np.asarray(draws, dtype=float).ravel())
    n = d.size
    m = min(n, max(1, math.ceil(level * n)))
    if m >= n:
        return float(d[0]), float(d[-1])
    widths = d[m - 1:] - d[: n - m + 1]
    i = int(np.argmin(widths))
    return float(d[i]), float(d[i + m - 1])


def hpd_intervals(draws, level: float = 0.95) -> np.ndarray:
    """Column-wise HPD intervals for a ``(S, M)`` array; returns ``(M, 2)``."""
    d = np.sort(np.asarray(draws, dtype=float), axis=0)
    n = d.shape[0]
    m = min(n, max(1, math.ceil(level * n)))
    if m >= n:
        return np.stack([d[0], d[-1]], axis=1)
    widths = d[m - 1:] - d[: n - m + 1]
    i = np.argmin(widths, axis=0)
    cols = np.arange(d.shape[1])
    return np.stack([d[i, cols], d[i + m - 1, cols]], axis=1)


def credible_intervals(draws, level: float = 0.95):
    """``(equal_tail, hpd)`` intervals for a scalar draw vector."""
    d = np.asarray(draws, dtype=float).ravel()
    if d.size < 2:
        raise ValueError("need at least two draws")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    return equal_tail_interval(d, level), hpd_interval(d, level)


# -- diagnostics --------------------------------------------------------------------

def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.size
    x = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    return np.fft.irfft(f * np.conj(f), nfft)[:n] / n


def effective_sample_size(chain) -> float:
    """ESS with Geyer's initial monotone sequence estimator.

    Accepts a single chain ``(S,)`` or several ``(C, S)`` (uses the
    multi-chain variance combination).
    """
    x = np.atleast_2d(np.asarray(chain, dtype=float))
    C, S = x.shape
    if S < 4:
        return float(C * S)
    acov = np.stack([_autocov(c) for c in x])
    chain_var = acov[:, 0] * S / (S - 1)
    W = chain_var.mean()
    B_over_n = x.mean(axis=1).var(ddof=1) if C > 1 else 0.0
    var_plus = W * (S - 1) / S + B_over_n
    if var_plus <= 0:
        return float(C * S)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # sum of adjacent pairs, truncated at first negative pair, made monotone
    pairs = rho[: (S // 2) * 2].reshape(-1, 2).sum(axis=1)
    tau = -1.0
    prev = np.inf
    for p in pairs:
        if p < 0:
            break
        p = min(p, prev)
        tau += 2 * p
        prev = p
    tau = max(tau, 1.0 / math.log10(max(C * S, 10)))
    return float(C * S / tau)


def mc_standard_error(chain) -> float:
    x = np.asarray(chain, dtype=float).ravel()
    return float(x.std(ddof=1) / math.sqrt(effective_sample_size(x)))


def gelman_rubin(chains) -> float:
    """Potential scale reduction factor for ``(C, S)`` draws (C >= 2)."""
    x = np.asarray(chains, dtype=float)
    C, S = x.shape
    if C < 2:
        raise ValueError("R-hat needs at least two chains")
    means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean()
    B = S * means.var(ddof=1)
    var_plus = (S - 1) / S * W + B / S
    if W == 0:
        return 1.0 if B == 0 else math.inf
    return float(math.sqrt(var_plus / W))


def coverage(intervals, truth) -> float:
    iv = np.asarray(intervals, dtype=float)
    t = np.asarray(truth, dtype=float).ravel()
    return float(np.mean((iv[:, 0] <= t) & (t <= iv[:, 1])))
