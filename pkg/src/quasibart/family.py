"""Quasi-likelihood families: links, variance functions and quasi-deviances.

Every model is described by its mean-variance relation
``Var(Y | x) = phi * V(mu) / omega`` and a link ``mu = g^{-1}(r)``.  The
quasi-deviance ``D(y, mu) = 2 * int_mu^y (y - t) / V(t) dt`` replaces the
negative log-likelihood; all closed forms below are written so that
``D(y, y) = 0`` and ``D >= 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

KINDS = ("binomial", "poisson", "gamma", "power", "multinomial")

# |kappa - 1| or |kappa - 2| below this dispatches to the Poisson/gamma forms
KAPPA_DISPATCH_TOL = 1e-8


class DomainError(ValueError):
    """Raised when a mean or outcome lies outside a family's domain."""


class DegreesOfFreedomError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuasiFamily:
    """A quasi-likelihood model from the catalog.

    Parameters
    ----------
    kind : str
        One of ``binomial``, ``poisson``, ``gamma``, ``power``, ``multinomial``.
    kappa : float, optional
        Power exponent of ``V(mu) = mu**kappa``; only used by ``power``.
    K : int
        Outcome dimension.  1 for every scalar family, >= 2 for multinomial.
    """

    kind: str
    kappa: float | None = None
    K: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown family {self.kind!r}; expected one of {KINDS}")
        if self.kind == "power":
            if self.kappa is None or not np.isfinite(self.kappa):
                raise ValueError("power family needs a finite kappa")
        elif self.kappa is not None:
            raise ValueError(f"kappa is only meaningful for the power family, not {self.kind}")
        if self.kind == "multinomial":
            if self.K < 2:
                raise ValueError("multinomial family needs K >= 2")
        elif self.K != 1:
            raise ValueError(f"{self.kind} family is scalar (K=1)")

    @property
    def is_multinomial(self) -> bool:
        return self.kind == "multinomial"

    @property
    def power(self) -> float:
        """Exponent of the variance function for the scalar log-link-like families."""
        if self.kind == "poisson":
            return 1.0
        if self.kind == "gamma":
            return 2.0
        if self.kind == "power":
            return float(self.kappa)
        raise ValueError(f"{self.kind} has no power variance function")

    def with_kappa(self, kappa: float) -> "QuasiFamily":
        if self.kind != "power":
            raise ValueError("only the power family carries kappa")
        return QuasiFamily("power", kappa=float(kappa))

    # thin method wrappers so callers can write family.deviance(y, mu)
    def variance(self, mu):
        return variance_function(self, mu)

    def deviance(self, y, mu):
        return quasi_deviance(self, y, mu)

    def mean(self, r):
        return mean_from_r(self, r)

    def link(self, mu):
        return r_from_mean(self, mu)

    def dmu_dr(self, mu):
        return dmu_dr(self, mu)


def family_from_name(name: str, kappa: float | None = None, K: int = 1) -> QuasiFamily:
    name = name.lower().replace("quasi-", "").replace("quasi_", "")
    if name == "power":
        return QuasiFamily("power", kappa=1.5 if kappa is None else float(kappa))
    if name == "multinomial":
        return QuasiFamily("multinomial", K=max(int(K), 2))
    return QuasiFamily(name)


@dataclass
class Dataset:
    """Covariates, outcomes and positive weights.

    ``y`` is always stored as an ``(N, K)`` array; for scalar families ``K = 1``.
    For binomial and multinomial outcomes ``weights`` hold the trial counts
    ``n_i`` and ``y`` holds proportions.
    """

    x: np.ndarray
    y: np.ndarray
    weights: np.ndarray | None = None
    feature_names: Sequence[str] | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        n = self.x.shape[0]
        if self.y.shape[0] != n:
            raise ValueError(f"x has {n} rows but y has {self.y.shape[0]}")
        if self.weights is None:
            self.weights = np.ones(n)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.weights.shape[0] != n:
            raise ValueError("weights must have one entry per row")
        if self.feature_names is None:
            self.feature_names = [f"x{j + 1}" for j in range(self.x.shape[1])]
        self.feature_names = list(self.feature_names)
        if len(self.feature_names) != self.x.shape[1]:
            raise ValueError("feature_names must match the number of columns of x")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite entries")
        if not (np.all(np.isfinite(self.weights)) and np.all(self.weights > 0)):
            raise ValueError("weights must be finite and strictly positive")

    @property
    def N(self) -> int:
        return self.x.shape[0]

    @property
    def P(self) -> int:
        return self.x.shape[1]

    @property
    def K(self) -> int:
        return self.y.shape[1]

    def validate_for(self, family: QuasiFamily) -> None:
        """Check the outcome against the family's outcome space."""
        y = self.y
        if family.is_multinomial:
            if y.shape[1] != family.K:
                raise DomainError(f"multinomial family has K={family.K} but y has {y.shape[1]} columns")
            bad = np.where((y < 0).any(axis=1) | (np.abs(y.sum(axis=1) - 1.0) > 1e-10))[0]
            if bad.size:
                raise DomainError(f"multinomial outcome row {int(bad[0])} is not on the simplex")
            return
        if y.shape[1] != 1:
            raise DomainError(f"{family.kind} family expects a single outcome column")
        if family.kind == "binomial":
            bad = np.where((y[:, 0] < 0) | (y[:, 0] > 1))[0]
            if bad.size:
                raise DomainError(f"binomial outcome row {int(bad[0])} is outside [0, 1]")
        else:
            bad = np.where(y[:, 0] < 0)[0]
            if bad.size:
                raise DomainError(f"{family.kind} outcome row {int(bad[0])} is negative")
            if family.kind == "gamma" or (family.kind == "power" and family.power >= 2):
                bad = np.where(y[:, 0] <= 0)[0]
                if bad.size:
                    raise DomainError(f"{family.kind} outcome row {int(bad[0])} must be positive")

    def subset(self, rows) -> "Dataset":
        return Dataset(self.x[rows], self.y[rows], self.weights[rows], self.feature_names)


@dataclass(frozen=True)
class LeafPrior:
    """Zero-mean log-gamma leaf prior, ``lambda = log G`` with ``G ~ Gam(a, b)``.

    ``a`` and ``b`` are moment matched so that ``E(lambda) = 0`` and
    ``Var(lambda) = sigma_lambda**2``.
    """

    a: float
    b: float
    sigma_lambda: float
    k_scale: float = 2.0
    log_b: float = field(default=0.0, repr=False)


def _check_open_mean(family: QuasiFamily, mu: np.ndarray) -> None:
    if family.kind == "binomial":
        ok = np.all((mu > 0) & (mu < 1))
    elif family.kind == "multinomial":
        ok = np.all(mu > 0) and np.allclose(mu.sum(axis=-1), 1.0, atol=1e-10)
    else:
        ok = np.all(mu > 0)
    if not ok or not np.all(np.isfinite(mu)):
        raise DomainError(f"mean outside the open mean space of the {family.kind} family")


def variance_function(family: QuasiFamily, mu):
    """Evaluate ``V(mu)``.

    Scalar families return an array shaped like ``mu``.  The multinomial
    family takes ``mu`` with trailing dimension ``K`` and returns the
    ``K x K`` matrix ``diag(mu) - mu mu^T`` (batched over leading axes).
    """
    mu = np.asarray(mu, dtype=float)
    _check_open_mean(family, mu)
    kind = family.kind
    if kind == "binomial":
        return mu * (1.0 - mu)
    if kind == "poisson":
        return mu
    if kind == "gamma":
        return mu * mu
    if kind == "power":
        return mu ** family.kappa
    diag = mu[..., :, None] * np.eye(mu.shape[-1])
    return diag - mu[..., :, None] * mu[..., None, :]


def _h(x, t):
    """``expm1(x t) / t`` with its limit ``x`` at ``t = 0``."""
    if t == 0.0:
        return x
    return np.expm1(x * t) / t


def power_deviance(y, mu, kappa: float):
    """Quasi-deviance for ``V(mu) = mu**kappa``, stable for every kappa.

    With ``L = log(y / mu)``, ``D = 2 [y mu^(1-k) h(L, 1-k) - mu^(2-k) h(L, 2-k)]``
    where ``h(x, t) = expm1(x t) / t``.  This is algebraically the textbook
    power deviance but never subtracts two large numbers.
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    y, mu = np.broadcast_arrays(y, mu)
    out = np.empty(y.shape)
    pos = y > 0
    if np.any(pos):
        yp, mp = y[pos], mu[pos]
        L = np.log(yp) - np.log(mp)
        t1 = 1.0 - kappa
        t2 = 2.0 - kappa
        out[pos] = 2.0 * (yp * mp ** t1 * _h(L, t1) - mp ** t2 * _h(L, t2))
    zero = ~pos
    if np.any(zero):
        if kappa >= 2:
            raise DomainError(f"y = 0 has infinite deviance under the power family with kappa={kappa}")
        out[zero] = 2.0 * mu[zero] ** (2.0 - kappa) / (2.0 - kappa)
    return out


def quasi_deviance(family: QuasiFamily, y, mu):
    """Quasi-deviance ``D(y, mu)`` (nonnegative, zero at ``y = mu``).

    Vectorised over observations; for the multinomial family the trailing
    axis of ``y`` and ``mu`` is the category axis and is summed out.
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    _check_open_mean(family, mu)
    kind = family.kind
    if kind == "binomial":
        if np.any((y < 0) | (y > 1)):
            raise DomainError("binomial outcome outside [0, 1]")
        return 2.0 * (special.xlogy(y, y) - special.xlogy(y, mu)
                      + special.xlogy(1 - y, 1 - y) - special.xlogy(1 - y, 1 - mu))
    if kind == "multinomial":
        if np.any(y < 0):
            raise DomainError("multinomial outcome has negative entries")
        return 2.0 * np.sum(special.xlogy(y, y) - special.xlogy(y, mu), axis=-1)
    if np.any(y < 0):
        raise DomainError(f"{kind} outcome must be nonnegative")
    kappa = family.power
    if abs(kappa - 1.0) < KAPPA_DISPATCH_TOL:
        return 2.0 * (special.xlogy(y, y) - special.xlogy(y, mu) - (y - mu))
    if abs(kappa - 2.0) < KAPPA_DISPATCH_TOL:
        if np.any(y <= 0):
            raise DomainError("gamma outcome must be positive")
        return 2.0 * ((y - mu) / mu - np.log(y / mu))
    return power_deviance(y, mu, kappa)


def mean_from_r(family: QuasiFamily, r):
    """Map the predictor ``r`` to the mean scale.

    The gamma family uses ``mu = exp(-r)``; the multinomial family applies a
    max-shifted softmax over the trailing axis.
    """
    r = np.asarray(r, dtype=float)
    kind = family.kind
    if kind == "binomial":
        return special.expit(-r)
    if kind in ("poisson", "power"):
        return np.exp(r)
    if kind == "gamma":
        return np.exp(-r)
    z = r - r.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def r_from_mean(family: QuasiFamily, mu):
    """Inverse of :func:`mean_from_r` (for multinomial, centred log-ratios)."""
    mu = np.asarray(mu, dtype=float)
    kind = family.kind
    if kind == "binomial":
        return np.log1p(-mu) - np.log(mu)
    if kind in ("poisson", "power"):
        return np.log(mu)
    if kind == "gamma":
        return -np.log(mu)
    lm = np.log(mu)
    return lm - lm.mean(axis=-1, keepdims=True)


def dmu_dr(family: QuasiFamily, mu):
    """Derivative of the inverse link, expressed through ``mu``."""
    mu = np.asarray(mu, dtype=float)
    kind = family.kind
    if kind == "binomial":
        return -mu * (1.0 - mu)
    if kind in ("poisson", "power"):
        return mu
    if kind == "gamma":
        return -mu
    raise ValueError("dmu_dr is defined for scalar families only")


def quasi_score(family: QuasiFamily, y, mu):
    """``d/dmu [-D(y, mu) / 2] = (y - mu) / V(mu)`` for scalar families."""
    return (np.asarray(y, dtype=float) - mu) / variance_function(family, mu)


def standardized_residual(family: QuasiFamily, y, mu, omega=1.0, kappa: float | None = None):
    """``Z = omega^(1/2) (y - mu) / V(mu)^(1/2)``.

    ``kappa`` overrides the family's power (used when profiling kappa).  For
    the multinomial family a scalar per row is returned with
    ``Z^2 = omega sum_k (y_k - mu_k)^2 / mu_k / (K - 1)`` so that ``E(Z^2) = phi``.
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    omega = np.asarray(omega, dtype=float)
    if family.is_multinomial:
        _check_open_mean(family, mu)
        q = np.sum((y - mu) ** 2 / mu, axis=-1)
        return np.sqrt(omega * q / (family.K - 1))
    if kappa is not None:
        if np.any(mu <= 0):
            raise DomainError("power mean must be positive")
        v = mu ** kappa
    else:
        v = variance_function(family, mu)
    return np.sqrt(omega) * (y - mu) / np.sqrt(v)


def moment_estimator_phi(y, mu, omega, family: QuasiFamily, df_correction: int = 0) -> float:
    """Moment estimator of the dispersion.

    Scalar families: ``sum omega (y - mu)^2 / V(mu) / (N - P)``.  Multinomial:
    ``sum_i sum_k n_i (y_ik - mu_ik)^2 / mu_ik / ((N - P)(K - 1))``.
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    omega = np.asarray(omega, dtype=float).reshape(-1)
    if family.is_multinomial:
        y = y.reshape(-1, family.K)
        mu = mu.reshape(-1, family.K)
    else:
        y = y.reshape(-1)
        mu = mu.reshape(-1)
    n = y.shape[0]
    if n <= df_correction:
        raise DegreesOfFreedomError(f"need N > {df_correction} observations, got N={n}")
    if family.is_multinomial:
        _check_open_mean(family, mu)
        total = np.sum(omega[:, None] * (y - mu) ** 2 / mu)
        return float(total / ((n - df_correction) * (family.K - 1)))
    total = np.sum(omega * (y - mu) ** 2 / variance_function(family, mu))
    return float(total / (n - df_correction))


def mql_moment_estimator(y, mu, omega, variance) -> float:
    """General multivariate moment estimator ``(NK)^-1 sum omega r^T V^-1 r``.

    ``variance`` maps a mean vector to a nonsingular ``K x K`` matrix.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    omega = np.asarray(omega, dtype=float).reshape(-1)
    n, k = y.shape
    total = 0.0
    for i in range(n):
        resid = y[i] - mu[i]
        total += omega[i] * resid @ np.linalg.solve(variance(mu[i]), resid)
    return float(total / (n * k))


def leaf_prior_from_sigma(sigma_lambda: float, k_scale: float = 2.0) -> LeafPrior:
    """Moment-matched log-gamma prior with mean 0 and standard deviation ``sigma_lambda``.

    Solves ``trigamma(a) = sigma^2`` by Newton's method on ``1 / trigamma``,
    which is close to linear in ``a``, then sets ``b = exp(digamma(a))``.
    """
    if not (sigma_lambda > 0 and np.isfinite(sigma_lambda)):
        raise ValueError("sigma_lambda must be positive and finite")
    a = _inverse_trigamma(float(sigma_lambda) ** 2)
    log_b = float(special.digamma(a))
    return LeafPrior(a=a, b=float(np.exp(log_b)), sigma_lambda=float(sigma_lambda),
                     k_scale=k_scale, log_b=log_b)


def _inverse_trigamma(s: float, tol: float = 1e-12, max_iter: int = 100) -> float:
    target = 1.0 / s
    a = 1.0 / s + 0.5
    for _ in range(max_iter):
        tg = float(special.polygamma(1, a))
        f = 1.0 / tg - target
        fprime = -float(special.polygamma(2, a)) / tg ** 2
        step = f / fprime
        a_new = a - step
        if a_new <= 0:
            a_new = a / 2.0
        if abs(a_new - a) <= tol * a_new:
            return a_new
        a = a_new
    raise NumericalError(f"trigamma inversion did not converge for sigma^2={s}")
