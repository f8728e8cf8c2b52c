"""Seeded synthetic data generators.

Each generator draws everything from a single Philox stream keyed by the
seed, so a dataset is a deterministic function of ``(scenario, seed)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .family import Dataset

SCENARIOS = ("qpois_bvm", "power_grid", "invgamma_friedman", "gamma_power", "dirichlet_multinomial")


class ScenarioError(ValueError):
    pass


def stream(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def friedman_r(x) -> np.ndarray:
    """``sin(pi x1 x2) + 2 (x3 - 0.5)^2 + x4 + x5 / 2``; columns past the fifth are ignored."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] < 5:
        raise ScenarioError("friedman_r needs at least 5 coordinates")
    r = np.sin(np.pi * (X[:, 0] * X[:, 1])) + 2.0 * (X[:, 2] - 0.5) ** 2 + X[:, 3] + X[:, 4] / 2.0
    return r[0] if single else r


@dataclass
class ScenarioSpec:
    scenario: str
    N: int
    P: int | None = None
    phi: float = 1.0
    kappa: float | None = None
    rho: float | None = None
    beta: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        s = self.scenario
        if s not in SCENARIOS:
            raise ScenarioError(f"unknown scenario {s!r}")
        if self.N < 0:
            raise ScenarioError("N must be nonnegative")
        if s == "dirichlet_multinomial":
            if self.rho is None or self.rho <= 0:
                raise ScenarioError("dirichlet_multinomial needs rho > 0")
        elif not self.phi > 0:
            raise ScenarioError("phi must be positive")
        if s == "power_grid" and self.kappa not in (1, 2, 1.0, 2.0):
            raise ScenarioError("power_grid supports kappa in {1, 2}")
        if s != "power_grid" and self.kappa is not None:
            raise ScenarioError(f"kappa is not a parameter of {s}")
        if s != "dirichlet_multinomial" and self.rho is not None:
            raise ScenarioError(f"rho is not a parameter of {s}")
        if s != "qpois_bvm" and self.beta is not None:
            raise ScenarioError(f"beta is not a parameter of {s}")
        if s in ("invgamma_friedman", "gamma_power") and (self.P is None or self.P < 5):
            raise ScenarioError(f"{s} needs P >= 5")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["beta"] is not None:
            d["beta"] = list(d["beta"])
        return d

    def generate(self) -> "SyntheticData":
        s = self.scenario
        if s == "qpois_bvm":
            beta = self.beta if self.beta is not None else (1.0, 0.5)
            return gen_qpois(self.N, beta, self.phi, self.seed)
        if s == "power_grid":
            return gen_power_grid(self.N, self.kappa, self.phi, self.seed)
        if s == "invgamma_friedman":
            return gen_invgamma_friedman(self.N, self.P, self.phi, self.seed)
        if s == "gamma_power":
            return gen_gamma_power(self.N, self.P, self.phi, self.seed)
        return gen_dirichlet_multinomial(self.N, self.rho, self.seed)


@dataclass
class SyntheticData:
    """A generated dataset plus its true mean surface (and coefficients when linear)."""

    dataset: Dataset
    mu: np.ndarray
    r: np.ndarray
    phi: float
    beta: np.ndarray | None = None

    @property
    def x(self):
        return self.dataset.x

    @property
    def y(self):
        return self.dataset.y


def gen_qpois(N: int, beta=(1.0, 0.5), phi: float = 1.0, seed: int = 0) -> SyntheticData:
    """``Y = phi Z``, ``Z ~ Poisson(mu / phi)``, ``mu = exp(b0 + b1 x)``, ``x ~ N(0, 1)``."""
    if not phi > 0:
        raise ScenarioError("phi must be positive")
    rng = stream(seed)
    beta = np.asarray(beta, dtype=float)
    x = rng.standard_normal((N, beta.size - 1))
    r = beta[0] + x @ beta[1:]
    mu = np.exp(r)
    y = phi * rng.poisson(mu / phi)
    return SyntheticData(Dataset(x, y), mu, r, phi, beta)


def power_grid_beta(kappa: float) -> np.ndarray:
    return np.full(5, (1.2 if kappa == 1 else 2.0) / math.sqrt(5))


def gen_power_grid(N: int, kappa: float, phi: float, seed: int = 0) -> SyntheticData:
    """Five ``N(0, 1)`` covariates, ``mu = exp(x^T beta)``, no intercept.

    ``kappa = 1``: scaled Poisson ``phi Poisson(mu / phi)``.  ``kappa = 2``:
    ``Y = mu eps`` with ``eps ~ Gam(1/phi, rate 1/phi)``.
    """
    if kappa not in (1, 2):
        raise ScenarioError("power_grid supports kappa in {1, 2}")
    if not phi > 0:
        raise ScenarioError("phi must be positive")
    rng = stream(seed)
    beta = power_grid_beta(kappa)
    x = rng.standard_normal((N, 5))
    r = x @ beta
    mu = np.exp(r)
    if kappa == 1:
        y = phi * rng.poisson(mu / phi)
    else:
        y = mu * rng.gamma(1.0 / phi, phi, size=N)
    return SyntheticData(Dataset(x, y), mu, r, phi, beta)


def gen_invgamma_friedman(N: int, P: int = 10, phi: float = 1.0, seed: int = 0) -> SyntheticData:
    """``1/Y ~ Gam(alpha, rate (alpha - 1) mu)`` with ``alpha = 2 + 1/phi``, ``mu = exp(friedman)``."""
    if P < 5:
        raise ScenarioError("needs P >= 5")
    rng = stream(seed)
    alpha = 2.0 + 1.0 / phi
    x = rng.random((N, P))
    r = friedman_r(x) if N else np.zeros(0)
    mu = np.exp(r)
    inv = rng.gamma(alpha, 1.0 / ((alpha - 1.0) * mu)) if N else np.zeros(0)
    return SyntheticData(Dataset(x, 1.0 / inv), mu, r, phi)


def gen_gamma_power(N: int, P: int = 10, phi: float = 1.0, seed: int = 0) -> SyntheticData:
    """``Y ~ Gam(shape e^{r/2} / phi, rate e^{-r/2} / phi)``: mean ``e^r``, variance ``phi e^{1.5 r}``."""
    if P < 5:
        raise ScenarioError("needs P >= 5")
    rng = stream(seed)
    x = rng.random((N, P))
    r = friedman_r(x) if N else np.zeros(0)
    shape = np.exp(r / 2) / phi
    rate = np.exp(-r / 2) / phi
    y = rng.gamma(shape, 1.0 / rate) if N else np.zeros(0)
    return SyntheticData(Dataset(x, y), np.exp(r), r, phi)


def dirichlet_multinomial_r(x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return np.column_stack([2 * x[:, 0] + x[:, 1], x[:, 0] + 4 * x[:, 1] * x[:, 2], x[:, 1] + 2 * x[:, 2]])


def gen_dirichlet_multinomial(N: int, rho: float = 0.5, seed: int = 0) -> SyntheticData:
    """``Y ~ Dirichlet(rho mu)`` with softmax means; implied ``phi = 1 / (1 + rho)``."""
    if not rho > 0:
        raise ScenarioError("rho must be positive")
    rng = stream(seed)
    x = rng.random((N, 5))
    r = dirichlet_multinomial_r(x)
    mu = np.exp(r - r.max(axis=1, keepdims=True))
    mu /= mu.sum(axis=1, keepdims=True)
    if N:
        g = rng.gamma(rho * mu)
        # tiny concentrations can underflow every component; resample those rows
        bad = g.sum(axis=1) == 0
        while np.any(bad):
            g[bad] = rng.gamma(rho * mu[bad])
            bad = g.sum(axis=1) == 0
        y = g / g.sum(axis=1, keepdims=True)
    else:
        y = np.zeros((0, 3))
    return SyntheticData(Dataset(x, y), mu, r, 1.0 / (1.0 + rho))
