"""Updates for the dispersion ``phi`` and the power exponent ``kappa``.

Methods
-------
fixed     phi (and kappa) never change.
eqp       extended quasi-posterior; conjugate inverse-gamma full conditional.
plp       pseudo-likelihood posterior; conjugate in phi, random-walk MH in kappa.
bbq       Bayesian-bootstrap quasi-likelihood; ``phi = sum p_i Z_i^2`` with
          Dirichlet(1, ..., 1) weights, optionally profiling kappa.
pseudo-eb iterated empirical-Bayes point estimates (outer loop, see :func:`pseudo_eb`).
gamma-lik posterior of phi under a genuine gamma likelihood (the misspecified
          comparison model, quasi-gamma family only).

The EQP is kept for completeness but is not a sensible default: its
dispersion posterior need not concentrate at the truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from .family import NumericalError, QuasiFamily, power_deviance, standardized_residual
from .forest import slice_sample

METHODS = ("fixed", "eqp", "plp", "bbq", "pseudo-eb", "gamma-lik")


@dataclass
class DispersionConfig:
    method: str = "bbq"
    prior_a: float = 0.5
    prior_b: float = 0.5
    kappa_bounds: tuple = (0.5, 3.0)
    estimate_kappa: bool = False
    theory_truncation: tuple | None = None
    kappa_step: float = 0.05
    golden_tol: float = 1e-6
    eb_iterations: int = 5
    eb_sweeps: int = 200
    eb_burn_in: int = 100

    def __post_init__(self):
        self.method = self.method.lower().replace("_", "-")
        if self.method == "pseudoeb":
            self.method = "pseudo-eb"
        if self.method not in METHODS:
            raise ValueError(f"unknown dispersion method {self.method!r}; expected one of {METHODS}")
        if not (self.prior_a > 0 and self.prior_b > 0):
            raise ValueError("phi prior parameters must be positive")
        lo, hi = self.kappa_bounds
        if not lo < hi:
            raise ValueError("kappa_bounds must satisfy kappa_min < kappa_max")
        self.kappa_bounds = (float(lo), float(hi))
        if self.theory_truncation is not None:
            a, b = self.theory_truncation
            if not (0 < a < b < math.inf):
                raise ValueError("theory truncation must satisfy 0 < a < b < inf")


@dataclass
class DispersionInfo:
    degenerate: bool = False
    kappa_accepted: bool | None = None


# -- conjugate updates --------------------------------------------------------------

def _inv_gamma_draw(shape: float, rate: float, rng) -> float:
    return 1.0 / rng.gamma(shape, 1.0 / rate)


def eqp_update(deviance_sum: float, N: float, prior_a: float, prior_b: float, rng) -> float:
    """``1/phi ~ Gam(a + N/2, b + sum omega D / 2)``."""
    if deviance_sum < 0:
        raise ValueError("deviance sum must be nonnegative")
    return _inv_gamma_draw(prior_a + N / 2.0, prior_b + deviance_sum / 2.0, rng)


def plp_update(Z, prior_a: float, prior_b: float, rng, dof: int = 1) -> float:
    """``1/phi ~ Gam(a + dof N/2, b + dof sum Z^2 / 2)``.

    ``dof`` is ``K - 1`` for the multinomial family, where ``Z^2`` is the
    per-row quadratic form divided by ``K - 1``.
    """
    Z = np.asarray(Z, dtype=float)
    return _inv_gamma_draw(prior_a + dof * Z.size / 2.0, prior_b + dof * float(np.sum(Z ** 2)) / 2.0, rng)


def bbq_update(Z2, rng, p=None) -> tuple[float, bool]:
    """``phi = sum_i p_i Z_i^2`` with ``p ~ Dirichlet(1, ..., 1)``.

    Returns ``(phi, degenerate)``; ``degenerate`` flags all-zero residuals.
    """
    Z2 = np.asarray(Z2, dtype=float)
    if Z2.size == 0:
        raise ValueError("BBQ needs at least one residual")
    if p is None:
        p = rng.dirichlet(np.ones(Z2.size))
    phi = float(np.dot(p, Z2))
    return phi, phi == 0.0


def weighted_normal_loglik(phi: float, kappa: float, y, mu, omega, p) -> float:
    """``sum_i p_i log Normal(y_i | mu_i, phi mu_i^kappa / omega_i)``."""
    var = phi * mu ** kappa / omega
    return float(np.sum(p * (-0.5 * np.log(2 * np.pi * var) - 0.5 * (y - mu) ** 2 / var)))


def _golden_max(f, lo: float, hi: float, tol: float) -> float:
    g = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c = b - g * (b - a)
    d = a + g * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    best = (a + b) / 2
    # the endpoints are candidates too when the optimum sits on a bound
    cands = [(f(best), best), (f(lo), lo), (f(hi), hi)]
    return max(cands)[1]


def bbq_kappa_update(y, mu, omega, kappa_bounds, rng, p=None, tol: float = 1e-6) -> tuple[float, float, bool]:
    """Joint BBQ update of ``(phi, kappa)`` for the power family.

    For fixed kappa the maximising phi is ``sum p_i Z_i(kappa)^2``; substituting
    it leaves a concave profile in kappa, maximised by golden-section search.
    """
    y = np.asarray(y, dtype=float).ravel()
    mu = np.asarray(mu, dtype=float).ravel()
    omega = np.asarray(omega, dtype=float).ravel()
    if p is None:
        p = rng.dirichlet(np.ones(y.size))
    logmu = np.log(mu)
    w = p * omega * (y - mu) ** 2
    plogmu = float(np.dot(p, logmu))

    def profile(k):
        s = float(np.dot(w, np.exp(-k * logmu)))
        if s <= 0:
            return -math.inf
        return -0.5 * math.log(s) - 0.5 * k * plogmu

    kappa = _golden_max(profile, kappa_bounds[0], kappa_bounds[1], tol)
    phi = float(np.dot(w, np.exp(-kappa * logmu)))
    return phi, kappa, phi == 0.0


# -- pseudo-likelihood ---------------------------------------------------------------

def log_pseudo_likelihood(phi: float, kappa: float | None, y, mu, omega, family: QuasiFamily) -> float:
    """Gaussian pseudo-likelihood of the residuals (summed over rows).

    For the multinomial family only the phi-dependent part is kept:
    ``-(K-1)/2 log phi - q_i / (2 phi)`` per row.
    """
    if family.is_multinomial:
        q = np.asarray(omega).reshape(-1) * np.sum((y - mu) ** 2 / mu, axis=-1)
        k1 = family.K - 1
        return float(np.sum(-0.5 * k1 * math.log(2 * math.pi * phi) - q / (2 * phi)))
    y = np.asarray(y, dtype=float).ravel()
    mu = np.asarray(mu, dtype=float).ravel()
    omega = np.asarray(omega, dtype=float).ravel()
    v = mu ** kappa if kappa is not None else family.variance(mu)
    var = phi * v / omega
    return float(np.sum(-0.5 * np.log(2 * np.pi * var) - 0.5 * (y - mu) ** 2 / var))


def plp_kappa_update(y, mu, omega, phi: float, kappa: float, kappa_bounds, step: float, rng) -> tuple[float, bool]:
    """Random-walk MH on kappa targeting ``PL(phi, kappa)`` under a uniform prior."""
    prop = kappa + step * rng.standard_normal()
    lo, hi = kappa_bounds
    if not lo <= prop <= hi:
        return kappa, False
    fam = QuasiFamily("power", kappa=1.5)
    cur_ll = log_pseudo_likelihood(phi, kappa, y, mu, omega, fam)
    new_ll = log_pseudo_likelihood(phi, prop, y, mu, omega, fam)
    if math.log(rng.random()) < new_ll - cur_ll:
        return prop, True
    return kappa, False


def eql_loglik(phi: float, kappa: float, y, mu, omega) -> float:
    """Extended quasi-likelihood for the power family (needs y > 0)."""
    y = np.asarray(y, dtype=float).ravel()
    d = power_deviance(y, np.asarray(mu, dtype=float).ravel(), kappa)
    omega = np.asarray(omega, dtype=float).ravel()
    return float(np.sum(-0.5 * np.log(2 * np.pi * phi * y ** kappa) - omega * d / (2 * phi)))


def eqp_kappa_update(y, mu, omega, phi, kappa, kappa_bounds, step, rng) -> tuple[float, bool]:
    prop = kappa + step * rng.standard_normal()
    lo, hi = kappa_bounds
    if not lo <= prop <= hi:
        return kappa, False
    if math.log(rng.random()) < eql_loglik(phi, prop, y, mu, omega) - eql_loglik(phi, kappa, y, mu, omega):
        return prop, True
    return kappa, False


def gamma_likelihood_update(y, mu, omega, phi: float, prior_a: float, prior_b: float, rng) -> float:
    """Slice update of phi under ``Y ~ Gam(shape = omega/phi, mean = mu)``.

    This is the conventional gamma model's dispersion posterior, used as the
    misspecified comparison for quasi-gamma fits.
    """
    y = np.asarray(y, dtype=float).ravel()
    mu = np.asarray(mu, dtype=float).ravel()
    omega = np.asarray(omega, dtype=float).ravel()
    s1 = np.log(y / mu) - y / mu

    def logf(u):
        if u > 30 or u < -30:
            return -math.inf
        shape = omega / math.exp(u)
        ll = np.sum(shape * np.log(shape) - special.gammaln(shape) + shape * s1 - np.log(y))
        # prior 1/phi ~ Gam(a, b) expressed on u = log phi
        return float(ll) - prior_a * u - prior_b * math.exp(-u)

    return math.exp(slice_sample(logf, math.log(phi), rng, width=0.5))


# -- theory mode -------------------------------------------------------------------

def truncated_inv_gamma(shape: float, rate: float, lo: float, hi: float, rng) -> float:
    """Draw ``phi`` with ``1/phi ~ Gam(shape, rate)`` restricted to ``phi in [lo, hi]``.

    Inverse-CDF on the gamma distribution of ``1/phi`` restricted to
    ``[1/hi, 1/lo]``, switching to survival functions in the upper tail.
    """
    # regularized incomplete gamma functions of rate * g
    x_lo, x_hi = rate / hi, rate / lo
    if special.gammainc(shape, x_lo) > 0.5:
        s_lo, s_hi = special.gammaincc(shape, x_lo), special.gammaincc(shape, x_hi)
        mass = s_lo - s_hi
        if not mass > 1e-12:
            raise NumericalError(f"truncated mass {mass:.3g} on [{lo}, {hi}] (gamma shape={shape}, rate={rate})")
        g = special.gammainccinv(shape, s_hi + rng.random() * mass) / rate
    else:
        c_lo, c_hi = special.gammainc(shape, x_lo), special.gammainc(shape, x_hi)
        mass = c_hi - c_lo
        if not mass > 1e-12:
            raise NumericalError(f"truncated mass {mass:.3g} on [{lo}, {hi}] (gamma shape={shape}, rate={rate})")
        g = special.gammaincinv(shape, c_lo + rng.random() * mass) / rate
    return float(np.clip(1.0 / g, lo, hi))


def phi_hat_beta(beta, x, y, omega, family: QuasiFamily) -> float:
    """``N^-1 sum omega (y - mu)^2 / V(mu)`` at ``mu = g^-1(x beta)``."""
    mu = family.mean(np.asarray(x) @ np.asarray(beta))
    y = np.asarray(y, dtype=float).ravel()
    return float(np.mean(np.asarray(omega).ravel() * (y - mu) ** 2 / family.variance(mu)))


def theory_g_update(beta, x, y, omega, family: QuasiFamily, truncation, rng) -> float:
    """Draw from ``InvGam(N/2, phi_hat(beta) N / 2)`` truncated to ``truncation``."""
    a, b = truncation
    if not 0 < a < b:
        raise ValueError("truncation must satisfy 0 < a < b")
    N = np.asarray(y).reshape(-1).size
    ph = phi_hat_beta(beta, x, y, omega, family)
    return truncated_inv_gamma(N / 2.0, ph * N / 2.0, a, b, rng)


# -- dispatcher used inside the backfitting sweep --------------------------------------

def residual_squares(family: QuasiFamily, y, mu, omega, kappa=None) -> np.ndarray:
    """``Z_i^2`` for every row (multinomial rows are scaled by ``1/(K-1)``)."""
    if family.is_multinomial:
        return standardized_residual(family, y, mu, omega) ** 2
    return standardized_residual(family, np.ravel(y), np.ravel(mu), omega, kappa=kappa) ** 2


def update_dispersion(cfg: DispersionConfig, family: QuasiFamily, y, mu, omega, phi: float,
                      kappa: float | None, rng) -> tuple[float, float | None, DispersionInfo]:
    """One dispersion update for the current fitted means."""
    info = DispersionInfo()
    method = cfg.method
    if method in ("fixed", "pseudo-eb"):
        return phi, kappa, info
    dof = family.K - 1 if family.is_multinomial else 1
    N = np.asarray(y).shape[0]
    power = family.kind == "power"
    y_flat = y if family.is_multinomial else np.ravel(y)
    mu_flat = mu if family.is_multinomial else np.ravel(mu)

    if method == "eqp":
        fam = family.with_kappa(kappa) if power else family
        dev = float(np.sum(omega * fam.deviance(y_flat, mu_flat)))
        phi = eqp_update(dev, dof * N, cfg.prior_a, cfg.prior_b, rng)
        if power and cfg.estimate_kappa:
            kappa, info.kappa_accepted = eqp_kappa_update(y_flat, mu_flat, omega, phi, kappa,
                                                          cfg.kappa_bounds, cfg.kappa_step, rng)
        return phi, kappa, info

    if method == "plp":
        Z2 = residual_squares(family, y_flat, mu_flat, omega, kappa if power else None)
        phi = plp_update(np.sqrt(Z2), cfg.prior_a, cfg.prior_b, rng, dof=dof)
        if power and cfg.estimate_kappa:
            kappa, info.kappa_accepted = plp_kappa_update(y_flat, mu_flat, omega, phi, kappa,
                                                          cfg.kappa_bounds, cfg.kappa_step, rng)
        return phi, kappa, info

    if method == "bbq":
        if power and cfg.estimate_kappa:
            phi_new, kappa, info.degenerate = bbq_kappa_update(y_flat, mu_flat, omega, cfg.kappa_bounds, rng,
                                                               tol=cfg.golden_tol)
        else:
            Z2 = residual_squares(family, y_flat, mu_flat, omega, kappa if power else None)
            phi_new, info.degenerate = bbq_update(Z2, rng)
        # a degenerate all-zero residual vector keeps the previous phi inside the sampler
        return (phi if info.degenerate else phi_new), kappa, info

    if method == "gamma-lik":
        if not (family.kind == "gamma" or (power and kappa == 2.0)):
            raise ValueError("gamma-lik dispersion requires the quasi-gamma family")
        phi = gamma_likelihood_update(y_flat, mu_flat, omega, phi, cfg.prior_a, cfg.prior_b, rng)
        return phi, kappa, info

    raise ValueError(method)


# -- pseudo-empirical Bayes ---------------------------------------------------------------

@dataclass
class PseudoEBResult:
    phi: float
    kappa: float | None
    trajectory: list = field(default_factory=list)
    objective_before: list = field(default_factory=list)
    objective_after: list = field(default_factory=list)


def averaged_log_pl(phi, kappa, mu_draws, y, omega, family) -> float:
    """``log( S^-1 sum_s PL_s(phi, kappa) )`` over posterior draws of the mean."""
    vals = np.array([log_pseudo_likelihood(phi, kappa, y, m, omega, family) for m in mu_draws])
    return float(special.logsumexp(vals) - math.log(len(vals)))


def pseudo_eb(dataset, family: QuasiFamily, runner, iterations: int = 5, phi0: float = 1.0,
              kappa0: float | None = None, estimate_kappa: bool = False,
              kappa_bounds=(0.5, 3.0)) -> PseudoEBResult:
    """Iterated empirical-Bayes estimates of ``(phi, kappa)``.

    ``runner(phi, kappa)`` must return posterior draws of the fitted means
    (shape ``(S, N)`` or ``(S, N, K)``) from a chain run at fixed dispersion.
    Each iteration maximises the draw-averaged pseudo-likelihood.
    """
    if iterations < 1:
        raise ValueError("pseudo-EB needs at least one iteration")
    y = dataset.y if family.is_multinomial else dataset.y[:, 0]
    omega = dataset.weights
    power = family.kind == "power"
    if power and kappa0 is None:
        kappa0 = family.kappa
    phi, kappa = float(phi0), kappa0
    res = PseudoEBResult(phi, kappa, trajectory=[(phi, kappa)])
    for _ in range(iterations):
        draws = np.asarray(runner(phi, kappa))
        if not family.is_multinomial:
            draws = draws.reshape(draws.shape[0], -1)

        def obj(ph, k):
            return averaged_log_pl(ph, k if power else None, draws, y, omega, family)

        before = obj(phi, kappa)
        if power and estimate_kappa:
            lo, hi = kappa_bounds

            def neg(v):
                k = float(np.clip(v[1], lo, hi))
                return -obj(math.exp(v[0]), k)

            out = optimize.minimize(neg, x0=[math.log(phi), kappa], method="Nelder-Mead",
                                    options={"xatol": 1e-6, "fatol": 1e-9, "maxiter": 2000})
            new_phi, new_kappa = math.exp(out.x[0]), float(np.clip(out.x[1], lo, hi))
        else:
            out = optimize.minimize_scalar(lambda u: -obj(math.exp(u), kappa),
                                           bounds=(math.log(phi) - 12, math.log(phi) + 12),
                                           method="bounded", options={"xatol": 1e-9})
            new_phi, new_kappa = math.exp(out.x), kappa
        after = obj(new_phi, new_kappa)
        if after < before:
            new_phi, new_kappa, after = phi, kappa, before
        phi, kappa = new_phi, new_kappa
        res.trajectory.append((phi, kappa))
        res.objective_before.append(before)
        res.objective_after.append(after)
    res.phi, res.kappa = phi, kappa
    return res
