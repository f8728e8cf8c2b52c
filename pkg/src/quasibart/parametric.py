"""Parametric quasi-likelihood tools for ``r(x) = x^T beta``.

Maximum quasi-likelihood fitting by IRLS, random-walk Metropolis for the
quasi-posterior of ``beta`` given ``phi``, the two-step Gibbs sampler with the
truncated inverse-gamma dispersion update, the Bayesian-bootstrap Poisson
estimator and a parametric BBQ sampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .dispersion import bbq_kappa_update, bbq_update, theory_g_update
from .family import Dataset, DomainError, QuasiFamily, _h, moment_estimator_phi, standardized_residual
from .summaries import DesignError


class OptimizationError(RuntimeError):
    def __init__(self, msg: str, trace: list):
        super().__init__(msg)
        self.trace = trace


class _Gaussian:
    """Identity link with ``V = 1``; only used as a test oracle target."""

    kind = "gaussian"
    is_multinomial = False

    @staticmethod
    def mean(r):
        return np.asarray(r, dtype=float)

    @staticmethod
    def dmu_dr(mu):
        return np.ones_like(mu)

    @staticmethod
    def variance(mu):
        return np.ones_like(mu)

    @staticmethod
    def deviance(y, mu):
        return (np.asarray(y) - mu) ** 2


GAUSSIAN = _Gaussian()


@dataclass
class ParametricModel:
    """Linear predictor ``x^T beta`` with a flat prior on ``{||beta|| <= R}``."""

    x: np.ndarray
    family: QuasiFamily
    prior_radius: float = math.inf

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        if self.family.is_multinomial:
            raise ValueError("parametric tools cover scalar families only")
        if not self.prior_radius > 0:
            raise ValueError("prior radius must be positive")
        n, p = self.x.shape
        if n < p:
            raise DesignError(f"design has {n} rows and {p} columns")
        _, R, _ = linalg.qr(self.x, mode="economic", pivoting=True)
        d = np.abs(np.diag(R))
        if d.size == 0 or d[-1] <= max(n, p) * np.finfo(float).eps * d[0]:
            raise DesignError("design matrix is not of full column rank")

    @property
    def P(self) -> int:
        return self.x.shape[1]

    def mu(self, beta) -> np.ndarray:
        return self.family.mean(self.x @ beta)

    def deviance(self, beta, y, omega) -> float:
        mu = self.mu(beta)
        if not np.all(np.isfinite(mu)):
            return math.inf
        if self.family.kind in ("poisson", "power", "gamma") and np.any(mu <= 0):
            return math.inf
        return float(np.sum(omega * self.family.deviance(y, mu)))

    def objective(self, beta, y, omega) -> float:
        """Weighted deviance less a term that depends on ``y`` only.

        For power-type families this is ``2 sum omega [h(log mu, 2 - kappa) - y h(log mu, 1 - kappa)]``,
        which stays finite at ``y = 0`` where the kappa >= 2 deviance diverges.
        Differences in ``beta`` agree with those of :meth:`deviance`.
        """
        if self.family.kind not in ("poisson", "power", "gamma"):
            return self.deviance(beta, y, omega)
        mu = self.mu(beta)
        if not np.all(np.isfinite(mu)) or np.any(mu <= 0):
            return math.inf
        y = np.asarray(y, dtype=float)
        if np.any(y < 0):
            raise DomainError(f"{self.family.kind} outcome must be nonnegative")
        kappa = self.family.power
        lm = np.log(mu)
        return float(np.sum(omega * 2.0 * (_h(lm, 2.0 - kappa) - y * _h(lm, 1.0 - kappa))))

    def log_quasi_posterior(self, beta, y, omega, phi: float) -> float:
        """``-sum omega D / (2 phi)`` up to a constant in ``y``, ``-inf`` outside the prior ball."""
        if np.linalg.norm(beta) > self.prior_radius:
            return -math.inf
        return -self.objective(beta, y, omega) / (2.0 * phi)


def _outcome(dataset: Dataset) -> np.ndarray:
    return dataset.y[:, 0]


@dataclass
class MQLEResult:
    beta: np.ndarray
    H: np.ndarray
    phi_moment: float
    iterations: int
    trace: list = field(default_factory=list)

    def asymptotic_cov(self, N: int, phi: float | None = None) -> np.ndarray:
        ph = self.phi_moment if phi is None else phi
        return ph * np.linalg.inv(N * self.H)


def _working(model: ParametricModel, beta, y, omega):
    fam = model.family
    eta = model.x @ beta
    mu = fam.mean(eta)
    d = fam.dmu_dr(mu)
    v = fam.variance(mu)
    w = omega * d * d / v
    score = model.x.T @ (omega * (y - mu) * d / v)
    return eta, mu, d, w, score


def irls(model: ParametricModel, y, omega, beta0=None, tol: float = 1e-10, max_iter: int = 100,
         max_halvings: int = 30) -> tuple[np.ndarray, int, list]:
    """Minimise ``sum omega D(y, g^-1(x beta))``; converges on the mean score norm.

    Step-halving monitors :meth:`ParametricModel.objective`, so outcomes at 0
    are allowed for every power.
    """
    y = np.asarray(y, dtype=float)
    omega = np.asarray(omega, dtype=float)
    N = y.size
    fam = model.family
    if beta0 is None:
        ybar = max(float(np.average(y, weights=omega)), 1e-8)
        beta0 = np.zeros(model.P)
        if fam.kind in ("poisson", "gamma", "power", "binomial", "gaussian"):
            ones = np.all(model.x == model.x[:, [0]], axis=0)
            start = {"poisson": math.log(ybar), "power": math.log(ybar), "gamma": -math.log(ybar),
                     "binomial": math.log((1 - min(ybar, 1 - 1e-8)) / ybar), "gaussian": ybar}[fam.kind]
            if ones.any():
                j = int(np.argmax(ones))
                beta0[j] = start / model.x[0, j]
    beta = np.asarray(beta0, dtype=float).copy()
    dev = model.objective(beta, y, omega)
    trace = []
    for it in range(1, max_iter + 1):
        eta, mu, d, w, score = _working(model, beta, y, omega)
        gnorm = float(np.max(np.abs(score))) / N
        trace.append((it, dev, gnorm))
        if gnorm < tol:
            return beta, it, trace
        z = eta + (y - mu) / d
        sw = np.sqrt(w)
        new, *_ = np.linalg.lstsq(model.x * sw[:, None], z * sw, rcond=None)
        step = new - beta
        for _ in range(max_halvings + 1):
            cand = beta + step
            dc = model.objective(cand, y, omega)
            if dc <= dev + 1e-12 * abs(dev):
                break
            step = step / 2
        else:
            raise OptimizationError("IRLS step-halving failed to reduce the deviance", trace)
        if np.max(np.abs(cand - beta)) < 1e-15 * (1 + np.max(np.abs(beta))):
            beta, dev = cand, dc
            _, _, _, _, score = _working(model, beta, y, omega)
            trace.append((it, dev, float(np.max(np.abs(score))) / N))
            return beta, it, trace
        beta, dev = cand, dc
    eta, mu, d, w, score = _working(model, beta, y, omega)
    if float(np.max(np.abs(score))) / N < tol:
        return beta, max_iter, trace
    raise OptimizationError(f"IRLS did not converge in {max_iter} iterations", trace)


def fit_mqle(model: ParametricModel, dataset: Dataset, weights=None) -> MQLEResult:
    """Maximum quasi-likelihood estimate, ``H = X^T W X / N`` and the moment ``phi`` estimate.

    ``weights`` (if given) multiply the dataset weights; they enter the
    score but not the moment estimator.
    """
    y = _outcome(dataset)
    omega = dataset.weights if weights is None else dataset.weights * np.asarray(weights, dtype=float)
    beta, it, trace = irls(model, y, omega)
    _, mu, _, w, _ = _working(model, beta, y, omega)
    N = y.size
    H = (model.x.T * w) @ model.x / N
    if isinstance(model.family, QuasiFamily):
        phi = moment_estimator_phi(y, mu, dataset.weights, model.family, df_correction=model.P)
    else:
        phi = float(np.sum(dataset.weights * (y - mu) ** 2) / (N - model.P))
    return MQLEResult(beta, H, phi, it, trace)


# -- quasi-posterior sampling ---------------------------------------------------------

@dataclass
class MHResult:
    beta: np.ndarray          # (S, P) retained draws
    acceptance_rate: float    # over retained iterations
    proposal_cov: np.ndarray  # frozen proposal covariance
    log_post: np.ndarray = None


def _initial_proposal(model: ParametricModel, dataset: Dataset, phi: float):
    fit = fit_mqle(model, dataset)
    N = dataset.N
    cov = phi * np.linalg.inv(N * fit.H)
    return fit.beta, cov


def quasi_posterior_mh(model: ParametricModel, dataset: Dataset, phi: float, iterations: int, rng,
                       burn_in: int | None = None, beta0=None, proposal_cov=None,
                       adapt: bool = True) -> MHResult:
    """Adaptive random-walk Metropolis for ``pi(beta | phi)``.

    During burn-in the proposal is reset every 100 iterations to
    ``2.38^2 / P`` times the empirical covariance of the chain so far; it is
    frozen for the retained iterations, which therefore come from a fixed
    reversible kernel.
    """
    if not phi > 0:
        raise ValueError("phi must be positive")
    burn_in = iterations // 5 if burn_in is None else burn_in
    y = _outcome(dataset)
    omega = dataset.weights
    P = model.P
    scale = 2.38 ** 2 / P
    if beta0 is None or proposal_cov is None:
        b0, c0 = _initial_proposal(model, dataset, phi)
        beta0 = b0 if beta0 is None else beta0
        proposal_cov = scale * c0 if proposal_cov is None else proposal_cov
    beta = np.asarray(beta0, dtype=float).copy()
    lp = model.log_quasi_posterior(beta, y, omega, phi)
    chol = np.linalg.cholesky(proposal_cov)
    hist = np.empty((burn_in, P))
    kept = np.empty((max(iterations - burn_in, 0), P))
    kept_lp = np.empty(kept.shape[0])
    acc = 0
    for it in range(iterations):
        cand = beta + chol @ rng.standard_normal(P)
        lc = model.log_quasi_posterior(cand, y, omega, phi)
        if math.log(rng.random()) < lc - lp:
            beta, lp = cand, lc
            if it >= burn_in:
                acc += 1
        if it < burn_in:
            hist[it] = beta
            if adapt and it >= 199 and (it + 1) % 100 == 0:
                emp = np.cov(hist[it // 2: it + 1].T).reshape(P, P)
                try:
                    chol = np.linalg.cholesky(scale * emp + 1e-12 * np.eye(P))
                except np.linalg.LinAlgError:
                    pass
        else:
            kept[it - burn_in] = beta
            kept_lp[it - burn_in] = lp
    n_kept = kept.shape[0]
    return MHResult(kept, acc / n_kept if n_kept else float("nan"), chol @ chol.T, kept_lp)


@dataclass
class GibbsResult:
    beta: np.ndarray
    phi: np.ndarray
    kappa: np.ndarray | None = None
    acceptance_rate: float = float("nan")
    degenerate: int = 0


def two_step_gibbs(model: ParametricModel, dataset: Dataset, truncation, iterations: int, rng,
                   burn_in: int = 0, phi0: float | None = None, beta0=None, inner_steps: int = 1,
                   base_cov=None) -> GibbsResult:
    """Alternate ``beta ~ pi(beta | phi)`` (RWM steps) and ``phi ~ g(phi | beta)``.

    The beta kernel uses the fixed proposal ``phi * base_cov``, with
    ``base_cov = (2.38^2 / P) (N H)^-1`` at the MQLE unless supplied, so it
    leaves ``pi(beta | phi)`` exactly invariant for every ``phi``.
    """
    a, b = truncation
    if not 0 < a < b:
        raise ValueError("truncation must satisfy 0 < a < b")
    y = _outcome(dataset)
    omega = dataset.weights
    P = model.P
    if base_cov is None or beta0 is None:
        fit = fit_mqle(model, dataset)
        if base_cov is None:
            base_cov = (2.38 ** 2 / P) * np.linalg.inv(dataset.N * fit.H)
        if beta0 is None:
            beta0 = fit.beta
    L = np.linalg.cholesky(base_cov)
    beta = np.asarray(beta0, dtype=float).copy()
    phi = float(np.clip(phi0 if phi0 is not None else math.sqrt(a * b), a, b))
    S = iterations - burn_in
    out_b = np.empty((S, P))
    out_p = np.empty(S)
    acc = 0
    for it in range(iterations):
        lp = model.log_quasi_posterior(beta, y, omega, phi)
        sd = math.sqrt(phi)
        for _ in range(inner_steps):
            cand = beta + sd * (L @ rng.standard_normal(P))
            lc = model.log_quasi_posterior(cand, y, omega, phi)
            if math.log(rng.random()) < lc - lp:
                beta, lp = cand, lc
                acc += 1
        phi = theory_g_update(beta, model.x, y, omega, model.family, (a, b), rng)
        if it >= burn_in:
            out_b[it - burn_in] = beta
            out_p[it - burn_in] = phi
    return GibbsResult(out_b, out_p, None, acc / (iterations * inner_steps))


def bbq_gibbs(model: ParametricModel, dataset: Dataset, iterations: int, rng, burn_in: int | None = None,
              estimate_kappa: bool = False, kappa_bounds=(0.5, 3.0), phi0: float | None = None) -> GibbsResult:
    """Parametric sampler with BBQ dispersion updates.

    Each iteration takes one RWM step for ``beta`` at the current ``(phi,
    kappa)`` and then sets ``phi = sum p_i Z_i^2`` with fresh Dirichlet
    weights.  With ``estimate_kappa`` (power family) ``kappa`` is chosen
    jointly by the weighted-likelihood profile.  The RWM proposal adapts
    during burn-in and is frozen afterward.
    """
    burn_in = iterations // 4 if burn_in is None else burn_in
    y = _outcome(dataset)
    omega = dataset.weights
    P = model.P
    fam = model.family
    power = fam.kind == "power"
    fit = fit_mqle(model, dataset)
    beta = fit.beta.copy()
    phi = fit.phi_moment if phi0 is None else float(phi0)
    kappa = fam.kappa if power else None
    scale = 2.38 ** 2 / P
    base = np.linalg.inv(dataset.N * fit.H)
    L = np.linalg.cholesky(scale * base)
    adaptive = False
    hist = np.empty((burn_in, P))
    S = iterations - burn_in
    out_b = np.empty((S, P))
    out_p = np.empty(S)
    out_k = np.empty(S) if power else None
    acc = 0
    degenerate = 0
    cur = model
    for it in range(iterations):
        lp = cur.log_quasi_posterior(beta, y, omega, phi)
        step = L @ rng.standard_normal(P)
        cand = beta + (step if adaptive else math.sqrt(phi) * step)
        lc = cur.log_quasi_posterior(cand, y, omega, phi)
        if math.log(rng.random()) < lc - lp:
            beta = cand
            if it >= burn_in:
                acc += 1
        mu = cur.mu(beta)
        if power and estimate_kappa:
            new_phi, kappa, deg = bbq_kappa_update(y, mu, omega, kappa_bounds, rng)
            cur = ParametricModel.__new__(ParametricModel)
            cur.x, cur.family, cur.prior_radius = model.x, fam.with_kappa(kappa), model.prior_radius
        else:
            z2 = standardized_residual(cur.family, y, mu, omega) ** 2
            new_phi, deg = bbq_update(z2, rng)
        degenerate += int(deg)
        if not deg:
            phi = new_phi
        if it < burn_in:
            hist[it] = beta
            if it >= 199 and (it + 1) % 100 == 0:
                emp = np.cov(hist[it // 2: it + 1].T).reshape(P, P)
                try:
                    L = np.linalg.cholesky(scale * emp + 1e-12 * np.eye(P))
                    adaptive = True
                except np.linalg.LinAlgError:
                    pass
        else:
            out_b[it - burn_in] = beta
            out_p[it - burn_in] = phi
            if power:
                out_k[it - burn_in] = kappa
    return GibbsResult(out_b, out_p, out_k, acc / S if S else float("nan"), degenerate)


# -- Bayesian bootstrap Poisson -----------------------------------------------------------

@dataclass
class BootstrapResult:
    beta: np.ndarray
    rejected: int = 0


def weighted_poisson_score(beta, x, y, p) -> np.ndarray:
    mu = np.exp(x @ beta)
    return x.T @ (p * (y - mu))


def bb_poisson(dataset: Dataset, rng, draws: int, x=None, max_retries: int = 100) -> BootstrapResult:
    """Draws of ``beta`` solving ``sum p_i (Y_i - mu_i) / mu_i * X_i = 0`` (log link).

    Note ``dmu/dr = mu`` so this is the Poisson score with weights ``p``.
    """
    X = dataset.x if x is None else np.asarray(x, dtype=float)
    model = ParametricModel(X, QuasiFamily("poisson"))
    y = _outcome(dataset)
    N = y.size
    out = np.empty((draws, model.P))
    rejected = 0
    beta_start = None
    for s in range(draws):
        for _ in range(max_retries):
            p = rng.dirichlet(np.ones(N))
            try:
                beta, _, _ = irls(model, y, p * N, beta0=beta_start)
            except OptimizationError:
                rejected += 1
                continue
            break
        else:
            raise OptimizationError("too many failed bootstrap draws", [])
        out[s] = beta
    return BootstrapResult(out, rejected)
