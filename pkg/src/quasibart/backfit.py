"""Bayesian backfitting for quasi-likelihood BART.

One sweep updates every tree given the others (through the cached partial
fit ``zeta``), then ``sigma_lambda``, the splitting probabilities and the
dispersion.  Leaf likelihoods all take the form
``exp(A lambda - B exp(lambda))`` for the conjugate families
(quasi-Poisson, quasi-gamma, quasi-multinomial with gamma latents), which
integrate in closed form against the log-gamma leaf prior.  The quasi-power
model uses a Laplace approximation with a normal leaf prior, then refines
each leaf draw with a slice-sampling pass on the exact full conditional.

The quasi-binomial family is run as the ``K = 2`` quasi-multinomial.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .dispersion import DispersionConfig, update_dispersion
from .family import Dataset, LeafPrior, QuasiFamily, leaf_prior_from_sigma
from .forest import (CHANGE, GROW, PRUNE, Cutpoints, DecisionTree, Ensemble, TreePrior,
                     ensemble_from_text, ensemble_predict, ensemble_to_text, propose_move,
                     sample_alpha_dirichlet, sample_sigma_lambda, sample_split_probs, slice_sample,
                     tree_log_prior)
from .summaries import Draws


class ConfigurationError(ValueError):
    pass


@dataclass
class SamplerConfig:
    """Chain settings.  ``iterations`` counts every sweep, burn-in included."""

    n_trees: int | None = None
    iterations: int = 1000
    burn_in: int = 500
    thin: int = 1
    dispersion: DispersionConfig = field(default_factory=DispersionConfig)
    phi_init: float = 1.0
    kappa_init: float | None = None
    k_scale: float = 2.0
    sigma_lambda: float | None = None
    update_sigma_lambda: bool = True
    update_split_probs: bool = True
    alpha_dirichlet: float = 1.0
    update_alpha: bool = False
    update_topology: bool = True
    tree_prior: TreePrior = field(default_factory=TreePrior)
    max_cuts: int = 100
    slice_passes: int = 3
    center: bool = True
    keep_ensembles: bool = False
    record_fitted: bool = True

    def validate(self) -> None:
        if self.n_trees is not None and self.n_trees < 1:
            raise ConfigurationError("n_trees must be at least 1")
        if self.burn_in < 0 or self.iterations < self.burn_in:
            raise ConfigurationError("need iterations >= burn_in >= 0")
        if self.thin < 1:
            raise ConfigurationError("thin must be >= 1")
        if not self.phi_init > 0:
            raise ConfigurationError("phi_init must be positive")
        if self.k_scale <= 0:
            raise ConfigurationError("k_scale must be positive")
        if self.slice_passes < 0:
            raise ConfigurationError("slice_passes must be >= 0")

    def trees_for(self, family: QuasiFamily) -> int:
        if self.n_trees is not None:
            return self.n_trees
        return 50 if family.kind in ("multinomial", "binomial") else 200


def default_sigma_scale(T: int, k_scale: float, multinomial: bool) -> float:
    """Half-Cauchy scale ``3 / (k sqrt T)``, or ``3 / (k sqrt(2T))`` for multinomial leaves."""
    return 3.0 / (k_scale * math.sqrt(2 * T if multinomial else T))


# -- leaf statistics ------------------------------------------------------------------

@dataclass
class LeafStats:
    """Per-node sums (rows are node slots of the tree; non-leaf slots are zero).

    ``A``/``B`` follow the per-family definitions:

    * Poisson: ``A = sum omega y / phi``, ``B = sum omega e^zeta / phi``
    * gamma:   ``A = sum omega / phi``,   ``B = sum omega y e^zeta / phi``
    * power:   ``A = sum omega y e^{zeta (1-kappa)}``, ``B = sum omega e^{zeta (2-kappa)}``
    * multinomial: ``A_k = sum n y_k``, ``B_k = sum xi e^{zeta_k}``
    """

    A: np.ndarray
    B: np.ndarray
    n: np.ndarray
    kind: str
    kappa: float | None = None

    @property
    def leaves_with_data(self) -> np.ndarray:
        return np.flatnonzero(self.n > 0)


def internal_family(family: QuasiFamily) -> QuasiFamily:
    return QuasiFamily("multinomial", K=2) if family.kind == "binomial" else family


def internal_outcome(family: QuasiFamily, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if family.kind == "binomial":
        return np.column_stack([y[:, 0], 1.0 - y[:, 0]])
    return y


def _obs_terms(kind: str, y, omega, zeta, phi, kappa, xi):
    """Per-observation summands of ``A`` and ``B`` given the partial fit ``zeta`` (N x K)."""
    w = omega[:, None]
    if kind == "poisson":
        return w * y / phi, w * np.exp(zeta) / phi
    if kind == "gamma":
        return np.broadcast_to(w / phi, zeta.shape), w * y * np.exp(zeta) / phi
    if kind == "power":
        return w * y * np.exp((1.0 - kappa) * zeta), w * np.exp((2.0 - kappa) * zeta)
    if kind == "multinomial":
        return w * y, xi[:, None] * np.exp(zeta)
    raise ValueError(kind)


def _bincount_stats(idx: np.ndarray, a_obs, b_obs, n_slots: int):
    K = a_obs.shape[1]
    n = np.bincount(idx, minlength=n_slots)
    if K == 1:
        A = np.bincount(idx, weights=a_obs[:, 0], minlength=n_slots)[:, None]
        B = np.bincount(idx, weights=b_obs[:, 0], minlength=n_slots)[:, None]
    else:
        flat = (idx[:, None] * K + np.arange(K)).ravel()
        A = np.bincount(flat, weights=np.ravel(a_obs), minlength=n_slots * K).reshape(n_slots, K)
        B = np.bincount(flat, weights=np.ravel(b_obs), minlength=n_slots * K).reshape(n_slots, K)
    return A, B, n


def leaf_stats(family: QuasiFamily, tree: DecisionTree, dataset: Dataset, zeta, phi: float,
               kappa: float | None = None, xi=None) -> LeafStats:
    """Exact sums over the observations routed to each leaf of ``tree``."""
    fam = internal_family(family)
    y = internal_outcome(family, dataset.y)
    zeta = np.asarray(zeta, dtype=float).reshape(y.shape[0], -1)
    if fam.kind == "power" and kappa is None:
        kappa = fam.kappa
    if fam.is_multinomial and xi is None:
        raise ValueError("multinomial leaf statistics need the xi latents")
    a_obs, b_obs = _obs_terms(fam.kind, y, dataset.weights, zeta, phi, kappa, xi)
    idx = tree.route(dataset.x)
    A, B, n = _bincount_stats(idx, a_obs, b_obs, tree.n_slots)
    return LeafStats(A, B, n, fam.kind, kappa)


# -- integrated likelihoods -------------------------------------------------------------

def conjugate_log_marginal(A_eff, B_eff, a: float, b: float, log_b: float | None = None):
    """``log[ b^a / Gamma(a) * Gamma(A + a) / (B + b)^(A + a) ]`` elementwise."""
    if log_b is None:
        log_b = math.log(b)
    A_eff = np.asarray(A_eff, dtype=float)
    B_eff = np.asarray(B_eff, dtype=float)
    return (a * log_b - special.gammaln(a) + special.gammaln(A_eff + a)
            - (A_eff + a) * np.log(B_eff + b))


def _h(x, t: float):
    if t == 0.0:
        return x
    return np.expm1(x * t) / t


def power_leaf_loglik(lam, A, B, phi: float, kappa: float):
    """Centred leaf log quasi-likelihood ``Lambda(lambda)``.

    ``Lambda(l) = [A h(l, 1-kappa) - B h(l, 2-kappa)] / phi`` with
    ``h(l, t) = expm1(l t) / t``; it differs from the raw form by a term that
    does not depend on the tree partition, is finite at ``kappa = 1, 2`` and
    vanishes for an empty leaf.
    """
    return (A * _h(lam, 1.0 - kappa) - B * _h(lam, 2.0 - kappa)) / phi


def power_laplace(A, B, phi: float, kappa: float, sigma: float):
    """Laplace pieces for power leaves: mode, curvature, and log marginal.

    Returns ``(lam_hat, info, log_marg, fallback)``; fallback leaves (``A = 0``
    or ``B = 0``) get ``log_marg = 0`` (prior-only marginal).
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    fallback = (A <= 0) | (B <= 0)
    Aa = np.where(fallback, 1.0, A)
    Bb = np.where(fallback, 1.0, B)
    lam_hat = np.log(Aa) - np.log(Bb)
    info = Aa * np.exp(lam_hat * (1.0 - kappa)) / phi
    s2 = sigma * sigma
    inv_i = 1.0 / info
    log_marg = (power_leaf_loglik(lam_hat, Aa, Bb, phi, kappa)
                + 0.5 * np.log(inv_i / (s2 + inv_i)) - 0.5 * lam_hat ** 2 / (inv_i + s2))
    log_marg = np.where(fallback, 0.0, log_marg)
    return lam_hat, info, log_marg, fallback


def integrated_log_lik(family: QuasiFamily, stats: LeafStats, prior: LeafPrior, phi: float,
                       kappa: float | None = None) -> float:
    """Log integrated leaf likelihood summed over leaves (and categories)."""
    kind = stats.kind
    mask = stats.n > 0
    if not np.any(mask):
        return 0.0
    A, B = stats.A[mask], stats.B[mask]
    if kind == "power":
        k = stats.kappa if kappa is None else kappa
        return float(np.sum(power_laplace(A, B, phi, k, prior.sigma_lambda)[2]))
    if kind == "multinomial":
        A = A / phi
    return float(np.sum(conjugate_log_marginal(A, B, prior.a, prior.b, prior.log_b)))


def _log_gamma_draw(shape, rng):
    """``log G`` for ``G ~ Gam(shape, 1)``, accurate for small shapes."""
    shape = np.asarray(shape, dtype=float)
    small = shape < 1.0
    if not np.any(small):
        return np.log(rng.gamma(shape))
    out = np.log(rng.gamma(np.where(small, shape + 1.0, shape)))
    u = rng.random(shape.shape)
    return np.where(small, out + np.log(u) / shape, out)


def _power_leaf_draw(A: float, B: float, phi: float, kappa: float, sigma: float, rng, fallback: bool,
                     passes: int = 3) -> float:
    if fallback:
        lam = sigma * rng.standard_normal()
        width = 2.0 * sigma
    else:
        lam_hat = math.log(A) - math.log(B)
        info = A * math.exp(lam_hat * (1.0 - kappa)) / phi
        prec = info + 1.0 / sigma ** 2
        lam = info * lam_hat / prec + rng.standard_normal() / math.sqrt(prec)
        width = 2.0 / math.sqrt(prec)
    s2 = sigma * sigma
    t1, t2 = 1.0 - kappa, 2.0 - kappa

    def logf(l):
        e1 = math.expm1(l * t1) / t1 if t1 != 0 else l
        e2 = math.expm1(l * t2) / t2 if t2 != 0 else l
        return (A * e1 - B * e2) / phi - 0.5 * l * l / s2

    # the Laplace draw alone is biased when log(A/B) sits far from the prior-shrunk mode;
    # a few slice passes on the exact conditional remove that
    for _ in range(passes):
        lam = slice_sample(logf, lam, rng, width=width)
    return lam


def sample_leaves(family: QuasiFamily, tree: DecisionTree, stats: LeafStats, prior: LeafPrior, phi: float,
                  rng, kappa: float | None = None, slice_passes: int = 3) -> np.ndarray:
    """Draw every leaf of ``tree`` from its full conditional (in place); returns the value array."""
    leaves = tree.leaves()
    A, B = stats.A[leaves], stats.B[leaves]
    if stats.kind == "power":
        k = stats.kappa if kappa is None else kappa
        fallback = (A[:, 0] <= 0) | (B[:, 0] <= 0)
        for pos, leaf in enumerate(leaves):
            tree.value[leaf] = np.array([_power_leaf_draw(A[pos, 0], B[pos, 0], phi, k, prior.sigma_lambda,
                                                          rng, bool(fallback[pos]), slice_passes)])
        return tree.value_array()
    if stats.kind == "multinomial":
        A = A / phi
    lam = _log_gamma_draw(prior.a + A, rng) - np.log(prior.b + B)
    for pos, leaf in enumerate(leaves):
        tree.value[leaf] = lam[pos]
    return tree.value_array()


# -- sampler state -------------------------------------------------------------------------

@dataclass
class SamplerState:
    ensemble: Ensemble
    leaf_idx: list
    r: np.ndarray
    phi: float
    kappa: float | None
    xi: np.ndarray | None
    rng: np.random.Generator
    family: QuasiFamily
    cutpoints: Cutpoints
    leaf_prior: LeafPrior
    sigma_scale: float
    sweep: int = 0
    stats: dict = field(default_factory=lambda: {
        "proposed": {GROW: 0, PRUNE: 0, CHANGE: 0},
        "accepted": {GROW: 0, PRUNE: 0, CHANGE: 0},
        "fallback_leaves": 0, "bbq_degenerate": 0, "kappa_accepted": 0, "kappa_proposed": 0})

    @property
    def zeta_total(self) -> np.ndarray:
        return self.r

    @property
    def leaf_kind(self) -> str:
        return "normal" if self.family.kind == "power" else "loggamma"


def _offset_for(family: QuasiFamily, y: np.ndarray, omega: np.ndarray) -> np.ndarray:
    K = y.shape[1]
    if y.shape[0] == 0:
        return np.zeros(K)
    wbar = np.average(y, axis=0, weights=omega)
    wbar = np.maximum(wbar, 1e-8)
    if family.kind in ("poisson", "power"):
        return np.log(wbar)
    if family.kind == "gamma":
        return -np.log(wbar)
    lw = np.log(wbar)
    return lw - lw.mean()


def init_state(dataset: Dataset, family: QuasiFamily, config: SamplerConfig, seed: int,
               cutpoints: Cutpoints | None = None) -> SamplerState:
    config.validate()
    dataset.validate_for(family)
    fam = internal_family(family)
    y = internal_outcome(family, dataset.y)
    T = config.trees_for(family)
    K = fam.K
    scale = default_sigma_scale(T, config.k_scale, fam.is_multinomial)
    sigma = config.sigma_lambda if config.sigma_lambda is not None else scale
    offset = _offset_for(fam, y, dataset.weights) if config.center else np.zeros(K)
    ens = Ensemble.empty(T, dataset.P, K, sigma, config.tree_prior, offset)
    ens.alpha_dirichlet = config.alpha_dirichlet
    if cutpoints is None:
        cutpoints = Cutpoints.from_data(dataset.x, config.max_cuts) if dataset.N else None
    if cutpoints is None:
        raise ConfigurationError("cutpoints must be supplied for an empty dataset")
    kappa = None
    if fam.kind == "power":
        kappa = float(config.kappa_init if config.kappa_init is not None else fam.kappa)
    rng = np.random.default_rng(np.random.PCG64(seed))
    r = np.tile(offset, (dataset.N, 1))
    idx = [np.zeros(dataset.N, dtype=np.intp) for _ in range(T)]
    xi = np.ones(dataset.N) if fam.is_multinomial else None
    return SamplerState(ensemble=ens, leaf_idx=idx, r=r, phi=float(config.phi_init), kappa=kappa, xi=xi,
                        rng=rng, family=fam, cutpoints=cutpoints, leaf_prior=leaf_prior_from_sigma(sigma),
                        sigma_scale=scale)


def _reroute(prop, idx: np.ndarray, xT: np.ndarray, x: np.ndarray, tree: DecisionTree) -> np.ndarray:
    new = idx.copy()
    if prop.move == GROW:
        sel = np.flatnonzero(idx == prop.node)
        if sel.size:
            j = prop.tree.var[prop.node]
            go = xT[j][sel] <= prop.tree.cut[prop.node]
            lo, hi = prop.children
            new[sel[go]] = lo
            new[sel[~go]] = hi
    elif prop.move == PRUNE:
        lo, hi = prop.children
        new[(idx == lo) | (idx == hi)] = prop.node
    else:
        sub = tree.subtree_leaves(prop.node)
        rows = np.flatnonzero(np.isin(idx, sub))
        prop.tree.route(x, node=prop.node, rows=rows, out=new)
    return new


class _Context:
    """Per-sweep constants shared by all tree updates."""

    def __init__(self, state: SamplerState, dataset: Dataset, y: np.ndarray, slice_passes: int = 3):
        self.x = dataset.x
        self.xT = np.ascontiguousarray(dataset.x.T)
        self.y = y
        self.omega = dataset.weights
        self.kind = state.family.kind
        self.slice_passes = slice_passes


def update_tree(state: SamplerState, t: int, ctx: _Context, update_topology: bool = True) -> bool:
    """MH update of tree ``t``'s topology followed by a fresh draw of its leaves.

    Returns whether the proposal was accepted.  On entry and exit ``state.r``
    includes tree ``t``; internally ``zeta = r - Tree_t``.
    """
    ens = state.ensemble
    tree = ens.trees[t]
    idx = state.leaf_idx[t]
    vals = tree.value_array()
    zeta = state.r - vals[idx]
    a_obs, b_obs = _obs_terms(ctx.kind, ctx.y, ctx.omega, zeta, state.phi, state.kappa, state.xi)
    prior = state.leaf_prior
    accepted = False
    stats_arrays = None
    if update_topology:
        A, B, n = _bincount_stats(idx, a_obs, b_obs, tree.n_slots)
        cur = LeafStats(A, B, n, ctx.kind, state.kappa)
        prop = propose_move(tree, state.rng, state.cutpoints, ens.split_probs)
        state.stats["proposed"][prop.move] += 1
        new_idx = _reroute(prop, idx, ctx.xT, ctx.x, tree)
        A2, B2, n2 = _bincount_stats(new_idx, a_obs, b_obs, prop.tree.n_slots)
        new = LeafStats(A2, B2, n2, ctx.kind, state.kappa)
        log_alpha = (integrated_log_lik(state.family, new, prior, state.phi, state.kappa)
                     - integrated_log_lik(state.family, cur, prior, state.phi, state.kappa)
                     + tree_log_prior(prop.tree, ens.tree_prior, ens.split_probs, state.cutpoints)
                     - tree_log_prior(tree, ens.tree_prior, ens.split_probs, state.cutpoints)
                     + prop.log_q_ratio)
        if log_alpha >= 0 or math.log(state.rng.random()) < log_alpha:
            accepted = True
            state.stats["accepted"][prop.move] += 1
            tree = prop.tree
            if prop.move != CHANGE:
                tree, remap = tree.canonical()
                new_idx = remap[new_idx]
                live = remap >= 0
                A3 = np.zeros((tree.n_slots, A2.shape[1]))
                B3 = np.zeros_like(A3)
                n3 = np.zeros(tree.n_slots, dtype=n2.dtype)
                A3[remap[live]], B3[remap[live]], n3[remap[live]] = A2[live], B2[live], n2[live]
                new = LeafStats(A3, B3, n3, ctx.kind, state.kappa)
            ens.trees[t] = tree
            idx = new_idx
            state.leaf_idx[t] = idx
            stats_arrays = new
        else:
            stats_arrays = cur
    else:
        A, B, n = _bincount_stats(idx, a_obs, b_obs, tree.n_slots)
        stats_arrays = LeafStats(A, B, n, ctx.kind, state.kappa)
    if ctx.kind == "power":
        leaves = tree.leaves()
        state.stats["fallback_leaves"] += int(np.sum((stats_arrays.A[leaves, 0] <= 0)
                                                     | (stats_arrays.B[leaves, 0] <= 0)))
    vals = sample_leaves(state.family, tree, stats_arrays, prior, state.phi, state.rng, state.kappa,
                         ctx.slice_passes)
    state.r = zeta + vals[idx]
    return accepted


def sample_xi(state: SamplerState, dataset: Dataset, rng=None) -> np.ndarray:
    """``xi_i ~ Gam(n_i / phi, sum_k exp(r_k(X_i)))`` (rate parameterisation)."""
    rng = state.rng if rng is None else rng
    rate = np.exp(state.r).sum(axis=1)
    state.xi = rng.gamma(dataset.weights / state.phi) / rate
    return state.xi


def fitted_mean(state: SamplerState) -> np.ndarray:
    """Current mean on the data scale, ``(N, K)``."""
    fam = state.family
    if fam.kind == "power":
        return np.exp(state.r)
    return fam.mean(state.r)


def gibbs_sweep(state: SamplerState, dataset: Dataset, config: SamplerConfig, y: np.ndarray | None = None,
                ctx: _Context | None = None) -> SamplerState:
    """One full sweep: xi (multinomial), trees, sigma_lambda, split probabilities, dispersion."""
    if y is None:
        y = internal_outcome(_reported_family(state), dataset.y)
    if ctx is None:
        ctx = _Context(state, dataset, y, config.slice_passes)
    fam = state.family
    ens = state.ensemble
    if fam.is_multinomial:
        sample_xi(state, dataset)
    for t in range(ens.T):
        update_tree(state, t, ctx, config.update_topology)
    if config.update_sigma_lambda:
        ens.sigma_lambda = sample_sigma_lambda(ens.leaf_values(), state.sigma_scale, state.rng,
                                               current=ens.sigma_lambda, leaf_prior=state.leaf_kind)
        state.leaf_prior = leaf_prior_from_sigma(ens.sigma_lambda)
    if config.update_split_probs:
        if config.update_alpha:
            ens.alpha_dirichlet = sample_alpha_dirichlet(ens.split_probs, state.rng)
        ens.split_probs = sample_split_probs(ens.split_counts(dataset.P), ens.alpha_dirichlet, state.rng)
    if dataset.N > 0:
        mu = fitted_mean(state)
        mu_arg = mu if fam.is_multinomial else mu[:, 0]
        y_arg = y if fam.is_multinomial else y[:, 0]
        kappa_before = state.kappa
        state.phi, state.kappa, info = update_dispersion(config.dispersion, fam if fam.kind != "power"
                                                         else fam.with_kappa(state.kappa),
                                                         y_arg, mu_arg, dataset.weights, state.phi,
                                                         state.kappa, state.rng)
        if info.degenerate:
            state.stats["bbq_degenerate"] += 1
        if info.kappa_accepted is not None:
            state.stats["kappa_proposed"] += 1
            state.stats["kappa_accepted"] += int(info.kappa_accepted)
        if state.kappa is not None and state.kappa != kappa_before:
            state.family = fam.with_kappa(state.kappa)
    state.sweep += 1
    return state


def cache_error(state: SamplerState, dataset: Dataset) -> float:
    """Max abs difference between the cached fit and a from-scratch evaluation."""
    if dataset.N == 0:
        return 0.0
    return float(np.max(np.abs(state.r - ensemble_predict(state.ensemble, dataset.x))))


def _reported_family(state: SamplerState) -> QuasiFamily:
    return state.__dict__.get("_reported", state.family)


def _report(state: SamplerState, reported: QuasiFamily, r: np.ndarray):
    """Map internal predictor values to reported (mu, r) arrays."""
    if reported.kind == "binomial":
        rr = r[:, 1] - r[:, 0]
        return reported.mean(rr), rr
    if reported.is_multinomial:
        return reported.mean(r), r.copy()
    if reported.kind == "power":
        return np.exp(r[:, 0]), r[:, 0].copy()
    return reported.mean(r[:, 0]), r[:, 0].copy()


def predict_mu(ensemble: Ensemble, family: QuasiFamily, x) -> np.ndarray:
    """Data-scale mean for new points from one ensemble draw."""
    r = ensemble_predict(ensemble, np.atleast_2d(np.asarray(x, dtype=float)))
    if family.kind == "binomial":
        return family.mean(r[:, 1] - r[:, 0])
    if family.is_multinomial:
        return family.mean(r)
    if family.kind == "power":
        return np.exp(r[:, 0])
    return family.mean(r[:, 0])


def run_chain(dataset: Dataset, family: QuasiFamily, config: SamplerConfig, seed: int,
              x_test=None, state: SamplerState | None = None, callback=None) -> Draws:
    """Run burn-in plus retained sweeps and collect :class:`Draws`.

    If ``state`` is given (e.g. from :func:`load_checkpoint`) the chain
    continues from ``state.sweep`` up to ``config.iterations``.
    """
    config.validate()
    if state is None:
        state = init_state(dataset, family, config, seed)
    state.__dict__["_reported"] = family
    y = internal_outcome(family, dataset.y)
    ctx = _Context(state, dataset, y, config.slice_passes)
    recs = {"phi": [], "kappa": [], "sigma": [], "counts": [], "mu": [], "r": [], "test": [], "it": [], "ens": []}
    x_test = None if x_test is None else np.atleast_2d(np.asarray(x_test, dtype=float))
    while state.sweep < config.iterations:
        gibbs_sweep(state, dataset, config, y=y, ctx=ctx)
        it = state.sweep - 1
        if it >= config.burn_in and (it - config.burn_in) % config.thin == 0:
            recs["phi"].append(state.phi)
            recs["kappa"].append(np.nan if state.kappa is None else state.kappa)
            recs["sigma"].append(state.ensemble.sigma_lambda)
            recs["counts"].append(state.ensemble.split_counts(dataset.P))
            recs["it"].append(it)
            if config.record_fitted:
                mu, rr = _report(state, family, state.r)
                recs["mu"].append(mu)
                recs["r"].append(rr)
            if x_test is not None:
                recs["test"].append(predict_mu(state.ensemble, family, x_test))
            if config.keep_ensembles:
                recs["ens"].append(ensemble_to_text(state.ensemble))
        if callback is not None:
            callback(state)
    S = len(recs["phi"])
    P = dataset.P
    draws = Draws(
        phi=np.array(recs["phi"], dtype=float),
        kappa=np.array(recs["kappa"], dtype=float),
        sigma_lambda=np.array(recs["sigma"], dtype=float),
        split_counts=np.array(recs["counts"], dtype=np.int64).reshape(S, P),
        fitted_mu=np.array(recs["mu"]) if config.record_fitted and S else None,
        r_fitted=np.array(recs["r"]) if config.record_fitted and S else None,
        test_mu=np.array(recs["test"]) if x_test is not None and S else None,
        iterations=np.array(recs["it"], dtype=np.int64),
        ensembles=recs["ens"] if config.keep_ensembles else None,
        metadata={"seed": seed, "family": family.kind, "kappa_init": family.kappa, "K": family.K,
                  "n_trees": state.ensemble.T, "sweeps": state.sweep, "burn_in": config.burn_in,
                  "thin": config.thin, "dispersion": config.dispersion.method,
                  "sampler_stats": json.loads(json.dumps(state.stats))},
    )
    draws.metadata["state"] = state
    return draws


# -- checkpoints --------------------------------------------------------------------------

def _fmt_vec(v) -> str:
    return ",".join(repr(float(x)) for x in np.ravel(v))


def checkpoint_text(state: SamplerState) -> str:
    """Key-value scalar block followed by the forest text format."""
    reported = _reported_family(state)
    lines = [
        "# quasibart checkpoint v1",
        f"family={reported.kind}",
        f"K={reported.K}",
        f"kappa={'' if state.kappa is None else repr(float(state.kappa))}",
        f"phi={state.phi!r}",
        f"sigma_lambda={state.ensemble.sigma_lambda!r}",
        f"sigma_scale={state.sigma_scale!r}",
        f"sweep={state.sweep}",
        f"xi={'' if state.xi is None else _fmt_vec(state.xi)}",
        f"r={_fmt_vec(state.r)}",
        f"rng_state={json.dumps(state.rng.bit_generator.state)}",
        f"stats={json.dumps(state.stats)}",
        "trees:",
    ]
    return "\n".join(lines) + "\n" + ensemble_to_text(state.ensemble)


def save_checkpoint(state: SamplerState, path) -> None:
    with open(path, "w") as fh:
        fh.write(checkpoint_text(state))


def load_checkpoint(source, dataset: Dataset, config: SamplerConfig) -> SamplerState:
    """Rebuild a :class:`SamplerState` from checkpoint text or a path."""
    text = source
    if "\n" not in str(source):
        with open(source) as fh:
            text = fh.read()
    head, _, forest = text.partition("trees:\n")
    kv = {}
    for ln in head.splitlines():
        if ln.startswith("#") or "=" not in ln:
            continue
        k, v = ln.split("=", 1)
        kv[k] = v
    K = int(kv["K"])
    kappa = float(kv["kappa"]) if kv["kappa"] else None
    if kv["family"] == "power":
        reported = QuasiFamily("power", kappa=kappa)
    elif kv["family"] == "multinomial":
        reported = QuasiFamily("multinomial", K=K)
    else:
        reported = QuasiFamily(kv["family"])
    fam = internal_family(reported)
    ens = ensemble_from_text(forest)
    ens.tree_prior = config.tree_prior
    cutpoints = Cutpoints.from_data(dataset.x, config.max_cuts)
    rng = np.random.default_rng(np.random.PCG64(0))
    rng.bit_generator.state = json.loads(kv["rng_state"])
    idx = [t.route(dataset.x) for t in ens.trees]
    # the stored cache (not a recomputation) keeps the continued chain bit-identical
    r = np.array([float(v) for v in kv["r"].split(",")]).reshape(dataset.N, -1) if kv.get("r") else \
        ensemble_predict(ens, dataset.x)
    state = SamplerState(
        ensemble=ens, leaf_idx=idx, r=r, phi=float(kv["phi"]), kappa=kappa,
        xi=np.array([float(v) for v in kv["xi"].split(",")]) if kv["xi"] else None,
        rng=rng, family=fam, cutpoints=cutpoints, leaf_prior=leaf_prior_from_sigma(ens.sigma_lambda),
        sigma_scale=float(kv["sigma_scale"]), sweep=int(kv["sweep"]), stats=json.loads(kv["stats"]))
    state.__dict__["_reported"] = reported
    return state


# -- pseudo-empirical Bayes driver -----------------------------------------------------------

def run_pseudo_eb(dataset: Dataset, family: QuasiFamily, config: SamplerConfig, seed: int, x_test=None) -> Draws:
    """Iterate short fixed-dispersion chains and pseudo-likelihood maximisation,
    then run the main chain at the final ``(phi, kappa)``."""
    from dataclasses import replace

    from .dispersion import pseudo_eb

    dcfg = config.dispersion
    fixed = replace(dcfg, method="fixed")
    calls = [0]

    def runner(phi, kappa):
        calls[0] += 1
        short = replace(config, iterations=dcfg.eb_sweeps, burn_in=dcfg.eb_burn_in, thin=1, dispersion=fixed,
                        phi_init=phi, kappa_init=kappa, keep_ensembles=False, record_fitted=True)
        d = run_chain(dataset, family, short, seed + 104729 * calls[0])
        mu = d.fitted_mu
        if family.kind == "binomial":
            mu = np.stack([mu, 1.0 - mu], axis=-1)
        return mu

    fam = internal_family(family)
    kappa0 = config.kappa_init if config.kappa_init is not None else fam.kappa
    eb_ds = dataset if family.kind != "binomial" else Dataset(dataset.x, internal_outcome(family, dataset.y),
                                                              dataset.weights, dataset.feature_names)
    res = pseudo_eb(eb_ds, fam, runner, iterations=dcfg.eb_iterations, phi0=config.phi_init, kappa0=kappa0,
                    estimate_kappa=dcfg.estimate_kappa, kappa_bounds=dcfg.kappa_bounds)
    main = replace(config, dispersion=fixed, phi_init=res.phi, kappa_init=res.kappa)
    draws = run_chain(dataset, family, main, seed, x_test=x_test)
    draws.metadata["dispersion"] = "pseudo-eb"
    draws.metadata["pseudo_eb"] = {"trajectory": [list(t) for t in res.trajectory],
                                   "objective_before": res.objective_before,
                                   "objective_after": res.objective_after}
    return draws


def fit(dataset: Dataset, family: QuasiFamily, config: SamplerConfig, seed: int, x_test=None) -> Draws:
    """Run one chain with the configured dispersion strategy."""
    if config.dispersion.method == "pseudo-eb":
        return run_pseudo_eb(dataset, family, config, seed, x_test=x_test)
    return run_chain(dataset, family, config, seed, x_test=x_test)
