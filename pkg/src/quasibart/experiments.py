"""Replication harness for the synthetic experiments.

Every ``run_*`` function performs one replication and returns a list of
flat metric rows (dicts); :func:`run_bench` loops over replications and
collects the rows in a fixed column order per scenario.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .backfit import SamplerConfig, fit
from .dispersion import DispersionConfig
from .family import QuasiFamily
from .parametric import ParametricModel, bb_poisson, bbq_gibbs, fit_mqle
from .summaries import effective_sample_size, equal_tail_interval, hpd_intervals
from .synth import (SCENARIOS, gen_dirichlet_multinomial, gen_gamma_power, gen_invgamma_friedman, gen_power_grid,
                    gen_qpois)

COLUMNS = {
    "qpois_bvm": ["rep", "coef", "mqle", "post_mean", "post_sd", "asym_se", "z_mean", "sd_ratio", "phi_hat",
                  "phi_post_mean"],
    "power_grid": ["rep", "kappa", "phi", "method", "rmse", "bias", "coverage", "width"],
    "invgamma_friedman": ["rep", "phi", "mse_quasi_gamma", "mse_gamma", "relative_mse", "phi_quasi", "phi_gamma"],
    "gamma_power": ["rep", "phi", "kappa", "phi_mean", "phi_lo", "phi_hi", "kappa_mean", "kappa_lo", "kappa_hi",
                    "ess_phi", "ess_kappa", "phi_covered", "kappa_covered"],
    "dirichlet_multinomial": ["rep", "rho", "phi", "rmse", "width", "coverage", "phi_mean"],
}


@dataclass
class BenchScale:
    """Size knobs shared by the scenarios; ``None`` picks each scenario's default."""

    N: int | None = None
    P: int | None = None
    phi: float | None = None
    trees: int = 50
    iterations: int | None = None
    burn_in: int | None = None
    seed: int = 0


def _intercept(x):
    return np.column_stack([np.ones(x.shape[0]), x])


def run_qpois_bvm(rep: int, scale: BenchScale) -> list[dict]:
    """BBQ quasi-posterior versus the asymptotic normal around the MQLE."""
    N = scale.N or 2000
    phi = scale.phi or 2.0
    seed = scale.seed + rep
    data = gen_qpois(N, (1.0, 0.5), phi, seed)
    model = ParametricModel(_intercept(data.x), QuasiFamily("poisson"))
    mq = fit_mqle(model, data.dataset)
    se = np.sqrt(np.diag(mq.asymptotic_cov(N)))
    iters = scale.iterations or 10000
    burn = scale.burn_in if scale.burn_in is not None else 2000
    g = bbq_gibbs(model, data.dataset, iters, np.random.default_rng(seed), burn_in=burn)
    m, s = g.beta.mean(axis=0), g.beta.std(axis=0, ddof=1)
    return [{"rep": rep, "coef": j, "mqle": mq.beta[j], "post_mean": m[j], "post_sd": s[j], "asym_se": se[j],
             "z_mean": (m[j] - mq.beta[j]) / s[j], "sd_ratio": s[j] / se[j], "phi_hat": mq.phi_moment,
             "phi_post_mean": float(g.phi.mean())} for j in range(model.P)]


def _interval_metrics(est, lo, hi, truth):
    est, lo, hi, truth = (np.asarray(v, dtype=float) for v in (est, lo, hi, truth))
    return {"rmse": float(np.sqrt(np.mean((est - truth) ** 2))), "bias": float(np.mean(est - truth)),
            "coverage": float(np.mean((lo <= truth) & (truth <= hi))), "width": float(np.mean(hi - lo))}


def run_power_grid(rep: int, scale: BenchScale, kappa: float, phi: float) -> list[dict]:
    """One replication of one (kappa, phi) cell; metrics over the five slopes."""
    N = scale.N or 500
    seed = scale.seed + 100000 * int(kappa) + 1000 * int(round(10 * phi)) + rep
    data = gen_power_grid(N, kappa, phi, seed)
    X = _intercept(data.x)
    truth = data.beta
    rows = []
    z = 1.959963984540054
    for name, fam in (("QP", QuasiFamily("poisson")), ("QG", QuasiFamily("power", kappa=2.0))):
        mq = fit_mqle(ParametricModel(X, fam), data.dataset)
        se = np.sqrt(np.diag(mq.asymptotic_cov(N)))[1:]
        b = mq.beta[1:]
        rows.append({"method": name, **_interval_metrics(b, b - z * se, b + z * se, truth)})
    rng = np.random.default_rng(seed)
    bb = bb_poisson(data.dataset, rng, scale.iterations or 500, x=X).beta[:, 1:]
    lo, hi = np.quantile(bb, [0.025, 0.975], axis=0)
    rows.append({"method": "BBP", **_interval_metrics(bb.mean(axis=0), lo, hi, truth)})
    iters = scale.iterations or 3000
    burn = scale.burn_in if scale.burn_in is not None else 1000
    g = bbq_gibbs(ParametricModel(X, QuasiFamily("power", kappa=1.5)), data.dataset, iters, rng, burn_in=burn,
                  estimate_kappa=True)
    b = g.beta[:, 1:]
    lo, hi = np.quantile(b, [0.025, 0.975], axis=0)
    rows.append({"method": "BBQ", **_interval_metrics(b.mean(axis=0), lo, hi, truth)})
    return [{"rep": rep, "kappa": kappa, "phi": phi, **r} for r in rows]


def _bart_config(scale: BenchScale, method: str, iterations: int, burn_in: int, **kw) -> SamplerConfig:
    return SamplerConfig(n_trees=scale.trees, iterations=scale.iterations or iterations,
                         burn_in=scale.burn_in if scale.burn_in is not None else burn_in,
                         dispersion=DispersionConfig(method, **kw))


def run_invgamma_friedman(rep: int, scale: BenchScale) -> list[dict]:
    """Quasi-gamma BART (BBQ) against a gamma-likelihood BART on inverse-gamma data."""
    N = scale.N or 250
    P = scale.P or 10
    phi = scale.phi or 2.0
    seed = scale.seed + rep
    data = gen_invgamma_friedman(N, P, phi, seed)
    fam = QuasiFamily("gamma")
    out = {}
    for name, method in (("quasi_gamma", "bbq"), ("gamma", "gamma-lik")):
        d = fit(data.dataset, fam, _bart_config(scale, method, 1500, 500), seed)
        out[name] = (float(np.mean((d.fitted_mu.mean(axis=0) - data.mu) ** 2)), float(d.phi.mean()))
    return [{"rep": rep, "phi": phi, "mse_quasi_gamma": out["quasi_gamma"][0], "mse_gamma": out["gamma"][0],
             "relative_mse": out["gamma"][0] / out["quasi_gamma"][0], "phi_quasi": out["quasi_gamma"][1],
             "phi_gamma": out["gamma"][1]}]


def run_gamma_power(rep: int, scale: BenchScale) -> list[dict]:
    """Quasi-power BART with BBQ estimation of ``(phi, kappa)``."""
    N = scale.N or 2500
    P = scale.P or 10
    phi = scale.phi or 1.0
    seed = scale.seed + rep
    data = gen_gamma_power(N, P, phi, seed)
    cfg = _bart_config(scale, "bbq", 2500, 500, estimate_kappa=True)
    d = fit(data.dataset, QuasiFamily("power", kappa=1.0), cfg, seed)
    plo, phi_hi = equal_tail_interval(d.phi)
    klo, khi = equal_tail_interval(d.kappa)
    return [{"rep": rep, "phi": phi, "kappa": 1.5, "phi_mean": float(d.phi.mean()), "phi_lo": plo,
             "phi_hi": phi_hi, "kappa_mean": float(d.kappa.mean()), "kappa_lo": klo, "kappa_hi": khi,
             "ess_phi": effective_sample_size(d.phi), "ess_kappa": effective_sample_size(d.kappa),
             "phi_covered": int(plo <= phi <= phi_hi), "kappa_covered": int(klo <= 1.5 <= khi)}]


def run_dirichlet_multinomial(rep: int, scale: BenchScale, rho: float = 0.5) -> list[dict]:
    """Quasi-multinomial BART; RMSE, mean 95% HPD width and coverage for ``mu_1``."""
    N = scale.N or 1000
    seed = scale.seed + rep
    data = gen_dirichlet_multinomial(N, rho, seed)
    fam = QuasiFamily("multinomial", K=3)
    d = fit(data.dataset, fam, _bart_config(scale, "bbq", 2000, 500), seed)
    mu1 = d.fitted_mu[:, :, 0]
    est = mu1.mean(axis=0)
    iv = hpd_intervals(mu1, 0.95)
    truth = data.mu[:, 0]
    return [{"rep": rep, "rho": rho, "phi": data.phi, "rmse": float(np.sqrt(np.mean((est - truth) ** 2))),
             "width": float(np.mean(iv[:, 1] - iv[:, 0])),
             "coverage": float(np.mean((iv[:, 0] <= truth) & (truth <= iv[:, 1]))),
             "phi_mean": float(d.phi.mean())}]


def _one(args):
    scenario, rep, scale, extra = args
    if scenario == "qpois_bvm":
        return run_qpois_bvm(rep, scale)
    if scenario == "power_grid":
        rows = []
        for kappa in extra.get("kappas", (1, 2)):
            for phi in extra.get("phis", (0.5, 2.0)):
                rows.extend(run_power_grid(rep, scale, kappa, phi))
        return rows
    if scenario == "invgamma_friedman":
        return run_invgamma_friedman(rep, scale)
    if scenario == "gamma_power":
        return run_gamma_power(rep, scale)
    return run_dirichlet_multinomial(rep, scale, extra.get("rho", 0.5))


def worker_count() -> int:
    """Worker processes from ``QUASIBART_WORKERS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("QUASIBART_WORKERS", "1")))
    except ValueError:
        return 1


def run_bench(scenario: str, reps: int, scale: BenchScale | None = None, workers: int | None = None,
              **extra) -> tuple[list[str], list[dict]]:
    """Run ``reps`` replications; returns ``(columns, rows)`` in replication order."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    scale = scale or BenchScale()
    workers = worker_count() if workers is None else workers
    jobs = [(scenario, rep, replace(scale), extra) for rep in range(reps)]
    if workers > 1 and reps > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_one, jobs))
    else:
        parts = [_one(j) for j in jobs]
    return COLUMNS[scenario], [row for p in parts for row in p]


def summarize_rows(scenario: str, rows: list[dict]) -> dict:
    """Aggregate metrics the way the corresponding figure or table reports them."""
    if not rows:
        return {}
    if scenario == "power_grid":
        out = {}
        for key in sorted({(r["kappa"], r["phi"], r["method"]) for r in rows}):
            sel = [r for r in rows if (r["kappa"], r["phi"], r["method"]) == key]
            out[key] = {m: float(np.mean([r[m] for r in sel])) for m in ("rmse", "bias", "coverage", "width")}
        return out
    if scenario == "invgamma_friedman":
        return {"median_relative_mse": float(np.median([r["relative_mse"] for r in rows]))}
    numeric = [c for c in COLUMNS[scenario] if c not in ("rep", "method")]
    return {c: float(np.mean([r[c] for r in rows])) for c in numeric if not isinstance(rows[0][c], str)}


def format_value(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)
