"""Command-line interface: ``quasibart {fit,predict,summarize,simulate,bench}``.

Exit codes
----------
0  success
2  usage error (bad flags, unknown scenario)
3  parse error in an input file (line number reported)
4  schema or data error (missing column, outcome outside the family's domain)
5  configuration error (invalid values or unknown keys)
6  numerical error (optimizer failure, empty truncation mass, non-finite output)
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import experiments
from .backfit import ConfigurationError, SamplerConfig, checkpoint_text, fit
from .dispersion import METHODS, DispersionConfig
from .family import Dataset, DomainError, NumericalError, QuasiFamily, family_from_name
from .forest import TreePrior, ensembles_from_text
from .parametric import OptimizationError
from .summaries import (Draws, effective_sample_size, equal_tail_interval, gelman_rubin, hpd_interval,
                        hpd_intervals, inclusion_probabilities, variable_importance)
from .synth import SCENARIOS, ScenarioError, ScenarioSpec

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_SCHEMA, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3, 4, 5, 6
WORKERS_ENV = "QUASIBART_WORKERS"


class ParseError(ValueError):
    pass


class SchemaError(ValueError):
    pass


# -- CSV I/O -----------------------------------------------------------------------------

def _outcome_columns(header: list[str], kind: str) -> list[str]:
    ys = sorted((h for h in header if h.startswith("y") and h[1:].isdigit()), key=lambda h: int(h[1:]))
    if kind == "multinomial":
        if not ys:
            raise SchemaError("multinomial input needs outcome columns y1..yK")
        expected = [f"y{k}" for k in range(1, len(ys) + 1)]
        if ys != expected:
            raise SchemaError(f"outcome columns must be {', '.join(expected)}")
        return ys
    if "y" not in header:
        raise SchemaError("missing outcome column 'y'")
    return ["y"]


def read_csv(path, kind: str, feature_names: list[str] | None = None) -> Dataset:
    """Read a dataset; ``n`` (trials) and ``w`` (weights) columns multiply into the weights."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: line 1: empty file (a header row is required)")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise ParseError(f"{path}: line 1: duplicate column names")
    ycols = _outcome_columns(header, kind)
    special = set(ycols) | {"n", "w"}
    feats = [h for h in header if h not in special]
    if feature_names is not None:
        for f in feature_names:
            if f not in header:
                raise SchemaError(f"missing feature column '{f}'")
        feats = list(feature_names)
    pos = {h: i for i, h in enumerate(header)}
    values = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:]):
        line = i + 2
        if len(row) != len(header):
            raise ParseError(f"{path}: line {line}: expected {len(header)} fields, found {len(row)}")
        try:
            values[i] = [float(v) for v in row]
        except ValueError as exc:
            raise ParseError(f"{path}: line {line}: {exc}") from None
        if not np.all(np.isfinite(values[i])):
            raise ParseError(f"{path}: line {line}: non-finite value")
    x = values[:, [pos[f] for f in feats]] if feats else np.zeros((values.shape[0], 0))
    y = values[:, [pos[c] for c in ycols]]
    w = np.ones(values.shape[0])
    if "n" in pos:
        w = w * values[:, pos["n"]]
    if "w" in pos:
        w = w * values[:, pos["w"]]
    if np.any(w <= 0):
        bad = int(np.flatnonzero(w <= 0)[0])
        raise DomainError(f"row {bad}: weights and trial counts must be positive")
    return Dataset(x, y, w, feats)


def write_csv(path, dataset: Dataset, trials_column: bool = False) -> None:
    """Write ``dataset`` in the input format (weights as ``n`` or ``w``)."""
    K = dataset.K
    ycols = ["y"] if K == 1 else [f"y{k}" for k in range(1, K + 1)]
    wcol = "n" if trials_column else "w"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(ycols + [wcol] + list(dataset.feature_names))
        for i in range(dataset.N):
            wr.writerow([repr(float(v)) for v in dataset.y[i]] + [repr(float(dataset.weights[i]))]
                        + [repr(float(v)) for v in dataset.x[i]])


# -- run configuration ---------------------------------------------------------------------

@dataclasses.dataclass
class RunConfig:
    """Everything a ``fit`` run needs.  Round-trips through :meth:`to_text`."""

    family: str = "poisson"
    kappa: float | None = None
    trees: int | None = None
    chains: int = 1
    iterations: int = 1000
    burn_in: int = 500
    thin: int = 1
    dispersion: str = "bbq"
    prior_a: float = 0.5
    prior_b: float = 0.5
    kappa_bounds: tuple = (0.5, 3.0)
    estimate_kappa: bool = False
    k_scale: float = 2.0
    alpha_dirichlet: float = 1.0
    update_alpha: bool = False
    seed: int = 0
    level: float = 0.95
    input: str = ""
    output: str = "fit_out"
    test: str = ""

    def validate(self) -> None:
        if self.family.replace("quasi-", "") not in ("binomial", "poisson", "gamma", "power", "multinomial"):
            raise ConfigurationError(f"unknown family {self.family!r}")
        if self.dispersion not in METHODS or self.dispersion == "gamma-lik" and self.family != "gamma":
            raise ConfigurationError(f"unknown dispersion method {self.dispersion!r}")
        if not self.iterations > self.burn_in >= 0:
            raise ConfigurationError("need iterations > burn_in >= 0")
        if self.chains < 1:
            raise ConfigurationError("chains must be >= 1")
        if self.thin < 1:
            raise ConfigurationError("thin must be >= 1")
        if self.trees is not None and self.trees < 1:
            raise ConfigurationError("trees must be >= 1")
        if not (self.prior_a > 0 and self.prior_b > 0):
            raise ConfigurationError("prior_a and prior_b must be positive")
        lo, hi = self.kappa_bounds
        if not lo < hi:
            raise ConfigurationError("kappa_bounds must satisfy lo < hi")
        if not 0 < self.level < 1:
            raise ConfigurationError("level must lie in (0, 1)")

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                s = ""
            elif isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, tuple):
                s = ",".join(repr(float(t)) for t in v)
            elif isinstance(v, float):
                s = repr(v)
            else:
                s = str(v)
            lines.append(f"{f.name}={s}")
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            n_trees=self.trees, iterations=self.iterations, burn_in=self.burn_in, thin=self.thin,
            dispersion=DispersionConfig(self.dispersion, prior_a=self.prior_a, prior_b=self.prior_b,
                                        kappa_bounds=tuple(self.kappa_bounds), estimate_kappa=self.estimate_kappa),
            kappa_init=self.kappa, k_scale=self.k_scale, alpha_dirichlet=self.alpha_dirichlet,
            update_alpha=self.update_alpha, tree_prior=TreePrior(), keep_ensembles=True)


_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, raw: str):
    t = _TYPES[key]
    raw = raw.strip()
    try:
        if "tuple" in t:
            lo, hi = (float(v) for v in raw.split(","))
            return (lo, hi)
        if "bool" in t:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if raw == "" and "None" in t:
            return None
        if t.startswith("int"):
            return int(raw)
        if t.startswith("float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Flat ``key=value`` lines; ``#`` starts a comment; unknown keys are errors."""
    cfg = dataclasses.replace(base or RunConfig())
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {n}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _TYPES:
            raise ConfigurationError(f"config line {n}: unknown key {key!r}")
        setattr(cfg, key, _coerce(key, val))
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config: {exc}") from None


# -- fit ------------------------------------------------------------------------------------

def _family_for(cfg: RunConfig, dataset_K: int) -> QuasiFamily:
    kind = cfg.family.replace("quasi-", "")
    if kind == "multinomial":
        return QuasiFamily("multinomial", K=dataset_K)
    if kind == "power":
        return QuasiFamily("power", kappa=1.5 if cfg.kappa is None else cfg.kappa)
    if cfg.kappa is not None:
        raise ConfigurationError("--kappa only applies to the power family")
    return family_from_name(kind)


def _chain_job(args):
    dataset, family, scfg, seed, x_test = args
    d = fit(dataset, family, scfg, seed, x_test=x_test)
    # the live state does not cross process boundaries cheaply; keep its text form
    d.metadata["checkpoint"] = checkpoint_text(d.metadata.pop("state"))
    return d


def _fmt(v) -> str:
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def write_draws(path, draws: Draws, P: int) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iter", "phi", "kappa", "sigma_lambda"] + [f"split_count_{j + 1}" for j in range(P)])
        for s in range(draws.n_draws):
            wr.writerow([int(draws.iterations[s]), _fmt(draws.phi[s]), _fmt(draws.kappa[s]),
                         _fmt(draws.sigma_lambda[s])] + [int(c) for c in draws.split_counts[s]])


def read_draws(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    arr = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(len(rows) - 1, len(header))
    P = len(header) - 4
    return {"iter": arr[:, 0].astype(int), "phi": arr[:, 1], "kappa": arr[:, 2], "sigma_lambda": arr[:, 3],
            "split_counts": arr[:, 4:].astype(np.int64).reshape(-1, P)}


def _mu_columns(N: int, K: int) -> list[str]:
    if K == 1:
        return [f"mu_{i + 1}" for i in range(N)]
    return [f"mu_{i + 1}_{k + 1}" for i in range(N) for k in range(K)]


def write_fitted(path, draws: Draws, N: int, K: int) -> None:
    mu = np.zeros((0, N * K)) if draws.fitted_mu is None else draws.fitted_mu.reshape(draws.n_draws, -1)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iter"] + _mu_columns(N, K))
        for s in range(draws.n_draws):
            wr.writerow([int(draws.iterations[s])] + [repr(float(v)) for v in mu[s]])


def _scalar_summary(name: str, chains: list[np.ndarray], level: float) -> dict:
    allv = np.concatenate(chains) if chains else np.zeros(0)
    row = {"parameter": name, "mean": math.nan, "sd": math.nan, "et_lo": math.nan, "et_hi": math.nan,
           "hpd_lo": math.nan, "hpd_hi": math.nan, "rhat": math.nan, "ess": math.nan}
    if allv.size == 0 or np.all(np.isnan(allv)):
        return row
    row["mean"] = float(allv.mean())
    if allv.size >= 2:
        row["sd"] = float(allv.std(ddof=1))
        row["et_lo"], row["et_hi"] = equal_tail_interval(allv, level)
        row["hpd_lo"], row["hpd_hi"] = hpd_interval(allv, level)
    S = min(len(c) for c in chains)
    if S >= 4:
        stacked = np.stack([c[:S] for c in chains])
        row["ess"] = effective_sample_size(stacked)
        if len(chains) >= 2:
            row["rhat"] = gelman_rubin(stacked)
    return row


SUMMARY_COLUMNS = ["parameter", "mean", "sd", "et_lo", "et_hi", "hpd_lo", "hpd_hi", "rhat", "ess"]


def summary_rows(chain_draws: list[dict], feature_names: list[str], level: float) -> list[dict]:
    rows = [_scalar_summary(p, [d[p] for d in chain_draws], level) for p in ("phi", "kappa", "sigma_lambda")]
    counts = np.concatenate([d["split_counts"] for d in chain_draws])
    if counts.shape[0]:
        incl = inclusion_probabilities(counts)
        imp = variable_importance(counts)
        for j, f in enumerate(feature_names):
            rows.append({**{c: math.nan for c in SUMMARY_COLUMNS}, "parameter": f"inclusion_{f}", "mean": incl[j]})
            rows.append({**{c: math.nan for c in SUMMARY_COLUMNS}, "parameter": f"importance_{f}", "mean": imp[j]})
    return rows


def write_summary(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(SUMMARY_COLUMNS)
        for r in rows:
            wr.writerow([r["parameter"]] + [_fmt(r[c]) for c in SUMMARY_COLUMNS[1:]])


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise ConfigurationError(f"{WORKERS_ENV} must be an integer") from None


def cmd_fit(cfg: RunConfig) -> dict:
    cfg.validate()
    if not cfg.input:
        raise ConfigurationError("no input file given")
    kind = cfg.family.replace("quasi-", "")
    dataset = read_csv(cfg.input, kind)
    family = _family_for(cfg, dataset.K)
    dataset.validate_for(family)
    x_test = read_csv(cfg.test, kind, dataset.feature_names).x if cfg.test else None
    scfg = cfg.sampler_config()
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    jobs = [(dataset, family, scfg, cfg.seed + c, x_test) for c in range(cfg.chains)]
    workers = min(_workers(), cfg.chains)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_chain_job, jobs))
    else:
        results = [_chain_job(j) for j in jobs]
    K = family.K if family.is_multinomial else 1
    chain_records = []
    for c, d in enumerate(results):
        write_draws(out / f"chain_{c + 1}_draws.csv", d, dataset.P)
        write_fitted(out / f"chain_{c + 1}_fitted.csv", d, dataset.N, K)
        (out / f"chain_{c + 1}_ensembles.txt").write_text("".join(d.ensembles or []))
        (out / f"chain_{c + 1}_checkpoint.txt").write_text(d.metadata["checkpoint"])
        if d.test_mu is not None:
            write_fitted(out / f"chain_{c + 1}_test.csv", Draws(d.phi, d.kappa, d.sigma_lambda, d.split_counts,
                                                               fitted_mu=d.test_mu, iterations=d.iterations),
                         len(x_test), K)
        chain_records.append({"phi": d.phi, "kappa": d.kappa, "sigma_lambda": d.sigma_lambda,
                              "split_counts": d.split_counts})
    rows = summary_rows(chain_records, dataset.feature_names, cfg.level)
    write_summary(out / "summary.csv", rows)
    mus = [d.fitted_mu for d in results if d.fitted_mu is not None and d.n_draws]
    fitted_mean = np.concatenate(mus).mean(axis=0) if mus else None
    if fitted_mean is not None and not np.all(np.isfinite(fitted_mean)):
        raise NumericalError("non-finite fitted means")
    by_name = {r["parameter"]: r for r in rows}
    report = {
        "config_hash": cfg.hash,
        "family": family.kind,
        "K": family.K,
        "n_obs": dataset.N,
        "features": dataset.feature_names,
        "chains": [{"chain": c + 1, "seed": cfg.seed + c, "n_draws": d.n_draws,
                    "phi_mean": float(d.phi.mean()) if d.n_draws else None,
                    "kappa_mean": float(d.kappa.mean()) if d.n_draws and family.kind == "power" else None,
                    "sampler_stats": d.metadata.get("sampler_stats"),
                    "pseudo_eb": d.metadata.get("pseudo_eb")}
                   for c, d in enumerate(results)],
        "phi_mean": _json_num(by_name["phi"]["mean"]),
        "phi_rhat": _json_num(by_name["phi"]["rhat"]),
        "phi_ess": _json_num(by_name["phi"]["ess"]),
        "kappa_mean": _json_num(by_name["kappa"]["mean"]),
        "kappa_rhat": _json_num(by_name["kappa"]["rhat"]),
        "fitted_mean": None if fitted_mean is None else fitted_mean.tolist(),
    }
    (out / "fit_report.json").write_text(json.dumps(report, indent=1))
    return report


def _json_num(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)


# -- predict / summarize ----------------------------------------------------------------------

def cmd_predict(fit_dir, data_path, out_path, level: float = 0.95) -> np.ndarray:
    """Posterior mean and interval endpoints of ``mu(x)`` for every row of ``data_path``."""
    fit_dir = Path(fit_dir)
    cfg = load_config(fit_dir / "config.txt")
    report = json.loads((fit_dir / "fit_report.json").read_text())
    kind = cfg.family.replace("quasi-", "")
    feats = report["features"]
    data = read_csv(data_path, kind, feats) if _has_outcome(data_path, kind) else _read_features(data_path, feats)
    x = data.x
    fam = QuasiFamily("multinomial", K=report["K"]) if kind == "multinomial" else \
        (QuasiFamily("power", kappa=1.5 if cfg.kappa is None else cfg.kappa) if kind == "power"
         else family_from_name(kind))
    from .backfit import predict_mu
    mus = []
    for c in range(cfg.chains):
        path = fit_dir / f"chain_{c + 1}_ensembles.txt"
        text = path.read_text()
        if not text.strip():
            continue
        for ens in ensembles_from_text(text):
            mus.append(predict_mu(ens, fam, x))
    if not mus:
        raise SchemaError("fit directory holds no retained ensembles")
    draws = np.stack(mus)
    K = fam.K if fam.is_multinomial else 1
    flat = draws.reshape(draws.shape[0], -1)
    mean = flat.mean(axis=0)
    a = (1 - level) / 2
    et = np.quantile(flat, [a, 1 - a], axis=0)
    hpd = hpd_intervals(flat, level)
    with open(out_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["row", "category", "mean", "et_lo", "et_hi", "hpd_lo", "hpd_hi"])
        for m in range(flat.shape[1]):
            i, k = divmod(m, K)
            wr.writerow([i + 1, k + 1, repr(float(mean[m])), repr(float(et[0, m])), repr(float(et[1, m])),
                         repr(float(hpd[m, 0])), repr(float(hpd[m, 1]))])
    return mean.reshape(-1, K) if K > 1 else mean


def _has_outcome(path, kind) -> bool:
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), [])
    return ("y" in header) if kind != "multinomial" else ("y1" in header)


def _read_features(path, feats) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: line 1: empty file")
    header = [h.strip() for h in rows[0]]
    for f in feats:
        if f not in header:
            raise SchemaError(f"missing feature column '{f}'")
    idx = [header.index(f) for f in feats]
    x = np.empty((len(rows) - 1, len(feats)))
    for i, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise ParseError(f"{path}: line {i + 2}: expected {len(header)} fields, found {len(row)}")
        try:
            x[i] = [float(row[j]) for j in idx]
        except ValueError as exc:
            raise ParseError(f"{path}: line {i + 2}: {exc}") from None
    return Dataset(x, np.zeros(x.shape[0]), None, feats)


def cmd_summarize(fit_dir, out_path=None, level: float | None = None) -> list[dict]:
    fit_dir = Path(fit_dir)
    cfg = load_config(fit_dir / "config.txt")
    report = json.loads((fit_dir / "fit_report.json").read_text())
    chains = [read_draws(fit_dir / f"chain_{c + 1}_draws.csv") for c in range(cfg.chains)]
    rows = summary_rows(chains, report["features"], cfg.level if level is None else level)
    if out_path:
        write_summary(out_path, rows)
    return rows


# -- simulate / bench --------------------------------------------------------------------------

def cmd_simulate(spec: ScenarioSpec, out_path) -> Dataset:
    data = spec.generate()
    ds = data.dataset
    write_csv(out_path, ds)
    sidecar = {**spec.to_dict(), "true_phi": data.phi,
               "true_beta": None if data.beta is None else [float(b) for b in data.beta]}
    Path(str(out_path) + ".json").write_text(json.dumps(sidecar, indent=1))
    return ds


def cmd_bench(scenario: str, reps: int, scale: experiments.BenchScale, out_path) -> list[dict]:
    if reps < 0:
        raise ConfigurationError("reps must be >= 0")
    cols, rows = experiments.run_bench(scenario, reps, scale, workers=_workers())
    with open(out_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for r in rows:
            wr.writerow([experiments.format_value(r[c]) for c in cols])
    return rows


# -- argument parsing ----------------------------------------------------------------------------

def _kappa_bounds(s: str):
    try:
        lo, hi = (float(v) for v in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected LO,HI") from None
    return (lo, hi)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="quasibart", description="Quasi-likelihood BART")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit chains to a CSV dataset")
    f.add_argument("input", nargs="?", help="training CSV")
    f.add_argument("--config", help="key=value config file; flags override it")
    f.add_argument("--family", choices=["binomial", "poisson", "gamma", "power", "multinomial"])
    f.add_argument("--dispersion", choices=["fixed", "eqp", "plp", "bbq", "pseudo-eb", "gamma-lik"])
    f.add_argument("--trees", type=int)
    f.add_argument("--chains", type=int)
    f.add_argument("--iters", type=int, dest="iterations")
    f.add_argument("--burnin", type=int, dest="burn_in")
    f.add_argument("--thin", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--kappa", type=float)
    f.add_argument("--kappa-bounds", type=_kappa_bounds, dest="kappa_bounds")
    f.add_argument("--estimate-kappa", action="store_true", default=None, dest="estimate_kappa")
    f.add_argument("--test", help="optional test CSV (features only or with outcomes)")
    f.add_argument("--out", dest="output", help="output directory")

    pr = sub.add_parser("predict", help="posterior predictions for new rows")
    pr.add_argument("fit_dir")
    pr.add_argument("data")
    pr.add_argument("--out", default="predictions.csv")
    pr.add_argument("--level", type=float, default=0.95)

    sm = sub.add_parser("summarize", help="recompute the summary table from draw files")
    sm.add_argument("fit_dir")
    sm.add_argument("--out")
    sm.add_argument("--level", type=float)

    si = sub.add_parser("simulate", help="write a synthetic dataset")
    si.add_argument("--scenario", required=True, choices=SCENARIOS)
    si.add_argument("--n", type=int, required=True)
    si.add_argument("--p", type=int)
    si.add_argument("--phi", type=float, default=1.0)
    si.add_argument("--kappa", type=float)
    si.add_argument("--rho", type=float)
    si.add_argument("--seed", type=int, default=0)
    si.add_argument("--out", required=True)

    b = sub.add_parser("bench", help="run a replication grid and write metrics CSV")
    b.add_argument("--scenario", required=True)
    b.add_argument("--reps", type=int, default=1)
    b.add_argument("--n", type=int)
    b.add_argument("--p", type=int)
    b.add_argument("--phi", type=float)
    b.add_argument("--trees", type=int, default=50)
    b.add_argument("--iters", type=int)
    b.add_argument("--burnin", type=int)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default="bench.csv")
    return p


def _run_config(ns) -> RunConfig:
    cfg = load_config(ns.config) if ns.config else RunConfig()
    for key in ("family", "dispersion", "trees", "chains", "iterations", "burn_in", "thin", "seed", "kappa",
                "kappa_bounds", "estimate_kappa", "test", "output"):
        v = getattr(ns, key, None)
        if v is not None:
            setattr(cfg, key, v)
    if ns.input:
        cfg.input = ns.input
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if ns.command == "fit":
            report = cmd_fit(_run_config(ns))
            print(f"phi posterior mean: {report['phi_mean']}  R-hat: {report['phi_rhat']}")
        elif ns.command == "predict":
            cmd_predict(ns.fit_dir, ns.data, ns.out, ns.level)
        elif ns.command == "summarize":
            rows = cmd_summarize(ns.fit_dir, ns.out, ns.level)
            if not ns.out:
                print(",".join(SUMMARY_COLUMNS))
                for r in rows:
                    print(",".join([r["parameter"]] + [_fmt(r[c]) for c in SUMMARY_COLUMNS[1:]]))
        elif ns.command == "simulate":
            spec = ScenarioSpec(ns.scenario, ns.n, P=ns.p, phi=ns.phi, kappa=ns.kappa, rho=ns.rho, seed=ns.seed)
            cmd_simulate(spec, ns.out)
        elif ns.command == "bench":
            if ns.scenario not in SCENARIOS:
                print(f"quasibart: unknown scenario {ns.scenario!r}; choose from {', '.join(SCENARIOS)}",
                      file=sys.stderr)
                return EXIT_USAGE
            scale = experiments.BenchScale(N=ns.n, P=ns.p, phi=ns.phi, trees=ns.trees, iterations=ns.iters,
                                           burn_in=ns.burnin, seed=ns.seed)
            cmd_bench(ns.scenario, ns.reps, scale, ns.out)
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (SchemaError, DomainError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (ConfigurationError, ScenarioError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, OptimizationError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FileNotFoundError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
