"""Command line experiment runner.

``xtransport run`` executes one experiment and writes ``summary.json`` and
``replicates.csv`` (plus empirical CDF files on request) into the output
directory.  ``xtransport verify`` runs every experiment and prints one line
per acceptance criterion.  Both exit with status 0 only when every check
passes.

Randomness
----------
Every replicate draws from ``numpy.random.default_rng([seed, experiment_id,
stream, index])`` where ``stream`` separates embedding replicates (0),
reference samples (1), rate calibration (2), the excursion pool (3) and the
local-time budget paths (4).  Results therefore do not depend on the number
of workers or on scheduling.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import multiprocessing
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import click
import numpy as np

from .brownian import LazyBrownianPath, simulate
from .embedding import CSV_COLUMNS, reference_sample, run_replicate
from .errors import HorizonError, PreconditionError
from .excursion import (
    ExcursionPool,
    ExcursionPredicate,
    calibrate,
    complete_window,
    lifetime_gt,
    lifetime_in,
    next_excursion,
    run_to_local_time,
)
from .stats import correlation, ecdf, gamma_shape_moment, ks_one_sample, ks_two_sample, poisson_dispersion
from . import suites

__all__ = ["ExperimentConfig", "ExperimentReport", "Check", "run_experiment", "verify", "main"]

log = logging.getLogger("xtransport")

EXPERIMENTS = ("lemma_suite", "balance_suite", "remark_r8", "ito_embed", "bismut_embed",
               "naive_baseline", "shift_coupling", "poisson_check")
EXP_ID = {name: i for i, name in enumerate(EXPERIMENTS)}
DEFAULT_N = {"lemma_suite": 1000, "balance_suite": 100}
MODES = ("gaussian", "random_walk")
EXTRA_COLUMNS = ("replicate", "method", "shift", "backward_max", "backward_value",
                 "forward_value", "local_time_to_T", "u", "on_atom", "origin_in_A",
                 "overlap_fraction", "nodes", "reason")


def _default_predicate(experiment: str) -> ExcursionPredicate:
    if experiment in ("bismut_embed", "shift_coupling"):
        return lifetime_in(0.01, 1.0)
    return lifetime_gt(0.01)


class ConfigError(click.ClickException):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    """Parameters of one run.

    ``horizon`` caps the time range of every simulated path (the lazy
    sampler for gaussian paths, the fixed two-sided horizon for random
    walks).  ``n`` defaults to the acceptance size of the experiment.
    """

    experiment: str = "ito_embed"
    seed: int = 0
    delta: float = 1e-4
    horizon: float = 1e9
    n: int | None = None
    mode: str = "gaussian"
    predicate: dict | None = None
    output_dir: str = "runs"
    workers: int | None = None
    alpha: float = 0.01
    local_time_cap: float = 2000.0
    local_time_budget: float = 5.0
    tol: float = 1e-10
    calibration_rse: float = 0.01
    estimator: str | None = None
    ecdf: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; "
                              f"choose from {', '.join(EXPERIMENTS)}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("seed must be an unsigned integer")
        if not self.delta > 0 or not self.horizon > 0:
            raise ConfigError("delta and horizon must be positive")
        if self.n is not None and self.n < 1:
            raise ConfigError("n must be at least 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}")
        if self.mode == "random_walk" and self.experiment not in ("poisson_check", "lemma_suite",
                                                                  "balance_suite", "remark_r8"):
            raise ConfigError("random_walk mode is only available for poisson_check")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if not 0 < self.calibration_rse < 1 or not 0 < self.alpha < 1:
            raise ConfigError("alpha and calibration_rse must lie in (0, 1)")
        try:
            self.A  # noqa: B018 - parse the predicate early
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid predicate: {exc}") from exc

    @property
    def A(self) -> ExcursionPredicate:
        if self.predicate is None:
            return _default_predicate(self.experiment)
        return ExcursionPredicate.from_dict(self.predicate)

    @property
    def replicates(self) -> int:
        return self.n if self.n is not None else DEFAULT_N.get(self.experiment, 2000)

    @property
    def pool_size(self) -> int:
        return self.workers if self.workers is not None else (os.cpu_count() or 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["predicate"] = self.A.to_dict()
        d["n"] = self.replicates
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        d = asdict(self)
        d.update({k: v for k, v in changes.items() if v is not None})
        return ExperimentConfig(**d)

    @classmethod
    def load(cls, path=None, **overrides) -> "ExperimentConfig":
        """Read a JSON file (if given) and apply non-``None`` overrides."""
        data = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(data, dict):
                raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class Check:
    """One acceptance check: a measured value against its target."""

    name: str
    passed: bool
    value: float
    target: str

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "value": _num(self.value),
                "target": self.target}


@dataclass
class ExperimentReport:
    experiment: str
    config: dict
    checks: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    columns: tuple = ()
    samples: dict = field(default_factory=dict)
    known_bias: list = field(default_factory=list)
    runtime_s: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def summary(self) -> dict:
        return {"experiment": self.experiment, "passed": self.passed, "config": self.config,
                "checks": [c.to_dict() for c in self.checks],
                "reports": _jsonable(self.reports), "known_bias": self.known_bias,
                "runtime_s": self.runtime_s}

    def write(self, out_dir, ecdf_files: bool = False) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        with open(out / "replicates.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for row in self.rows:
                w.writerow([_cell(row.get(c)) for c in self.columns])
        if ecdf_files:
            for name, x in self.samples.items():
                xs, F = ecdf(x)
                with open(out / f"ecdf_{name}.csv", "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(("x", "F"))
                    w.writerows(zip(map(repr, xs.tolist()), map(repr, F.tolist())))
        return out


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else None


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (float, np.floating)):
        return repr(float(x)) if math.isfinite(x) else ""
    return str(x)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    if hasattr(obj, "to_dict"):
        return _jsonable(obj.to_dict())
    return obj


# -- parallel execution ----------------------------------------------------------

def _pmap(func, tasks, workers: int) -> list:
    """Ordered map over ``tasks``; a process pool when ``workers > 1``."""
    tasks = list(tasks)
    if workers <= 1 or len(tasks) < 2:
        return [func(t) for t in tasks]
    with multiprocessing.get_context("fork").Pool(workers) as pool:
        return pool.map(func, tasks, chunksize=max(1, len(tasks) // (8 * workers)))


def _embed_task(args) -> dict:
    method, key, rep, A, kw = args
    out = run_replicate(method, np.random.default_rng([*key, 0, rep]),
                        ExcursionPredicate.from_dict(A), **kw)
    row = out.to_row()
    row["replicate"] = rep
    return row


def _first_excursion(key, i, A: ExcursionPredicate, cfg: dict):
    """First ``A``-excursion after time 0 of path ``i`` of the pool stream."""
    rng = np.random.default_rng([*key, 3, i])
    if cfg["mode"] == "random_walk":
        path = simulate(rng, cfg["delta"], cfg["horizon"], "random_walk").restrict(0.0, cfg["horizon"])
        tab = path.excursion_table()
        hit = np.flatnonzero(A.mask(tab))
        if hit.size == 0:
            raise HorizonError("no A-excursion within the horizon")
        return path.excursion(int(hit[0]))
    sampler = LazyBrownianPath(rng, cfg["delta"], cfg["tol"], max_time=cfg["horizon"])
    path, j = next_excursion(sampler, A, 0.0)
    return path.excursion(j)


def _reference_task(args) -> dict:
    key, rep, A, cfg = args
    A = ExcursionPredicate.from_dict(A)
    try:
        e = _first_excursion(key, rep, A, cfg)
        ref = reference_sample(ExcursionPool(A, cfg["delta"], [e]), A,
                               np.random.default_rng([*key, 1, rep]), cfg["delta"], cfg["tol"],
                               cfg["estimator"])
    except HorizonError as exc:
        return {"replicate": rep, "discarded": True, "reason": str(exc)}
    return {"replicate": rep, "discarded": False, "origin_lifetime": ref.origin_lifetime,
            "backward_local_time": ref.backward_local_time, "backward_max": ref.backward_max,
            "backward_value": ref.backward_value, "forward_value": ref.forward_value}


def _tail_task(args) -> dict:
    key, rep, A, cfg = args
    try:
        e = _first_excursion(key, rep, ExcursionPredicate.from_dict(A), cfg)
    except HorizonError as exc:
        return {"replicate": rep, "discarded": True, "reason": str(exc)}
    return {"replicate": rep, "discarded": False, "origin_lifetime": e.lifetime, "T": e.start}


def _count_task(args) -> dict:
    """Number of ``A``-excursions completed within a local-time budget."""
    key, rep, A, cfg = args
    A = ExcursionPredicate.from_dict(A)
    budget = cfg["local_time_budget"]
    rng = np.random.default_rng([*key, 4, rep])
    try:
        if cfg["mode"] == "random_walk":
            path = simulate(rng, cfg["delta"], cfg["horizon"], "random_walk").restrict(0.0, cfg["horizon"])
            z = path.zeros()
            mu = path.local_time_measure()
            cum = np.asarray(mu.mass(np.zeros(z.size), z))
            if cum[-1] < budget:
                raise HorizonError("local-time budget not reached within the horizon")
            path = path.restrict(0.0, float(z[np.searchsorted(cum, budget)]))
        else:
            sampler = LazyBrownianPath(rng, cfg["delta"], cfg["tol"], max_time=cfg["horizon"])
            path = run_to_local_time(sampler, budget, cfg["estimator"])
    except HorizonError as exc:
        return {"replicate": rep, "discarded": True, "reason": str(exc)}
    count = int(A.mask(complete_window(path).excursion_table()).sum())
    return {"replicate": rep, "discarded": False, "count": count, "T": path.t_max}


class _Runner:
    """Shares calibrations and replicate batches between experiments of one session."""

    def __init__(self):
        self._cache: dict = {}

    def _memo(self, key, make):
        if key not in self._cache:
            self._cache[key] = make()
        return self._cache[key]

    def rate(self, config: ExperimentConfig, experiment: str, A: ExcursionPredicate,
             weighted: bool):
        key = ("rate", config.seed, experiment, config.delta, config.tol, config.calibration_rse,
               tuple(A.to_dict().items()), weighted)
        return self._memo(key, lambda: calibrate(
            [config.seed, EXP_ID[experiment], 2, int(weighted)], A, config.delta,
            config.calibration_rse, weighted, tol=config.tol))

    def batch(self, config: ExperimentConfig, method: str, experiment: str, A: ExcursionPredicate,
              **rates) -> list:
        kw = {"step": config.delta, "tol": config.tol, "local_time_cap": config.local_time_cap,
              "max_time": config.horizon, "estimator": config.estimator, **rates}
        key = ("batch", method, config.seed, experiment, config.replicates,
               tuple(A.to_dict().items()), tuple(sorted(kw.items())))
        base = (config.seed, EXP_ID[experiment])
        tasks = [(method, base, r, A.to_dict(), kw) for r in range(config.replicates)]
        return self._memo(key, lambda: _pmap(_embed_task, tasks, config.pool_size))

    def side(self, func, config: ExperimentConfig, experiment: str, A: ExcursionPredicate) -> list:
        cfg = {"delta": config.delta, "tol": config.tol, "horizon": config.horizon,
               "mode": config.mode, "estimator": config.estimator,
               "local_time_budget": config.local_time_budget}
        key = (func.__name__, config.seed, experiment, config.replicates,
               tuple(A.to_dict().items()), tuple(sorted(cfg.items(), key=lambda kv: kv[0])))
        base = (config.seed, EXP_ID[experiment])
        tasks = [(base, r, A.to_dict(), cfg) for r in range(config.replicates)]
        return self._memo(key, lambda: _pmap(func, tasks, config.pool_size))


_RUNNER = _Runner()


def _kept(rows, column) -> np.ndarray:
    return np.array([r[column] for r in rows if not r["discarded"]], dtype=float)


def _discard_check(rows, label: str = "discard_rate") -> Check:
    rate = sum(r["discarded"] for r in rows) / max(len(rows), 1)
    return Check(label, rate < 0.01, rate, "< 0.01")


def _report_check(name: str, rep, alpha: float) -> Check:
    return Check(name, rep.p_value > alpha, rep.p_value, f"p > {alpha}")


# -- experiments -----------------------------------------------------------------

def _lemma(config: ExperimentConfig, report: ExperimentReport, runner: _Runner) -> None:
    t0 = time.perf_counter()
    rep = suites.lemma_suite(config.replicates, config.seed)
    elapsed = time.perf_counter() - t0
    report.reports["lemma_suite"] = rep.to_dict()
    report.columns = ("identity", "max_violation", "evaluations")
    report.rows = [{"identity": k, "max_violation": v, "evaluations": rep.evaluations[k]}
                   for k, v in rep.violations.items()]
    report.checks += [Check("max_violation", rep.max_violation < 1e-9, rep.max_violation, "< 1e-9"),
                      Check("runtime_s", elapsed < 10.0 * config.replicates / 1000, elapsed,
                            "< 10 s per 1000 pairs")]


def _balance(config: ExperimentConfig, report: ExperimentReport, runner: _Runner) -> None:
    t0 = time.perf_counter()
    rep = suites.balance_suite(config.replicates, config.seed)
    elapsed = time.perf_counter() - t0
    rows = rep.pop("rows")
    report.reports["balance_suite"] = rep
    report.columns = tuple(rows[0].keys()) if rows else ()
    report.rows = rows
    report.checks += [
        Check("max_interval_error", rep["max_interval_error"] < 1e-6, rep["max_interval_error"],
              "< 1e-6"),
        Check("mass_to_infinity", rep["max_unallocated_mass"] == 0.0,
              rep["max_unallocated_mass"], "== 0"),
        Check("runtime_s", elapsed < 60.0 * config.replicates / 100, elapsed,
              "< 60 s per 100 pairs"),
    ]


def _remark(config: ExperimentConfig, report: ExperimentReport, runner: _Runner) -> None:
    rep = suites.remark_r8()
    rows = rep.pop("shifts")
    report.reports["remark_r8"] = rep
    report.columns = tuple(rows[0].keys())
    report.rows = rows
    report.checks += [
        Check("tau_max_error", rep["tau_max_error"] < 1e-9, rep["tau_max_error"], "< 1e-9"),
        Check("image_vs_twice_lebesgue", rep["image_max_error"] < 1e-6, rep["image_max_error"],
              "< 1e-6"),
        Check("balance_fails", rep["balance_fails"], float(rep["balance_fails"]), "true"),
    ]


EMBED_COLUMNS = CSV_COLUMNS + EXTRA_COLUMNS


def _embedding_rows(config, rows):
    for r in rows:
        r["seed"] = config.seed
    return rows


def _ito(config: ExperimentConfig, report: ExperimentReport, runner: _Runner) -> None:
    A = config.A
    nu = runner.rate(config, "ito_embed", A, False)
    rows = runner.batch(config, "ito", "ito_embed", A, nu_A_hat=nu.value)
    refs = runner.side(_reference_task, config, "ito_embed", A)
    alpha = config.alpha
    D = _kept(rows, "origin_lifetime")
    bl = _kept(rows, "backward_local_time")
    tail = ks_one_sample(D, A.lifetime_cdf, alpha)
    two = {c: ks_two_sample(_kept(rows, c), _kept(refs, c), alpha)
           for c in ("origin_lifetime", "backward_max", "forward_value")}
    shape = gamma_shape_moment(bl)
    corr = {c: correlation(D, _kept(rows, c), "spearman")
            for c in ("backward_local_time", "backward_max", "backward_value")}
    on_atom = all(r["on_atom"] for r in rows if not r["discarded"])
    report.reports.update({
        "nu_A_hat": nu, "tail_ks": tail, "reference_ks": two, "backward_local_time_shape": shape,
        "backward_local_time_mean_times_nu": float(bl.mean() * nu.value),
        "reference_backward_local_time_shape": gamma_shape_moment(_kept(refs, "backward_local_time")),
        "correlations": corr, "reference_discards": sum(r["discarded"] for r in refs),
    })
    report.columns = EMBED_COLUMNS
    report.rows = _embedding_rows(config, rows)
    report.samples = {"ito_origin_lifetime": D, "reference_origin_lifetime": _kept(refs, "origin_lifetime"),
                      "ito_backward_local_time": bl}
    report.known_bias.append(f"plug-in rate nu_A_hat relative SE {nu.relative_se:.4f}")
    report.checks += [
        _report_check("origin_lifetime_ks", tail, alpha),
        *[_report_check(f"reference_ks_{c}", r, alpha) for c, r in two.items()],
        Check("backward_local_time_shape", abs(shape - 1.0) <= 0.2, shape, "1 +- 0.2"),
        *[Check(f"independence_{c}", abs(r.statistic) < 0.05, r.statistic, "|rho| < 0.05")
          for c, r in corr.items()],
        Check("T_on_atom", on_atom, float(on_atom), "every replicate"),
        _discard_check(rows),
    ]


def _naive(config: ExperimentConfig, report: ExperimentReport, runner: _Runner) -> None:
    A = config.A
    rows = runner.batch(config, "naive", "naive_baseline", A)
    nu = runner.rate(config, "ito_embed", A, False)
    ito = runner.batch(config, "ito", "ito_embed", A, nu_A_hat=nu.value)
    bl = _kept(rows, "backward_local_time")
    bl_ito = _kept(ito, "backward_local_time")
    shape = gamma_shape_moment(bl)
    ratio = float(bl.mean() / bl_ito.mean())
    report.reports.update({
        "backward_local_time_shape": shape, "mean_ratio_naive_over_ito": ratio,
        "origin_lifetime_ks": ks_one_sample(_kept(rows, "origin_lifetime"), A.lifetime_cdf,
                                            config.alpha),
        "nu_A_hat": nu,
    })
    report.columns = EMBED_COLUMNS
    report.rows = _embedding_rows(config, rows)
    report.samples = {"naive_backward_local_time": bl, "ito_backward_local_time": bl_ito}
    report.checks += [
        Check("backward_local_time_shape", abs(shape - 2.0) <= 0.3, shape, "2 +- 0.3"),
        Check("mean_ratio_naive_over_ito", 1.7 <= ratio <= 2.3, ratio, "in [1.7, 2.3]"),
        _discard_check(rows),
    ]


def _bismut_rows(config: ExperimentConfig, runner: _Runner, A: ExcursionPredicate):
    nup = runner.rate(config, "bismut_embed", A, True)
    return nup, runner.batch(config, "bismut", "bismut_embed", A, nu_prime_A_hat=nup.value)


def _bismut(config: ExperimentConfig, report: ExperimentReport, runner: _Runner) -> None:
    A = config.A
    if not A.has_finite_bismut_mass:
        raise ConfigError("bismut_embed needs a bounded lifetime window predicate")
    nup, rows = _bismut_rows(config, runner, A)
    D = _kept(rows, "origin_lifetime")
    ks = ks_one_sample(D, A.bismut_lifetime_cdf, config.alpha)
    overlap = _kept(rows, "overlap_fraction")
    report.reports.update({"nu_prime_A_hat": nup, "bismut_ks": ks,
                           "mean_overlap_fraction": float(overlap.mean()) if overlap.size else None,
                           "origin_in_A_fraction": float(np.mean([r["origin_in_A"] for r in rows
                                                                  if not r["discarded"]]))})
    report.columns = EMBED_COLUMNS
    report.rows = _embedding_rows(config, rows)
    report.samples = {"bismut_origin_lifetime": D}
    report.known_bias.append(f"plug-in rate nu_prime_A_hat relative SE {nup.relative_se:.4f}")
    report.checks += [_report_check("origin_lifetime_ks", ks, config.alpha), _discard_check(rows)]


def _shift(config: ExperimentConfig, report: ExperimentReport, runner: _Runner) -> None:
    A = config.A
    if not A.has_finite_bismut_mass:
        raise ConfigError("shift_coupling needs a bounded lifetime window predicate")
    nup, bismut = _bismut_rows(config, runner, A)
    nu = runner.rate(config, "bismut_embed", A, False)
    rows = runner.batch(config, "shift_coupling", "shift_coupling", A, nu_A_hat=nu.value,
                        nu_prime_A_hat=nup.value)
    D = _kept(rows, "origin_lifetime")
    Db = _kept(bismut, "origin_lifetime")
    two = ks_two_sample(D, Db, config.alpha)
    report.reports.update({
        "nu_A_hat": nu, "nu_prime_A_hat": nup, "two_sample_ks": two,
        "bismut_law_ks": ks_one_sample(D, A.bismut_lifetime_cdf, config.alpha),
        "origin_in_A_fraction": float(np.mean([r["origin_in_A"] for r in rows
                                               if not r["discarded"]])),
    })
    report.columns = EMBED_COLUMNS
    report.rows = _embedding_rows(config, rows)
    report.samples = {"shift_coupling_origin_lifetime": D, "bismut_origin_lifetime": Db}
    report.known_bias.append(f"plug-in rates: nu_A_hat relative SE {nu.relative_se:.4f}, "
                             f"nu_prime_A_hat relative SE {nup.relative_se:.4f}")
    report.checks += [_report_check("two_sample_ks_vs_bismut", two, config.alpha),
                      _discard_check(rows)]


def _poisson(config: ExperimentConfig, report: ExperimentReport, runner: _Runner) -> None:
    A = config.A
    tails = runner.side(_tail_task, config, "poisson_check", A)
    counts = runner.side(_count_task, config, "poisson_check", A)
    D = _kept(tails, "origin_lifetime")
    c = _kept(counts, "count")
    tail = ks_one_sample(D, A.lifetime_cdf, config.alpha)
    disp = poisson_dispersion(c, config.alpha)
    report.reports.update({"tail_ks": tail, "dispersion": disp, "mean_count": float(c.mean()),
                           "local_time_budget": config.local_time_budget})
    report.columns = ("replicate", "seed", "T", "origin_lifetime", "count", "discarded", "reason")
    rows = []
    for t, k in zip(tails, counts):
        rows.append({"replicate": t["replicate"], "seed": config.seed, "T": t.get("T"),
                     "origin_lifetime": t.get("origin_lifetime"), "count": k.get("count"),
                     "discarded": t["discarded"] or k["discarded"],
                     "reason": t.get("reason") or k.get("reason", "")})
    report.rows = rows
    report.samples = {"pooled_lifetime": D, "counts": c}
    report.checks += [
        _report_check("tail_law_ks", tail, config.alpha),
        Check("dispersion_index", 0.9 <= disp.statistic <= 1.1, disp.statistic, "in [0.9, 1.1]"),
        _discard_check(tails, "tail_discard_rate"),
        _discard_check(counts, "count_discard_rate"),
    ]


_EXPERIMENTS = {"lemma_suite": _lemma, "balance_suite": _balance, "remark_r8": _remark,
                "ito_embed": _ito, "naive_baseline": _naive, "bismut_embed": _bismut,
                "shift_coupling": _shift, "poisson_check": _poisson}


def run_experiment(config: ExperimentConfig, runner: _Runner | None = None) -> ExperimentReport:
    """Run ``config.experiment`` and return its report (nothing is written)."""
    runner = _RUNNER if runner is None else runner
    report = ExperimentReport(config.experiment, config.to_dict())
    t0 = time.perf_counter()
    try:
        _EXPERIMENTS[config.experiment](config, report, runner)
    except PreconditionError as exc:
        raise ConfigError(str(exc)) from exc
    report.runtime_s = time.perf_counter() - t0
    return report


# criterion number -> (experiment, checks that decide it, description)
CRITERIA = {
    1: ("lemma_suite", ("max_violation", "runtime_s"), "lemma identities on random pairs"),
    2: ("balance_suite", ("max_interval_error", "mass_to_infinity", "runtime_s"),
        "balance of periodized pairs"),
    3: ("remark_r8", ("tau_max_error", "image_vs_twice_lebesgue", "balance_fails"),
        "non-singular pair fails to balance"),
    4: ("poisson_check", ("tail_law_ks",), "pooled lifetimes follow the tail law"),
    5: ("ito_embed", ("origin_lifetime_ks", "reference_ks_origin_lifetime",
                      "reference_ks_backward_max", "reference_ks_forward_value",
                      "backward_local_time_shape"), "unbiased embedding"),
    6: ("naive_baseline", ("backward_local_time_shape", "mean_ratio_naive_over_ito"),
        "naive embedding is biased"),
    7: ("poisson_check", ("dispersion_index",), "Poisson counts per local-time budget"),
    8: ("bismut_embed", ("origin_lifetime_ks",), "length-biased embedding"),
    9: ("ito_embed", ("independence_backward_local_time", "independence_backward_max",
                      "independence_backward_value"), "independence of the origin excursion"),
    10: ("shift_coupling", ("two_sample_ks_vs_bismut",), "shift coupling reaches the Bismut law"),
}


def criterion_lines(reports: dict) -> list[tuple[int, bool, str]]:
    """One ``(number, passed, text)`` per acceptance criterion found in ``reports``."""
    out = []
    for num, (exp, names, desc) in CRITERIA.items():
        if exp not in reports:
            continue
        checks = [reports[exp].check(n) for n in names]
        ok = all(c.passed for c in checks)
        detail = "; ".join(f"{c.name}={_fmt(c.value)} ({c.target})" for c in checks)
        out.append((num, ok, f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {desc}: {detail}"))
    return out


def _fmt(x) -> str:
    return f"{x:.4g}" if isinstance(x, (float, int)) else str(x)


def verify(config: ExperimentConfig, experiments=EXPERIMENTS, write: bool = True) -> dict:
    """Run ``experiments`` with the shared settings of ``config``; returns reports by name.

    Each experiment uses its own acceptance predicate, and the transport
    suites keep their own sizes; ``n`` applies to the stochastic experiments.
    """
    reports = {}
    base = asdict(config)
    base["predicate"] = None
    for name in experiments:
        cfg = ExperimentConfig(**{**base, "experiment": name,
                                  "n": None if name in DEFAULT_N else config.n})
        log.info("running %s", name)
        reports[name] = run_experiment(cfg)
        if write:
            reports[name].write(Path(config.output_dir) / name, config.ecdf)
    return reports


# -- command line ------------------------------------------------------------------

def _overrides(f):
    opts = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     help="JSON experiment configuration."),
        click.option("--seed", type=int), click.option("--delta", type=float),
        click.option("--horizon", type=float), click.option("--n", type=int),
        click.option("--mode", type=click.Choice(MODES)),
        click.option("--experiment", type=click.Choice(EXPERIMENTS)),
        click.option("--workers", type=int, help="Worker processes (default: all CPUs)."),
        click.option("--output", "output_dir", type=click.Path(file_okay=False),
                     help="Output directory."),
        click.option("--ecdf/--no-ecdf", default=None, help="Also write empirical CDF files."),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Balancing allocations and excursion embedding experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")


@main.command()
@_overrides
def run(config_path, **overrides) -> None:
    """Run one experiment and write summary.json and replicates.csv."""
    config = ExperimentConfig.load(config_path, **overrides)
    report = run_experiment(config)
    out = report.write(config.output_dir, config.ecdf)
    for c in report.checks:
        click.echo(f"{'PASS' if c.passed else 'FAIL'}  {c.name} = {_fmt(c.value)} ({c.target})")
    click.echo(f"wrote {out}")
    raise SystemExit(0 if report.passed else 1)


@main.command("verify")
@_overrides
def verify_cmd(config_path, **overrides) -> None:
    """Run every experiment and print one line per acceptance criterion."""
    overrides.pop("experiment", None)
    config = ExperimentConfig.load(config_path, **overrides)
    reports = verify(config)
    lines = criterion_lines(reports)
    for _, _, text in lines:
        click.echo(text)
    summary = {"passed": all(ok for _, ok, _ in lines),
               "criteria": {str(n): ok for n, ok, _ in lines}}
    Path(config.output_dir).mkdir(parents=True, exist_ok=True)
    (Path(config.output_dir) / "verify.json").write_text(json.dumps(summary, indent=2) + "\n")
    raise SystemExit(0 if summary["passed"] else 1)


if __name__ == "__main__":
    main()
