"""Seeded Monte Carlo sweeps over (sample size, misspecification, trial) and
their CSV/JSON summaries.

Results are written as JSON lines: one header record with the configuration
and the true policy value, then one record per trial in a fixed order.
"""

from __future__ import annotations

import csv
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .baseline import dm_estimate, is_family, magic_estimate, wdr_estimate
from .ensemble import DEFAULT_B, DEFAULT_CI_LEVEL, default_grid, rltmle1, rltmle2
from .environments import ENVIRONMENTS, EnvironmentSpec, make_environment
from .exceptions import ConfigurationError
from .ltmle import LTMLEConfig, RegularizationTriple, cv_ltmle, ltmle_backward
from .mdp import Dataset, DiscountSpec, QStack, exact_policy_value, exact_q_functions, simulate
from .model import DEFAULT_SMOOTHING, inject_bias, model_based_q
from .seeding import derive_seed, key_hash

ESTIMATOR_KEYS = ("is", "wis", "pdis", "cwpdis", "dm", "wdr", "magic", "ltmle", "rltmle1", "rltmle2", "cv_ltmle")

CSV_COLUMNS = ("env", "estimator", "n", "scale", "trials", "mse", "mse_se", "bias", "variance", "mean_runtime_ms")

DEFAULT_TRIALS = {"modelwin": 63, "modelfail": 71, "gridworld": 71}


@dataclass
class ExperimentConfig:
    """One sweep.  Serialized as a flat JSON object with these field names.

    ``grid`` lists ``[alpha, tau, lam]`` triples (``None`` selects the default
    grid); ``q_source`` is ``"model"`` (fit on the leading split) or
    ``"exact"`` (true Q over states, whole dataset used for targeting).
    """

    environment: str = "modelwin"
    horizon: int | None = None
    gamma: float = 1.0
    sample_sizes: list = field(default_factory=lambda: [100, 200, 500, 1000])
    scales: list = field(default_factory=lambda: [0.05])
    trials: int = 63
    estimators: list = field(default_factory=lambda: ["wdr", "magic", "ltmle", "rltmle2"])
    grid: list | None = None
    B: int = DEFAULT_B
    ci_level: float = DEFAULT_CI_LEVEL
    seed: int = 0
    output: str = "results.jsonl"
    split_fraction: float = 0.5
    smoothing: float = DEFAULT_SMOOTHING
    folds: int = 5
    q_source: str = "model"
    record_timing: bool = False
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.environment not in ENVIRONMENTS:
            raise ConfigurationError(f"unknown environment {self.environment!r}; choose from {sorted(ENVIRONMENTS)}")
        if self.trials < 1:
            raise ConfigurationError("trials must be at least 1")
        unknown = [k for k in self.estimators if k not in ESTIMATOR_KEYS]
        if unknown:
            raise ConfigurationError(f"unknown estimator keys {unknown}; choose from {list(ESTIMATOR_KEYS)}")
        if not self.estimators:
            raise ConfigurationError("no estimators requested")
        if not self.sample_sizes or any(int(n) < 2 for n in self.sample_sizes):
            raise ConfigurationError("sample sizes must be integers >= 2")
        if any(s < 0 for s in self.scales) or not self.scales:
            raise ConfigurationError("misspecification scales must be non-negative")
        if self.q_source not in ("model", "exact"):
            raise ConfigurationError("q_source must be 'model' or 'exact'")
        if self.q_source == "exact":
            mdp = make_environment(self.environment, self.horizon).mdp
            if not np.array_equal(mdp.observation_map, np.arange(mdp.num_states)):
                raise ConfigurationError("exact Q is only defined for environments whose observations are the states")
        if self.workers < 1:
            raise ConfigurationError("workers must be at least 1")
        DiscountSpec(self.gamma)
        LTMLEConfig(split_fraction=self.split_fraction, folds=self.folds)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        extra = set(data) - names
        if extra:
            raise ConfigurationError(f"unknown config fields {sorted(extra)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"config {path} must hold a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def environment_spec(self) -> EnvironmentSpec:
        return make_environment(self.environment, self.horizon)

    def resolved_horizon(self) -> int:
        return self.horizon or self.environment_spec().default_horizon

    def triples(self) -> list:
        T = self.resolved_horizon()
        if self.grid is None:
            return default_grid(T)
        return [RegularizationTriple.from_list(t) for t in self.grid]

    def ltmle_config(self) -> LTMLEConfig:
        return LTMLEConfig(split_fraction=self.split_fraction, folds=self.folds)


def preset(name: str) -> ExperimentConfig:
    """Desk-scale defaults per environment (GridWorld keeps the lower half of the n-grid)."""
    if name not in ENVIRONMENTS:
        raise ConfigurationError(f"unknown environment {name!r}")
    sizes = [100, 200] if name == "gridworld" else [100, 200, 500, 1000]
    return ExperimentConfig(
        environment=name,
        sample_sizes=sizes,
        trials=DEFAULT_TRIALS[name],
        estimators=["dm", "wdr", "magic", "ltmle", "rltmle2"],
        output=f"{name}_results.jsonl",
    )


@dataclass
class TrialContext:
    """Everything an estimator may read in one trial; shared by all estimators."""

    env: EnvironmentSpec
    full: Dataset
    target: Dataset
    q: QStack
    q_procedure: Callable[[Dataset], QStack]
    discount: DiscountSpec
    triples: list
    B: int
    ci_level: float
    ltmle_config: LTMLEConfig
    seed_base: tuple


def _estimator_seed(ctx: TrialContext, key: str) -> int:
    return derive_seed(*ctx.seed_base, 2, key_hash(key))


def run_estimator(key: str, ctx: TrialContext) -> tuple[float, dict]:
    env, d, tgt, q = ctx.env, ctx.discount, ctx.target, ctx.q
    pe, pb = env.evaluation, env.behavior
    if key in ("is", "wis", "pdis", "cwpdis"):
        return is_family(tgt, pe, pb, d).as_dict()[key], {}
    if key == "dm":
        return dm_estimate(q, pe, tgt.initial_observation), {}
    if key == "wdr":
        return wdr_estimate(tgt, q, pe, pb, d), {}
    if key == "magic":
        res = magic_estimate(tgt, q, pe, pb, d, ctx.B, ctx.ci_level, _estimator_seed(ctx, key))
        return res.estimate, {"x_hat": res.x_hat.tolist()}
    if key == "ltmle":
        res = ltmle_backward(tgt, q, pe, pb, d, config=ctx.ltmle_config)
        return res.estimate, {"epsilon": res.fit.epsilon.tolist()}
    if key in ("rltmle1", "rltmle2"):
        fn = rltmle1 if key == "rltmle1" else rltmle2
        res = fn(tgt, q, pe, pb, d, ctx.triples, ctx.B, ctx.ci_level, ctx.ltmle_config, _estimator_seed(ctx, key))
        return res.estimate, {"x_hat": res.solution.x_hat.tolist(), "g": res.bank.g.tolist()}
    if key == "cv_ltmle":
        res = cv_ltmle(ctx.full, ctx.q_procedure, pe, pb, d, config=ctx.ltmle_config)
        return res.estimate, {"fold_estimates": res.fold_estimates.tolist()}
    raise ConfigurationError(f"unknown estimator key {key!r}")


def _initial_q(cfg: ExperimentConfig, env: EnvironmentSpec, data: Dataset, T: int, discount, scale, bias_seed):
    if cfg.q_source == "exact":
        exact = exact_q_functions(env.mdp, env.evaluation, T, discount)
        return inject_bias(exact, scale, bias_seed)
    q = model_based_q(data, env.mdp, env.evaluation, T, discount, cfg.smoothing)
    return inject_bias(q, scale, bias_seed)


def run_trial(cfg: ExperimentConfig, n_idx: int, s_idx: int, trial: int, truth: float) -> dict:
    """Simulate one dataset, build the shared initial estimate and run every estimator."""
    env = cfg.environment_spec()
    T = cfg.resolved_horizon()
    discount = DiscountSpec(cfg.gamma)
    n, scale = int(cfg.sample_sizes[n_idx]), float(cfg.scales[s_idx])
    base = (cfg.seed, n_idx, s_idx, trial)
    full = simulate(env.mdp, env.behavior, T, n, derive_seed(*base, 0))
    bias_seed = derive_seed(*base, 1)

    def procedure(sub: Dataset) -> QStack:
        return _initial_q(cfg, env, sub, T, discount, scale, bias_seed)

    if cfg.q_source == "exact":
        target, q = full, procedure(full)
    else:
        fit, target = full.split(cfg.split_fraction)
        q = procedure(fit)
    ctx = TrialContext(
        env, full, target, q, procedure, discount, cfg.triples(), cfg.B, cfg.ci_level, cfg.ltmle_config(), base
    )
    results = {}
    for key in cfg.estimators:
        start = time.perf_counter()
        record = {"estimate": None, "sq_error": None, "runtime_ms": "", "error": None, "warnings": []}
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                est, diag = run_estimator(key, ctx)
                record["estimate"] = float(est)
                record["sq_error"] = (float(est) - truth) ** 2
                record["diagnostics"] = diag
            except Exception as exc:  # recorded per cell, the sweep continues
                record["error"] = f"{type(exc).__name__}: {exc}"
        record["warnings"] = sorted({str(w.message) for w in caught})
        if cfg.record_timing:
            record["runtime_ms"] = 1000.0 * (time.perf_counter() - start)
        results[key] = record
    return {"type": "trial", "n": n, "scale": scale, "trial": trial, "truth": truth, "results": results}


def _trial_star(args):
    return run_trial(*args)


def true_value(cfg: ExperimentConfig) -> float:
    env = cfg.environment_spec()
    return exact_policy_value(env.mdp, env.evaluation, cfg.resolved_horizon(), DiscountSpec(cfg.gamma))


def run_experiment(cfg: ExperimentConfig, output=None, workers: int | None = None) -> Path:
    """Run the full sweep and write the JSON-lines results file.

    Work units are ``(n, scale, trial)`` triples.  Their seeds are derived
    from the master seed and the unit's indices, and records are written in
    unit order, so the file does not depend on ``workers``.
    """
    out = Path(output or cfg.output)
    workers = workers or cfg.workers
    truth = true_value(cfg)
    units = [
        (cfg, i, j, k, truth)
        for i in range(len(cfg.sample_sizes))
        for j in range(len(cfg.scales))
        for k in range(cfg.trials)
    ]
    if workers == 1:
        records = [run_trial(*u) for u in units]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_trial_star, units, chunksize=max(1, len(units) // (4 * workers))))
    header = {"type": "header", "version": __version__, "config": cfg.to_dict(), "truth": truth}
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return out


def load_results(path) -> tuple[dict, list]:
    """Header and trial records of a results file; raises ``ConfigurationError`` if malformed."""
    try:
        lines = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot parse results file {path}: {exc}") from exc
    if not lines or lines[0].get("type") != "header":
        raise ConfigurationError(f"{path}: missing header record")
    trials = lines[1:]
    for rec in trials:
        if rec.get("type") != "trial" or "results" not in rec:
            raise ConfigurationError(f"{path}: malformed trial record")
    return lines[0], trials


def jackknife_se_of_mean(values) -> float:
    """Leave-one-out jackknife standard error of a sample mean."""
    x = np.asarray(values, dtype=float)
    m = len(x)
    if m < 2:
        return float("nan")
    loo = (x.sum() - x) / (m - 1)
    return float(math.sqrt((m - 1) / m * np.sum((loo - loo.mean()) ** 2)))


def _cells(header: dict, trials: list) -> dict:
    cells: dict = {}
    env = header["config"]["environment"]
    for rec in trials:
        for key, res in rec["results"].items():
            cell = cells.setdefault((env, key, rec["n"], rec["scale"]), {"est": [], "truth": [], "rt": [], "trial": []})
            if res.get("estimate") is None:
                continue
            cell["est"].append(res["estimate"])
            cell["truth"].append(rec["truth"])
            cell["trial"].append(rec["trial"])
            if res.get("runtime_ms", "") != "":
                cell["rt"].append(res["runtime_ms"])
    return cells


def summarize(header: dict, trials: list) -> list[dict]:
    """One row per (environment, estimator, n, scale) in first-appearance order."""
    rows = []
    for (env, key, n, scale), c in _cells(header, trials).items():
        est = np.asarray(c["est"], dtype=float)
        err = est - np.asarray(c["truth"], dtype=float)
        m = len(est)
        rows.append(
            {
                "env": env,
                "estimator": key,
                "n": n,
                "scale": scale,
                "trials": m,
                "mse": float(np.mean(err**2)) if m else float("nan"),
                "mse_se": jackknife_se_of_mean(err**2),
                "bias": float(np.mean(err)) if m else float("nan"),
                "variance": float(np.mean((est - est.mean()) ** 2)) if m else float("nan"),
                "mean_runtime_ms": float(np.mean(c["rt"])) if c["rt"] else "",
            }
        )
    return rows


def paired_mse_difference(trials: list, key_a: str, key_b: str, n: int, scale: float) -> tuple[float, float]:
    """Mean of ``sq_error(a) - sq_error(b)`` over trials where both succeeded, with its jackknife SE."""
    diffs = []
    for rec in trials:
        if rec["n"] != n or rec["scale"] != scale:
            continue
        a, b = rec["results"].get(key_a), rec["results"].get(key_b)
        if a and b and a.get("sq_error") is not None and b.get("sq_error") is not None:
            diffs.append(a["sq_error"] - b["sq_error"])
    if not diffs:
        raise ConfigurationError(f"no paired trials for {key_a} and {key_b} at n={n}, scale={scale}")
    return float(np.mean(diffs)), jackknife_se_of_mean(diffs)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_report(results_path, csv_path=None, json_path=None) -> tuple[Path, Path]:
    """Write the per-cell CSV and a JSON summary next to the results file.

    CSV columns: ``env, estimator, n, scale, trials, mse, mse_se, bias,
    variance, mean_runtime_ms``.  ``bias`` is the mean signed error and
    ``variance`` the population variance of the estimates, so
    ``bias^2 + variance = mse``.  ``mean_runtime_ms`` is empty unless timing
    was recorded.
    """
    results_path = Path(results_path)
    header, trials = load_results(results_path)
    rows = summarize(header, trials)
    csv_path = Path(csv_path) if csv_path else results_path.with_suffix(".csv")
    json_path = Path(json_path) if json_path else results_path.with_suffix(".summary.json")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    summary = {
        "version": __version__,
        "config": header["config"],
        "truth": header["truth"],
        "columns": list(CSV_COLUMNS),
        "cells": rows,
    }
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path
