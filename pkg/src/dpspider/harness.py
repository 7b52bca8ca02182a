"""Seeded experiment execution, sweeps and scaling reports."""

from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import stats

from . import objective
from .calibrate import Calibration, Constants, calibration_for
from .spider import run_spider, select_best_candidate
from .verify import check_sosp, min_eigenvalue

log = logging.getLogger(__name__)

OUT_ENV = "DPSPIDER_OUT"
REFERENCE_EXPONENTS = {"n": -1 / 3, "privacy": 1 / 2}

DEFAULT_CONFIG: dict[str, Any] = {
    "problem": {"family": "quartic_saddle", "d": 5, "noise_model": "none", "s_z": 0.0, "x0": None},
    "privacy": {"epsilon": 2.0, "delta": 1e-6, "preset": "tree"},
    "data": {"n": 100_000},
    "iota": 0.01,
    "seeds": {"master_seed": 0, "num_runs": 1},
    "overrides": {},
    "constants": {},
    "check": {"alpha": None, "alpha_factor": 1.0},
    "output": {"dir": None},
    "emit_trace": False,
    "drift_mode": "estimator_norm",
    "workers": 1,
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "overrides":
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_epsilon(value) -> float:
    if isinstance(value, str):
        if value.lower() in ("inf", "infinity"):
            return math.inf
        value = float(value)
    if value is None:
        return math.inf
    return float(value)


@dataclass
class ExperimentConfig:
    """Validated experiment configuration (see ``DEFAULT_CONFIG`` for the
    JSON layout)."""

    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_CONFIG))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - set(DEFAULT_CONFIG)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(_merge(DEFAULT_CONFIG, data))
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **updates) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(_merge(self.raw, updates))

    @property
    def epsilon(self) -> float:
        return _parse_epsilon(self.raw["privacy"]["epsilon"])

    @property
    def n(self) -> int:
        return int(self.raw["data"]["n"])

    def validate(self) -> None:
        r = self.raw
        try:
            eps = self.epsilon
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad epsilon: {exc}") from None
        if not eps > 0:
            raise ConfigError("epsilon must be positive")
        delta = r["privacy"]["delta"]
        if not (isinstance(delta, (int, float)) and 0 < delta < 1):
            raise ConfigError("delta must lie in (0, 1)")
        n = r["data"]["n"]
        if not (isinstance(n, (int, float)) and n >= 1 and int(n) == n):
            raise ConfigError("n must be a positive integer")
        if not 0 < r["iota"] < 1:
            raise ConfigError("iota must lie in (0, 1)")
        p = r["problem"]
        if p["family"] not in objective.FAMILIES:
            raise ConfigError(f"unknown family {p['family']!r}")
        if p["noise_model"] not in objective.NOISE_MODELS:
            raise ConfigError(f"unknown noise model {p['noise_model']!r}")
        if not (isinstance(p["d"], int) and p["d"] >= 1):
            raise ConfigError("d must be a positive integer")
        if p["s_z"] < 0:
            raise ConfigError("s_z must be nonnegative")
        if r["seeds"]["num_runs"] < 1:
            raise ConfigError("num_runs must be positive")
        if r["workers"] < 1:
            raise ConfigError("workers must be positive")

    def problem(self) -> objective.ProblemSpec:
        p = self.raw["problem"]
        try:
            return objective.make_problem(p["family"], p["d"], p["noise_model"], p["s_z"], x0=p.get("x0"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def calibration(self, spec=None) -> Calibration:
        spec = spec or self.problem()
        r = self.raw
        try:
            return calibration_for(
                spec,
                self.n,
                self.epsilon,
                r["privacy"]["delta"],
                r["iota"],
                constants=Constants(**r["constants"]),
                overrides=r["overrides"],
                preset=r["privacy"]["preset"],
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def check_alpha(self, calib: Calibration) -> float:
        c = self.raw["check"]
        if c.get("alpha") is not None:
            return float(c["alpha"])
        return float(c.get("alpha_factor", 1.0)) * calib.alpha


def run_seeds(master_seed: int, run_index: int) -> tuple[int, int]:
    ss = np.random.SeedSequence([int(master_seed), int(run_index)])
    data_seed, algo_seed = (int(v) for v in ss.generate_state(2))
    return data_seed, algo_seed


def first_sosp_index(candidates, spec, alpha: float):
    """Index of the first in-box candidate that is an ``alpha``-SOSP, else None."""
    thr = -math.sqrt(spec.rho * alpha)
    for i, x in enumerate(candidates):
        if not spec.in_box(x):
            continue
        if np.linalg.norm(objective.population_gradient(spec, x)) > alpha:
            continue
        if min_eigenvalue(objective.population_hessian(spec, x)) >= thr:
            return i
    return None


def _run_one(args) -> dict:
    raw, run_index, out_dir = args
    cfg = ExperimentConfig.from_dict(raw)
    spec = cfg.problem()
    calib = cfg.calibration(spec)
    alpha_check = cfg.check_alpha(calib)
    data_seed, algo_seed = run_seeds(raw["seeds"]["master_seed"], run_index)
    record: dict[str, Any] = {
        "run_index": run_index,
        "data_seed": data_seed,
        "algo_seed": algo_seed,
        "config": raw,
        "problem": spec.to_dict(),
        "calibration": calib.to_dict(),
        "alpha_check": alpha_check,
        "non_private_selection": True,
    }
    if not calib.feasible:
        record.update(status="infeasible", valid=False, data_used=0, steps=0)
        return record
    start = time.perf_counter()
    dataset = objective.generate_dataset(spec, cfg.n, data_seed)
    trace = run_spider(spec, dataset, calib, algo_seed, drift_mode=raw["drift_mode"])
    record.update(
        status="ok",
        valid=trace.valid,
        halt_reason=trace.halt_reason,
        steps=len(trace),
        epochs=trace.epochs,
        perturbations=len(trace.perturbations),
        data_used=trace.data_used,
        n=cfg.n,
    )
    try:
        x, diag = select_best_candidate(trace, spec, alpha_check)
        report = check_sosp(spec, x, alpha_check)
        record["best"] = {"x": x.tolist(), "index": diag.index, "score": diag.score, "private": False}
        record["sosp"] = report.to_dict()
    except (ValueError, objective.DomainViolation) as exc:
        record["best"] = None
        record["sosp"] = None
        record["selection_error"] = str(exc)
    idx = first_sosp_index(trace.candidates, spec, alpha_check)
    record["any_sosp"] = idx is not None
    record["first_sosp_index"] = idx
    record["wall_time"] = time.perf_counter() - start
    if raw.get("emit_trace") and out_dir is not None:
        trace.write_jsonl(Path(out_dir) / f"trace_{run_index:04d}.jsonl")
    return record


def _default_out_dir(cfg: ExperimentConfig):
    out = cfg.raw["output"].get("dir") or os.environ.get(OUT_ENV)
    return Path(out) if out else None


def run_experiment(config, out_dir=None) -> list:
    """Execute every seeded run of ``config``; append records to
    ``<out_dir>/results.jsonl`` when an output directory is known."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    cfg.validate()
    cfg.calibration()  # surfaces bad overrides before any work
    out = Path(out_dir) if out_dir is not None else _default_out_dir(cfg)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg.raw, i, out) for i in range(cfg.raw["seeds"]["num_runs"])]
    workers = cfg.raw["workers"]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            records = list(ex.map(_run_one, jobs))
    else:
        records = [_run_one(j) for j in jobs]
    if out is not None:
        with open(out / "results.jsonl", "a") as fh:
            for rec in records:
                fh.write(dumps_record(rec) + "\n")
    return records


def dumps_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serialisable: {type(obj)}")


def strip_wall_time(record: dict) -> dict:
    return {k: v for k, v in record.items() if k != "wall_time"}


def achieved_grad_norm(record: dict) -> float:
    """Population gradient norm at the selected candidate; ``inf`` when the
    run produced no usable candidate."""
    if record.get("sosp") is None:
        return math.inf
    return float(record["sosp"]["grad_norm"])


SWEEP_AXES = {"n": ("data", "n"), "d": ("problem", "d"), "epsilon": ("privacy", "epsilon")}
CSV_FIELDS = [
    "n", "d", "epsilon", "runs", "valid_runs", "sosp_runs", "alpha", "alpha_check",
    "grad_norm_median", "grad_norm_q25", "grad_norm_q75",
    "margin_median", "margin_q25", "margin_q75", "max_data_used", "error",
]


def parse_grid(text: str) -> dict:
    """``"n=1000,10000;epsilon=2"`` -> ``{"n": [1000, 10000], "epsilon": [2.0]}``."""
    grid = {}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        key, _, values = part.partition("=")
        key = key.strip()
        if key not in SWEEP_AXES:
            raise ConfigError(f"unknown grid axis {key!r}")
        items = [v.strip() for v in values.split(",") if v.strip()]
        try:
            if key in ("n", "d"):
                grid[key] = [int(float(v)) for v in items]
            else:
                grid[key] = [_parse_epsilon(v) for v in items]
        except ValueError as exc:
            raise ConfigError(f"bad grid values for {key}: {exc}") from None
    return grid


def _quantiles(values):
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return (math.nan,) * 3
    # +-inf marks runs without a candidate; interpolating across it gives nan
    method = "linear" if np.all(np.isfinite(arr)) else "inverted_cdf"
    q25, med, q75 = np.quantile(arr, [0.25, 0.5, 0.75], method=method)
    return float(med), float(q25), float(q75)


def summarize(records: list) -> dict:
    grads = [achieved_grad_norm(r) for r in records]
    margins = []
    for r in records:
        if r.get("sosp") is None:
            margins.append(-math.inf)
        else:
            s = r["sosp"]
            margins.append(s["min_eig"] + math.sqrt(s["rho"] * s["alpha"]))
    g_med, g25, g75 = _quantiles(grads)
    m_med, m25, m75 = _quantiles(margins)
    calib = records[0]["calibration"] if records else {}
    return {
        "runs": len(records),
        "valid_runs": sum(bool(r.get("valid")) for r in records),
        "sosp_runs": sum(bool(r.get("any_sosp")) for r in records),
        "alpha": calib.get("alpha"),
        "alpha_check": records[0].get("alpha_check") if records else None,
        "grad_norm_median": g_med,
        "grad_norm_q25": g25,
        "grad_norm_q75": g75,
        "margin_median": m_med,
        "margin_q25": m25,
        "margin_q75": m75,
        "max_data_used": max((r.get("data_used", 0) for r in records), default=0),
        "error": "",
    }


def sweep(config, grid: dict, csv_path=None, out_dir=None) -> list:
    """One summary row per grid cell, in deterministic cell order."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("empty grid")
    axes = list(grid)
    rows = []
    for values in itertools.product(*(grid[a] for a in axes)):
        update: dict = {}
        for axis, value in zip(axes, values):
            section, key = SWEEP_AXES[axis]
            update.setdefault(section, {})[key] = "inf" if value == math.inf else value
        row = {
            "n": cfg.n, "d": cfg.raw["problem"]["d"], "epsilon": cfg.raw["privacy"]["epsilon"],
        }
        for axis, value in zip(axes, values):
            row[axis] = value
        try:
            cell = cfg.replace(**update)
            row.update(summarize(run_experiment(cell, out_dir=out_dir)))
        except Exception as exc:  # a failed cell must not stop the sweep
            log.warning("sweep cell %s failed: %s", row, exc)
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    if csv_path is not None:
        write_csv(rows, csv_path)
    return rows


def write_csv(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in CSV_FIELDS})


@dataclass(frozen=True)
class SlopeFit:
    axis: str
    slope: float
    ci_low: float
    ci_high: float
    points: int
    reference: float


def _fit(xs, ys, axis: str, reference: float, level: float) -> SlopeFit:
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    res = stats.linregress(lx, ly)
    if len(xs) > 2:
        half = stats.t.ppf(0.5 + level / 2, len(xs) - 2) * res.stderr
    else:
        half = math.inf
    return SlopeFit(axis, float(res.slope), float(res.slope - half), float(res.slope + half), len(xs), reference)


def report(csv_path, level: float = 0.95, column: str = "grad_norm_median") -> dict:
    """Least-squares log-log slopes of the achieved accuracy against ``n`` and
    against ``sqrt(d) / (n epsilon)``, printed next to the reference exponents."""
    rows = []
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                y = float(row[column])
                n = float(row["n"])
                d = float(row["d"])
                eps = _parse_epsilon(row["epsilon"])
            except (KeyError, ValueError):
                continue
            if math.isfinite(y) and y > 0:
                rows.append((n, d, eps, y))
    fits = {}
    ns = [r[0] for r in rows]
    if len(set(ns)) < 3:
        raise ConfigError("need at least 3 distinct n values with finite accuracy to fit a slope")
    fits["n"] = _fit(ns, [r[3] for r in rows], "n", REFERENCE_EXPONENTS["n"], level)
    priv = [(math.sqrt(r[1]) / (r[0] * r[2]), r[3]) for r in rows if math.isfinite(r[2])]
    if len({p[0] for p in priv}) >= 3:
        fits["privacy"] = _fit(
            [p[0] for p in priv], [p[1] for p in priv], "sqrt(d)/(n eps)", REFERENCE_EXPONENTS["privacy"], level
        )
    for fit in fits.values():
        print(
            f"{fit.axis:>16}: slope {fit.slope:+.4f}  [{fit.ci_low:+.4f}, {fit.ci_high:+.4f}]"
            f"  reference {fit.reference:+.4f}  ({fit.points} points)"
        )
    return fits


def verify_records(path) -> list:
    """Recompute the SOSP report of every stored record; returns
    ``(run_index, ok, message)`` tuples."""
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            idx = rec.get("run_index")
            if rec.get("best") is None:
                out.append((idx, rec.get("status") == "infeasible" or not rec.get("valid", True), "no candidate"))
                continue
            spec = ExperimentConfig.from_dict(rec["config"]).problem()
            report_ = check_sosp(spec, np.asarray(rec["best"]["x"]), rec["alpha_check"])
            stored = rec["sosp"]
            ok = (
                report_.is_sosp == stored["is_sosp"]
                and math.isclose(report_.grad_norm, stored["grad_norm"], rel_tol=1e-9, abs_tol=1e-12)
                and math.isclose(report_.min_eig, stored["min_eig"], rel_tol=1e-6, abs_tol=1e-8)
                and rec.get("data_used", 0) <= rec.get("n", math.inf)
            )
            out.append((idx, ok, f"grad_norm={report_.grad_norm:.3g} min_eig={report_.min_eig:.3g} sosp={report_.is_sosp}"))
    return out
