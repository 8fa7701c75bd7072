"""Sweep execution: seeds, budget, idempotent per-run artifacts, aggregate tables."""
from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import multiprocessing
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import GridSpec, InitialSpec, KernelSpec, SystemConfig
from .errors import ConfigError, PlanError, SchemaError
from .estimator import CSV_COLUMNS, EstimateReport, ObservationSet, make_report
from .rng import derive_seed
from .stats_bounds import fit_rate

DEFAULT_BUDGET = 10_000
AGGREGATE_NAME = "aggregate.csv"

_NESTED = {"kernel": KernelSpec, "initial": InitialSpec, "grid": GridSpec}


def set_field(config: SystemConfig, name: str, value) -> SystemConfig:
    """Replace a config field; ``kernel.sign``-style names reach nested records."""
    if "." in name:
        outer, inner = name.split(".", 1)
        if outer not in _NESTED:
            raise ConfigError(f"unknown sweep axis {name!r}")
        sub = getattr(config, outer)
        if sub is None:
            raise ConfigError(f"config has no {outer} to modify")
        try:
            sub = dataclasses.replace(sub, **{inner: value})
        except TypeError as exc:
            raise ConfigError(f"unknown sweep axis {name!r}") from exc
        return config.replace(**{outer: sub})
    if name not in {f.name for f in dataclasses.fields(SystemConfig)}:
        raise ConfigError(f"unknown sweep axis {name!r}")
    if name in _NESTED and isinstance(value, dict):
        value = KernelSpec.from_dict(value) if name == "kernel" else _NESTED[name](**value)
    return config.replace(**{name: value})


@dataclass(frozen=True)
class ExperimentPlan:
    """Cartesian sweep over config fields with seeded replicates.

    Run seeds come from ``(master_seed, axis indices, replicate)``, so
    appending values to an axis leaves existing runs untouched.
    """

    base: SystemConfig
    axes: dict = field(default_factory=dict)
    replicates: int = 1
    output_dir: str = "diffest-out"
    parallelism: int = 1
    master_seed: int = 0
    budget: int = DEFAULT_BUDGET
    gamma: float = 0.1
    meanfield: bool = False

    def __post_init__(self):
        if self.replicates < 1:
            raise PlanError("replicates must be >= 1")
        if self.parallelism < 1:
            raise PlanError("parallelism must be >= 1")
        for name, values in self.axes.items():
            if not isinstance(values, (list, tuple)) or not values:
                raise PlanError(f"axis {name!r} needs a nonempty list of values")
        if self.size > self.budget:
            raise PlanError(f"plan has {self.size} runs, budget is {self.budget}")

    @property
    def size(self) -> int:
        n = self.replicates
        for values in self.axes.values():
            n *= len(values)
        return n

    def runs(self):
        """List of ``(axis_indices, replicate, config)`` in deterministic order."""
        names = list(self.axes)
        out = []
        for idx in itertools.product(*(range(len(self.axes[n])) for n in names)):
            cfg = self.base
            for name, i in zip(names, idx):
                cfg = set_field(cfg, name, self.axes[name][i])
            for rep in range(self.replicates):
                seed = derive_seed(self.master_seed, *idx, rep)
                out.append((tuple(idx), rep, cfg.replace(seed=seed)))
        return out

    def replace(self, **changes) -> "ExperimentPlan":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentPlan":
        data = dict(data)
        if "base" not in data:
            raise ConfigError("plan needs a 'base' config")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown plan keys: {', '.join(sorted(unknown))}")
        data["base"] = SystemConfig.from_dict(data["base"])
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class RunArtifact:
    config_hash: str
    status: str
    report: Optional[EstimateReport] = None
    error: Optional[str] = None
    axis_indices: tuple = ()
    replicate: int = 0
    wall_time: float = 0.0
    computed: bool = True

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "status": self.status,
                "report": None if self.report is None else self.report.to_dict(),
                "error": self.error, "axis_indices": list(self.axis_indices),
                "replicate": self.replicate, "wall_time": self.wall_time}

    @classmethod
    def from_dict(cls, data: dict) -> "RunArtifact":
        rep = data.get("report")
        return cls(config_hash=data["config_hash"], status=data["status"],
                   report=None if rep is None else EstimateReport.from_dict(rep),
                   error=data.get("error"), axis_indices=tuple(data.get("axis_indices", ())),
                   replicate=data.get("replicate", 0), wall_time=data.get("wall_time", 0.0),
                   computed=False)


@lru_cache(maxsize=2)
def _density_solution(config_json: str):
    from .meanfield import DensityField, solve_density
    cfg = SystemConfig.from_json(config_json)
    return solve_density(DensityField.from_initial(cfg.initial, cfg.grid), cfg)


def execute_run(config: SystemConfig, gamma: float = 0.1, meanfield: bool = False) -> EstimateReport:
    """Simulate one configuration and evaluate every estimator its data supports."""
    from .sde_sim import simulate
    ens = simulate(config)
    provider = None
    if meanfield:
        if config.d != 2 or config.grid is None:
            raise ConfigError("mean-field diagnostics need d = 2 and a grid")
        provider = _density_solution(config.replace(seed=0).to_json())
    obs = ObservationSet.from_ensemble(ens, provider=provider)
    return make_report(obs, gamma)


def _worker(args):
    idx, rep, cfg_json, gamma, meanfield = args
    cfg = SystemConfig.from_json(cfg_json)
    t0 = time.perf_counter()
    try:
        report = execute_run(cfg, gamma, meanfield)
        return RunArtifact(cfg.config_hash(), "ok", report, None, idx, rep, time.perf_counter() - t0)
    except Exception as exc:  # isolation: one failed run never stops the plan
        msg = f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"
        return RunArtifact(cfg.config_hash(), "failed", None, msg, idx, rep, time.perf_counter() - t0)


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def run_plan(plan: ExperimentPlan, force: bool = False) -> list[RunArtifact]:
    """Execute a plan; completed runs (matching config hash) are reused unless ``force``."""
    out = Path(plan.output_dir)
    run_dir = out / "runs"
    run_dir.mkdir(parents=True, exist_ok=True)
    todo, results = [], {}
    for pos, (idx, rep, cfg) in enumerate(plan.runs()):
        path = run_dir / f"{cfg.config_hash()}.json"
        if path.exists() and not force:
            art = RunArtifact.from_dict(json.loads(path.read_text()))
            if art.ok:
                results[pos] = art
                continue
        todo.append((pos, (idx, rep, cfg.to_json(), plan.gamma, plan.meanfield)))
    if todo:
        if plan.parallelism > 1 and len(todo) > 1:
            # fork is unsafe once the compiled kernels have started their thread pool
            ctx = multiprocessing.get_context("spawn")
            with ProcessPoolExecutor(max_workers=plan.parallelism, mp_context=ctx) as pool:
                done = list(pool.map(_worker, [a for _, a in todo]))
        else:
            done = [_worker(a) for _, a in todo]
        for (pos, _), art in zip(todo, done):
            results[pos] = art
            if art.ok:
                _write_atomic(run_dir / f"{art.config_hash}.json", json.dumps(art.to_dict(), indent=2))
            else:
                _write_atomic(run_dir / f"{art.config_hash}.failed.json", json.dumps(art.to_dict(), indent=2))
    artifacts = [results[i] for i in range(len(results))]
    _write_atomic(out / AGGREGATE_NAME, aggregate_csv(artifacts))
    return artifacts


def aggregate_csv(artifacts: Sequence[RunArtifact]) -> str:
    """Deterministic CSV (no timing columns) of all runs in plan order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("config_hash", "status", "replicate") + CSV_COLUMNS)
    for art in artifacts:
        row = art.report.csv_row() if art.report is not None else {}
        w.writerow([art.config_hash, art.status, art.replicate]
                   + ["" if row.get(c) is None else repr(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def load_artifacts(output_dir) -> list[RunArtifact]:
    run_dir = Path(output_dir) / "runs"
    arts = []
    for p in sorted(run_dir.glob("*.json")):
        if p.name.endswith(".failed.json"):
            continue
        arts.append(RunArtifact.from_dict(json.loads(p.read_text())))
    return arts


@dataclass(frozen=True)
class Table:
    grouping: tuple
    rows: list
    fits: dict

    def to_csv(self) -> str:
        if not self.rows:
            return ""
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(self.rows[0]), lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: ("" if v is None else v) for k, v in r.items()})
        return buf.getvalue()


def _lookup(config: dict, name: str):
    cur = config
    for part in name.split("."):
        if not isinstance(cur, dict) or part not in cur:
            raise SchemaError(f"artifact config lacks field {name!r}")
        cur = cur[part]
    return cur


def _mean_opt(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def emit_tables(artifacts: Sequence[RunArtifact], grouping: Sequence[str]) -> Table:
    """Group successful runs and summarize |nu_hat - nu| and the diagnostics.

    When grouping by a single numeric field with at least three groups, the
    log-log slopes of the median error and of the error stdev are fitted.
    """
    reports = [a.report for a in artifacts if a.report is not None]
    if not reports:
        raise SchemaError("no successful artifacts to tabulate")
    grouping = tuple(grouping)
    groups: dict = {}
    for r in reports:
        key = tuple(_lookup(r.config, g) for g in grouping)
        groups.setdefault(key, []).append(r)
    rows = []
    for key in sorted(groups, key=lambda k: tuple((str(type(v)), v) for v in k)):
        members = groups[key]
        dims = {m.config["d"] for m in members}
        if len(dims) > 1:
            raise SchemaError(f"group {key} mixes dimensions {sorted(dims)}")
        err = np.array([m.abs_error for m in members])
        nh = np.array([m.nu_hat for m in members])
        row = dict(zip(grouping, key))
        row.update({
            "count": len(members),
            "err_mean": float(err.mean()),
            "err_median": float(np.median(err)),
            "err_q10": float(np.quantile(err, 0.1)),
            "err_q90": float(np.quantile(err, 0.9)),
            "nu_hat_std": float(nh.std(ddof=1)) if len(nh) > 1 else 0.0,
            "nu_KN_mean": _mean_opt([m.nu_KN for m in members]),
            "I2_mean": _mean_opt([m.I2 for m in members]),
            "I3_mean": _mean_opt([m.I3 for m in members]),
        })
        rows.append(row)
    fits = {}
    if len(grouping) == 1 and len(rows) >= 3:
        xs = [r[grouping[0]] for r in rows]
        if all(isinstance(x, (int, float)) and x > 0 for x in xs):
            for col in ("err_median", "nu_hat_std", "I2_mean", "I3_mean"):
                ys = [r[col] for r in rows]
                if all(y is not None and y > 0 for y in ys):
                    fits[col] = fit_rate(xs, ys)._asdict()
    return Table(grouping, rows, fits)
