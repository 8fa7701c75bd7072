import dataclasses

import numpy as np
import pytest

from diffest.config import KernelSpec, SystemConfig
from diffest.errors import ConfigError, PlanError, SchemaError
from diffest.estimator import EstimateReport
from diffest.harness import (
    AGGREGATE_NAME, ExperimentPlan, RunArtifact, emit_tables, load_artifacts, run_plan, set_field,
)


def base(**kw):
    args = dict(d=2, N=6, K=2, T=0.1, dt=0.05, nu=0.1, delta=0.3, substeps=1)
    args.update(kw)
    return SystemConfig(**args)


def plan(tmp_path, **kw):
    return ExperimentPlan(base=base(), output_dir=str(tmp_path), master_seed=3, **kw)


def test_single_run(tmp_path):
    arts = run_plan(plan(tmp_path))
    assert len(arts) == 1 and arts[0].ok
    assert len(list((tmp_path / "runs").glob("*.json"))) == 1


def test_cartesian_count(tmp_path):
    p = plan(tmp_path, axes={"nu": [0.1, 0.2, 0.3], "N": [4, 6, 8, 10]}, replicates=5)
    arts = run_plan(p)
    assert len(arts) == 60 and all(a.ok for a in arts)
    assert len({a.config_hash for a in arts}) == 60


def test_rerun_is_idempotent(tmp_path):
    p = plan(tmp_path, axes={"K": [1, 2]}, replicates=2)
    first = run_plan(p)
    csv1 = (tmp_path / AGGREGATE_NAME).read_bytes()
    second = run_plan(p)
    assert sum(a.computed for a in first) == 4
    assert sum(a.computed for a in second) == 0
    assert (tmp_path / AGGREGATE_NAME).read_bytes() == csv1
    forced = run_plan(p, force=True)
    assert sum(a.computed for a in forced) == 4
    assert (tmp_path / AGGREGATE_NAME).read_bytes() == csv1


def test_aggregate_has_no_timing(tmp_path):
    run_plan(plan(tmp_path))
    header = (tmp_path / AGGREGATE_NAME).read_text().splitlines()[0]
    assert "time" not in header and "nu_hat" in header


def test_parallel_matches_serial(tmp_path):
    axes = {"nu": [0.1, 0.2], "K": [1, 2]}
    run_plan(plan(tmp_path / "a", axes=axes))
    run_plan(plan(tmp_path / "b", axes=axes, parallelism=2))
    assert (tmp_path / "a" / AGGREGATE_NAME).read_bytes() == (tmp_path / "b" / AGGREGATE_NAME).read_bytes()


def test_budget_cap(tmp_path):
    with pytest.raises(PlanError):
        plan(tmp_path, axes={"nu": [0.1, 0.2]}, replicates=6, budget=10)
    with pytest.raises(PlanError):
        plan(tmp_path, axes={"nu": []})
    with pytest.raises(PlanError):
        plan(tmp_path, replicates=0)


def test_seeds_stable_when_axis_grows(tmp_path):
    small = plan(tmp_path, axes={"nu": [0.1, 0.2]}, replicates=2).runs()
    large = plan(tmp_path, axes={"nu": [0.1, 0.2, 0.3]}, replicates=2).runs()
    assert [c.seed for _, _, c in small] == [c.seed for _, _, c in large[:4]]
    assert len({c.seed for _, _, c in large}) == 6


def test_failure_isolation(tmp_path):
    p = plan(tmp_path, axes={"kernel.kind": ["regularized", "newtonian"]}, meanfield=True)
    arts = run_plan(p)
    assert [a.status for a in arts] == ["failed", "failed"]
    assert "ConfigError" in arts[0].error
    ok = plan(tmp_path, axes={"K": [1, 2]})
    assert all(a.ok for a in run_plan(ok))
    assert len(list((tmp_path / "runs").glob("*.failed.json"))) == 2
    assert len(load_artifacts(tmp_path)) == 2


def test_coincident_newtonian_failure_is_isolated(tmp_path):
    p = ExperimentPlan(base=base(kernel=KernelSpec("newtonian"), nu=0.0), output_dir=str(tmp_path),
                       axes={"initial": [{"kind": "gaussian", "scale": 1.0}]}, replicates=1)
    # Newtonian forces are finite for distinct particles
    assert run_plan(p)[0].ok


def test_set_field():
    c = set_field(base(), "kernel.sign", "attractive")
    assert c.kernel.sign == "attractive"
    with pytest.raises(ConfigError):
        set_field(base(), "nonsense", 1)
    with pytest.raises(ConfigError):
        set_field(base(), "kernel.colour", 1)
    with pytest.raises(ConfigError):
        set_field(base(), "grid.n", 64)


def test_load_plan(tmp_path):
    (tmp_path / "plan.json").write_text(
        '{"base": {"d": 2, "N": 4, "K": 1, "T": 0.1, "dt": 0.05, "nu": 0.1, "kernel": "zero"},'
        ' "axes": {"nu": [0.1, 0.2]}, "replicates": 3}')
    p = ExperimentPlan.load(tmp_path / "plan.json")
    assert p.size == 6
    with pytest.raises(ConfigError):
        ExperimentPlan.from_dict({"axes": {}})
    with pytest.raises(ConfigError):
        ExperimentPlan.from_dict({"base": base().to_dict(), "colour": 1})


def synthetic(nu_hat, **cfg):
    c = base(**cfg)
    rep = EstimateReport(nu_hat=nu_hat, nu=c.nu, gamma=0.1, alpha=1.0, config=c.to_dict(),
                         config_hash=c.config_hash(), seed=c.seed)
    return RunArtifact(c.config_hash(), "ok", rep)


def test_table_single_artifact():
    t = emit_tables([synthetic(0.12)], ["dt"])
    assert len(t.rows) == 1
    assert t.rows[0]["err_median"] == pytest.approx(0.02)
    assert t.to_csv().splitlines()[0].startswith("dt,count,err_mean")


def test_table_zero_errors():
    arts = [synthetic(0.1, seed=s, dt=dt, T=0.4) for s in range(3) for dt in (0.1, 0.2)]
    t = emit_tables(arts, ["dt"])
    assert all(r["err_mean"] == 0.0 and r["err_median"] == 0.0 for r in t.rows)


def test_table_rate_fit():
    dts = (0.4, 0.1, 0.025, 0.00625)
    arts = [synthetic(0.1 + dt**0.5, dt=dt, T=0.8) for dt in dts]
    t = emit_tables(arts, ["dt"])
    assert [r["dt"] for r in t.rows] == sorted(dts)
    assert t.fits["err_median"]["slope"] == pytest.approx(0.5, abs=1e-12)
    assert "I2_mean" not in t.fits


def test_table_schema_errors():
    with pytest.raises(SchemaError):
        emit_tables([synthetic(0.1, d=2), synthetic(0.1, d=3)], ["dt"])
    with pytest.raises(SchemaError):
        emit_tables([synthetic(0.1)], ["colour"])
    with pytest.raises(SchemaError):
        emit_tables([RunArtifact("x", "failed")], ["dt"])
    by_sign = emit_tables([synthetic(0.1)], ["kernel.sign"])
    assert by_sign.rows[0]["kernel.sign"] == "repulsive"
