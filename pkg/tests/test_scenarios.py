import math
from types import SimpleNamespace

import numpy as np
import pytest

from madopt.dataset import subspace_filter
from madopt.optimizer import Mode
from madopt.scenarios import (ExtrapolationSpec, PlantContext, RampSpec, compare_to_holdout, extrapolate,
                              min_feasible_tau, pairwise_inside, ramp_sweep, setpoint_optimize,
                              trend_violations, tune_tau, write_ellipses)


def test_trend_violations():
    assert trend_violations([1, 2, 3]) == 0
    assert trend_violations([1, 3, 2, 4]) == 1
    assert trend_violations([3, 2, 1], increasing=False) == 0
    assert trend_violations([3, 2, 2.5], increasing=False) == 1
    assert trend_violations([1.0, 1.0 - 1e-9]) == 0


def test_ramp_spec_grid():
    spec = RampSpec()
    assert spec.setpoints == [185.0 + 15 * i for i in range(15)]
    assert spec.setpoints[-1] == 395.0
    with pytest.raises(ValueError):
        RampSpec(step=0)
    with pytest.raises(ValueError):
        RampSpec(tau_policy="magic")
    assert RampSpec.from_dict(spec.to_dict()) == spec


def test_extrapolation_spec_validation():
    with pytest.raises(ValueError):
        ExtrapolationSpec(setpoints=(370.0,))
    with pytest.raises(ValueError):
        ExtrapolationSpec(setpoints=(385.0, 400.0))
    with pytest.raises(ValueError):
        ExtrapolationSpec(upper_bound=0.5)


def test_extrapolate_refuses_leaky_context(ctx):
    with pytest.raises(ValueError, match="threshold"):
        extrapolate(ctx, ExtrapolationSpec())


def test_compare_to_holdout_window_and_fallback(plant):
    _, hold = subspace_filter(plant, 380.0)
    x = np.array(hold.columns(hold.input_names)[0])
    sol = SimpleNamespace(names=hold.input_names, x=x)
    report = SimpleNamespace(results={385.0: SimpleNamespace(solution=sol), 500.0: SimpleNamespace(solution=sol)})
    rows = compare_to_holdout(report, hold, window=2.0, k_fallback=5)
    p = hold.column("Power")
    near = np.abs(p - 385.0) <= 2.0
    assert rows[0]["n_reference"] == int(near.sum()) and not rows[0]["fallback"]
    assert rows[0]["CDP_deviation"] == pytest.approx(abs(x[0] - hold.column("CDP")[near].mean()))
    assert rows[1]["fallback"] and rows[1]["n_reference"] == 5


def test_setpoint_modes_differ_in_envelope(ctx):
    mad = setpoint_optimize(ctx, 250.0, ambient=26.0, tau=0.9)
    unc = setpoint_optimize(ctx, 250.0, ambient=26.0, mode=Mode.UNCONSTRAINED)
    assert mad.solution.feasible and mad.solution.d_m <= 0.9 + 1e-6
    assert unc.solution.objective <= mad.solution.objective + 1e-9
    assert all(mad.pairwise.values())


def test_min_feasible_tau_and_tuning(ctx):
    t = min_feasible_tau(ctx, 390.0, 26.0)
    assert 0.0 < t < 5.0
    assert math.isinf(min_feasible_tau(ctx, 395.0, 34.0))
    tuned = tune_tau(ctx, 390.0, [t - 0.2, t + 0.1], 26.0)
    assert tuned.tau == pytest.approx(t + 0.1)
    assert not tuned.table[0]["feasible"]
    with pytest.raises(ValueError):
        tune_tau(ctx, 390.0, [])
    with pytest.raises(ValueError):
        tune_tau(ctx, 390.0, [1.0, 0.5])


def test_small_ramp_and_outputs(ctx, tmp_path):
    spec = RampSpec(start=200.0, end=260.0, step=30.0, ambient_cases=(26.0,))
    rep = ramp_sweep(ctx, spec)
    assert len(rep.rows) == 3
    assert all(r["feasible"] for r in rep.rows)
    assert rep.anomalies["AT26"]["TE_trend_violations"] == 0
    for r in rep.rows:
        assert r["d_m"] <= r["tau"] + 1e-6
    files = rep.write(tmp_path)
    assert (tmp_path / "ramp_madopt_AT26.csv").read_text().count("\n") == 4
    assert files[-1].name == "ramp_madopt_summary.json"


def test_ellipse_files(ctx, tmp_path):
    res = setpoint_optimize(ctx, 300.0, ambient=26.0, tau=1.0)
    files = write_ellipses(ctx.envelope, ctx.scaler, 1.0, tmp_path, [("mad", res.solution)])
    names = sorted(p.name for p in files)
    assert "ellipse_CDP_GFFR.csv" in names and "ellipse_CDT_PHGOT_points.csv" in names
    header = (tmp_path / "ellipse_CDP_GFFR.csv").read_text().splitlines()[0]
    assert header == "CDP,GFFR"
    assert pairwise_inside(ctx.envelope, res.solution.x_scaled, 1.0) == res.pairwise


@pytest.fixture(scope="module")
def sub_ctx(subspace_models):
    models, sub, _ = subspace_models
    return PlantContext.build(models, sub)


def test_extrapolation_tuned_beats_unconstrained(sub_ctx, subspace_models):
    _, sub, hold = subspace_models
    base = ExtrapolationSpec()
    amb = None
    sched = {}
    for sp in base.setpoints:
        from madopt.scenarios import extrapolation_ambient
        amb = extrapolation_ambient(sub, base.ambient_perturbation, base.seed)
        bounds = {n: (0.0, base.upper_bound) for n in ("CDP", "GFFR", "FGT", "PHGOT", "CDT", "FGEXT")}
        sched[sp] = min_feasible_tau(sub_ctx, sp, amb, bounds) + 0.05
    spec = ExtrapolationSpec(tau_schedule=sched)
    mad = extrapolate(sub_ctx, spec, suggest=False)
    unc = extrapolate(sub_ctx, spec, mode=Mode.UNCONSTRAINED)
    assert all(r.solution.feasible for r in mad.results.values())
    dm = compare_to_holdout(mad, hold)
    du = compare_to_holdout(unc, hold)
    for a, b in zip(dm, du):
        assert a["CDP_deviation"] < b["CDP_deviation"]
        assert a["GFFR_deviation"] < b["GFFR_deviation"]
    rows = {r["setpoint"]: r for r in mad.rows()}
    assert rows[395.0]["exceeds_subspace_CDP"] or rows[395.0]["exceeds_subspace_GFFR"]
