"""Experiment campaigns: single setpoints, ramp sweeps and extrapolation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import AMBIENT_NAMES, PROCESS_NAMES, Dataset
from .mahalanobis import MahalanobisEnvelope, write_polyline_csv
from .optimizer import (ConsistencyReport, Mode, OptSolution, SolverSettings, build_problem,
                        check_domain_consistency, min_envelope_distance, multi_start)

DEFAULT_TAU = 0.9
PAIRS = (("CDP", "GFFR"), ("CDT", "PHGOT"))
TREND_TOL = 1e-6
PINNED_TOL = 0.02


@dataclass
class PlantContext:
    """Trained surrogates, the fitted envelope and the data they came from.

    ``data`` is the training data. Its schema supplies the variable ranges
    for consistency checks and its rows supply the historical output range.
    """

    models: object
    envelope: MahalanobisEnvelope
    data: Dataset
    settings: SolverSettings = field(default_factory=SolverSettings)
    n_starts: int = 16
    seed: int = 0

    @classmethod
    def build(cls, models, data: Dataset, ridge="auto", **kw) -> "PlantContext":
        names = data.input_names
        X = models.scaler.transform(data, columns=names)
        env = MahalanobisEnvelope(ridge=ridge, names=names).fit(X)
        return cls(models, env, data, **kw)

    @property
    def scaler(self):
        return self.models.scaler

    @property
    def input_names(self):
        return self.data.input_names


@dataclass
class ScenarioResult:
    solution: OptSolution
    consistency: ConsistencyReport
    pairwise: dict
    solutions: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {"solution": self.solution.to_dict(), "consistency": self.consistency.to_dict(),
                "pairwise_inside": self.pairwise}


def _ambient_lock(ambient):
    if ambient is None:
        return None
    if isinstance(ambient, dict):
        return dict(ambient)
    return {"AT": float(ambient)}


def pairwise_inside(envelope, x_scaled, tau, pairs=PAIRS) -> dict:
    """Whether each pair of coordinates lies inside its tau-level marginal ellipse."""
    return {f"{a}-{b}": envelope.in_marginal(x_scaled, (a, b), tau)[0] for a, b in pairs}


def setpoint_optimize(ctx: PlantContext, power, ambient=None, mode=Mode.MAD_OPT, tau=DEFAULT_TAU,
                      seed=None, bounds=None) -> ScenarioResult:
    """Multi-start solve at one power setpoint with a consistency report attached.

    ``ambient`` is an ambient temperature in deg C or a mapping of ambient
    variable to value; those variables are locked to a narrow band.
    """
    mode = Mode(mode)
    spec = build_problem(ctx.models, power, bounds=bounds, mode=mode,
                         tau=tau if mode is Mode.MAD_OPT else None,
                         ambient_lock=_ambient_lock(ambient), envelope=ctx.envelope,
                         names=ctx.input_names)
    best, sols = multi_start(spec, ctx.n_starts, ctx.seed if seed is None else seed, ctx.settings)
    rep_tau = tau if mode is Mode.MAD_OPT else (tau or DEFAULT_TAU)
    cons = check_domain_consistency(best, ctx.envelope, ctx.data, tau=rep_tau)
    if not best.feasible:
        cons.flags.append("infeasible")
    return ScenarioResult(best, cons, pairwise_inside(ctx.envelope, best.x_scaled, rep_tau), sols)


def min_feasible_tau(ctx: PlantContext, power, ambient=None, bounds=None, n_starts=4, seed=None,
                     return_solution=False):
    """Smallest tau for which the setpoint is reachable inside the envelope.

    ``inf`` means the setpoint cannot be met anywhere in the bounds.
    """
    spec = build_problem(ctx.models, power, bounds=bounds, mode=Mode.MAD_OPT, tau=1.0,
                         ambient_lock=_ambient_lock(ambient), envelope=ctx.envelope,
                         names=ctx.input_names)
    tau, sol = min_envelope_distance(spec, n_starts, ctx.seed if seed is None else seed, ctx.settings)
    return (tau, sol) if return_solution else tau


@dataclass
class TauTuning:
    tau: float | None
    table: list

    @property
    def found(self) -> bool:
        return self.tau is not None

    def to_dict(self):
        return {"tau": self.tau, "table": self.table}


def tune_tau(ctx: PlantContext, setpoint, grid, ambient=None, bounds=None, pairs=PAIRS) -> TauTuning:
    """First tau in ``grid`` with a feasible solution whose pairwise mappings stay in-ellipse.

    ``tau`` is None in the result when no grid value works.
    """
    grid = [float(t) for t in grid]
    if not grid:
        raise ValueError("tau grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("tau grid must be strictly increasing")
    table = []
    for tau in grid:
        res = setpoint_optimize(ctx, setpoint, ambient, Mode.MAD_OPT, tau, bounds=bounds)
        pw = pairwise_inside(ctx.envelope, res.solution.x_scaled, tau, pairs)
        ok = res.solution.feasible and all(pw.values())
        table.append({"tau": tau, "feasible": res.solution.feasible, "pairwise_inside": all(pw.values()),
                      "d_m": res.solution.d_m, "objective": res.solution.objective})
        if ok:
            return TauTuning(tau, table)
    return TauTuning(None, table)


def trend_violations(values, increasing=True, tol=TREND_TOL) -> int:
    """Number of consecutive steps that move against the expected direction."""
    d = np.diff(np.asarray(values, dtype=float))
    return int(np.sum(d < -tol) if increasing else np.sum(d > tol))


# -- ramp sweeps -------------------------------------------------------------

@dataclass
class RampSpec:
    """Setpoint grid, ambient cases and the envelope policy of a ramp sweep.

    With ``tau_policy="adaptive"`` each setpoint uses
    ``max(tau, tau_min + tau_margin)``, where ``tau_min`` is the smallest
    envelope distance that reaches the setpoint; ``"fixed"`` always uses ``tau``.
    """

    start: float = 185.0
    end: float = 395.0
    step: float = 15.0
    ambient_cases: tuple = (22.0, 26.0, 34.0)
    mode: Mode = Mode.MAD_OPT
    tau: float = DEFAULT_TAU
    tau_policy: str = "adaptive"
    tau_margin: float = 0.1

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.ambient_cases = tuple(float(a) for a in self.ambient_cases)
        if not self.step > 0:
            raise ValueError("step must be positive")
        if not self.start < self.end:
            raise ValueError("start must be below end")
        if self.tau_policy not in ("adaptive", "fixed"):
            raise ValueError("tau_policy must be 'adaptive' or 'fixed'")
        if not self.ambient_cases:
            raise ValueError("at least one ambient case is required")

    @property
    def setpoints(self):
        n = int(math.floor((self.end - self.start) / self.step + 1e-9)) + 1
        return [self.start + i * self.step for i in range(n)]

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["mode"] = self.mode.value
        d["ambient_cases"] = list(self.ambient_cases)
        return d


SERIES_FIELDS = ("case", "setpoint", "tau", "feasible", "converged", "d_m", "Power", "TE", "THR",
                 "GFFR", "CDP", "CDT", "flags")


@dataclass
class SweepReport:
    spec: RampSpec
    rows: list
    anomalies: dict

    def series(self, case, key):
        return [r[key] for r in self.rows if r["case"] == case]

    def write(self, outdir) -> list[Path]:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for case in self.spec.ambient_cases:
            p = out / f"ramp_{self.spec.mode.value}_AT{case:g}.csv"
            with open(p, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(SERIES_FIELDS)
                for r in self.rows:
                    if r["case"] == case:
                        w.writerow([_cell(r[k]) for k in SERIES_FIELDS])
            written.append(p)
        p = out / f"ramp_{self.spec.mode.value}_summary.json"
        p.write_text(json.dumps({"spec": self.spec.to_dict(), "anomalies": self.anomalies},
                                indent=1, sort_keys=True) + "\n")
        written.append(p)
        return written


def _cell(v):
    if isinstance(v, (list, tuple)):
        return ";".join(v)
    if isinstance(v, float):
        return repr(v)
    return v


def ramp_sweep(ctx: PlantContext, spec: RampSpec) -> SweepReport:
    """Independent steady-state solves over the setpoint grid for every ambient case.

    Failures at one setpoint are recorded in its row and the sweep continues.
    Trend counts use the feasible rows only.
    """
    rows = []
    gffr_i = ctx.input_names.index("GFFR")
    for case in spec.ambient_cases:
        for sp in spec.setpoints:
            tau = spec.tau if spec.mode is Mode.MAD_OPT else None
            row = {"case": case, "setpoint": float(sp)}
            sol = None
            try:
                if spec.mode is Mode.MAD_OPT and spec.tau_policy == "adaptive":
                    tau_min, nearest = min_feasible_tau(ctx, sp, case, return_solution=True)
                    if math.isinf(tau_min):
                        # Out of reach within the bounds; report the closest iterate.
                        sol, flags = nearest, ["setpoint_unreachable", "infeasible"]
                    else:
                        tau = max(spec.tau, tau_min + spec.tau_margin)
                if sol is None:
                    res = setpoint_optimize(ctx, sp, case, spec.mode, tau)
                    sol, flags = res.solution, list(res.consistency.flags)
            except Exception as exc:  # recorded, the sweep goes on
                row.update({"tau": tau, "feasible": False, "converged": False, "d_m": math.nan,
                            "Power": math.nan, "TE": math.nan, "THR": math.nan, "GFFR": math.nan,
                            "CDP": math.nan, "CDT": math.nan,
                            "flags": [f"error:{type(exc).__name__}"]})
                rows.append(row)
                continue
            if spec.mode is Mode.UNCONSTRAINED and sol.x_scaled[gffr_i] <= PINNED_TOL:
                flags.append("GFFR_pinned_low")
            x = dict(zip(ctx.input_names, sol.x))
            row.update({"tau": tau, "feasible": sol.feasible, "converged": sol.converged,
                        "d_m": sol.d_m, "Power": sol.predictions["Power"],
                        "TE": sol.predictions["TE"], "THR": sol.predictions["THR"],
                        "GFFR": x["GFFR"], "CDP": x["CDP"], "CDT": x["CDT"], "flags": flags})
            rows.append(row)
    anomalies = {}
    for case in spec.ambient_cases:
        case_rows = [r for r in rows if r["case"] == case]
        te = [r["TE"] for r in case_rows if r["feasible"]]
        thr = [r["THR"] for r in case_rows if r["feasible"]]
        anomalies[f"AT{case:g}"] = {
            "TE_trend_violations": trend_violations(te, True),
            "THR_trend_violations": trend_violations(thr, False),
            "infeasible_setpoints": [r["setpoint"] for r in case_rows if not r["feasible"]],
            "flagged_setpoints": [r["setpoint"] for r in case_rows if r["flags"]],
            "GFFR_pinned_low": sum("GFFR_pinned_low" in r["flags"] for r in case_rows),
        }
    return SweepReport(spec, rows, anomalies)


# -- extrapolation -------------------------------------------------------------

@dataclass
class ExtrapolationSpec:
    """Beyond-range setpoints for models trained below ``threshold`` MW.

    Process variables may range up to ``upper_bound`` in scaled units.
    Ambient variables are locked near their training means, perturbed by
    ``ambient_perturbation`` standard deviations with the scenario seed.
    """

    threshold: float = 380.0
    setpoints: tuple = (385.0, 390.0, 395.0)
    upper_bound: float = 1.8
    tau_schedule: dict = field(default_factory=lambda: {385.0: 0.4, 390.0: 0.45, 395.0: 0.6})
    tau_grid: tuple = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    ambient_perturbation: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.setpoints = tuple(float(s) for s in self.setpoints)
        self.tau_schedule = {float(k): float(v) for k, v in self.tau_schedule.items()}
        if any(s < self.threshold for s in self.setpoints):
            raise ValueError("extrapolation setpoints must not be below the training threshold")
        if self.upper_bound < 1:
            raise ValueError("upper_bound must be at least 1")
        missing = [s for s in self.setpoints if s not in self.tau_schedule]
        if missing:
            raise ValueError(f"no tau scheduled for setpoints {missing}")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["setpoints"] = list(self.setpoints)
        d["tau_schedule"] = {repr(k): v for k, v in self.tau_schedule.items()}
        d["tau_grid"] = list(self.tau_grid)
        return d


@dataclass
class ExtrapolationReport:
    spec: ExtrapolationSpec
    ambient: dict
    subspace_max: dict
    results: dict
    suggestions: dict

    def rows(self):
        out = []
        for sp, res in self.results.items():
            sol = res.solution
            x = dict(zip(sol.names, sol.x))
            out.append({"setpoint": sp, "mode": sol.mode.value, "tau": sol.tau, "feasible": sol.feasible,
                        "d_m": sol.d_m, **{k: float(v) for k, v in x.items()},
                        **{k: float(v) for k, v in sol.predictions.items()},
                        "exceeds_subspace_CDP": x["CDP"] > self.subspace_max["CDP"],
                        "exceeds_subspace_GFFR": x["GFFR"] > self.subspace_max["GFFR"],
                        "suggested_tau": self.suggestions.get(sp)})
        return out

    def to_dict(self):
        return {"spec": self.spec.to_dict(), "ambient": self.ambient, "subspace_max": self.subspace_max,
                "rows": self.rows()}


def extrapolation_ambient(data: Dataset, frac, seed) -> dict:
    """Ambient means nudged by ``frac`` standard deviations, seeded."""
    rng = np.random.default_rng(seed)
    out = {}
    for name in AMBIENT_NAMES:
        col = data.column(name)
        out[name] = float(col.mean() + frac * col.std(ddof=1) * rng.uniform(-1.0, 1.0))
    return out


def extrapolate(ctx: PlantContext, spec: ExtrapolationSpec, mode=Mode.MAD_OPT, suggest=True) -> ExtrapolationReport:
    """Solve above the training range using models fitted on the subspace only.

    ``ctx`` must hold nothing above ``spec.threshold``; holdout rows are never
    seen here (use :func:`compare_to_holdout` afterwards). Infeasible
    setpoints are kept in the report and, with ``suggest``, get the first
    feasible tau from ``spec.tau_grid`` (None if none is).
    """
    mode = Mode(mode)
    pmax = float(ctx.data.column("Power").max())
    if pmax > spec.threshold:
        raise ValueError(f"context data reaches {pmax:.3f} MW, above the {spec.threshold} MW threshold")
    ambient = extrapolation_ambient(ctx.data, spec.ambient_perturbation, spec.seed)
    names = ctx.input_names
    bounds = {n: (0.0, spec.upper_bound) for n in PROCESS_NAMES if n in names}
    sub_max = {n: float(ctx.data.column(n).max()) for n in names}
    results, suggestions = {}, {}
    for sp in spec.setpoints:
        tau = spec.tau_schedule[sp] if mode is Mode.MAD_OPT else None
        res = setpoint_optimize(ctx, sp, ambient, mode, tau, seed=spec.seed, bounds=bounds)
        results[sp] = res
        if mode is Mode.MAD_OPT and not res.solution.feasible and suggest:
            grid = [t for t in spec.tau_grid if t > tau]
            suggestions[sp] = tune_tau(ctx, sp, grid, ambient, bounds).tau if grid else None
    return ExtrapolationReport(spec, ambient, sub_max, results, suggestions)


def compare_to_holdout(report: ExtrapolationReport, holdout: Dataset, window=2.0, k_fallback=5,
                       variables=("CDP", "GFFR")) -> list[dict]:
    """Absolute deviation of each solution from holdout rows near its setpoint.

    Reference rows are those within ``window`` MW of the setpoint; if there
    are none, the ``k_fallback`` rows nearest in Power are used instead.
    """
    power = holdout.column("Power")
    out = []
    for sp, res in report.results.items():
        near = np.flatnonzero(np.abs(power - sp) <= window)
        used_fallback = near.size == 0
        if used_fallback:
            near = np.argsort(np.abs(power - sp), kind="stable")[:k_fallback]
        x = dict(zip(res.solution.names, res.solution.x))
        row = {"setpoint": sp, "n_reference": int(near.size), "fallback": used_fallback}
        for v in variables:
            ref = float(holdout.column(v)[near].mean())
            row[f"{v}_reference"] = ref
            row[f"{v}_deviation"] = abs(float(x[v]) - ref)
        out.append(row)
    return out


def write_ellipses(envelope: MahalanobisEnvelope, scaler, tau, outdir, solutions=(), pairs=PAIRS,
                   prefix="ellipse", n_points=256) -> list[Path]:
    """Plot-ready ellipse polylines and solution points in engineering units."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for a, b in pairs:
        pts = envelope.ellipse_2d((a, b), tau, n_points)
        eng = np.column_stack([scaler.unscale_value(a, pts[:, 0]), scaler.unscale_value(b, pts[:, 1])])
        p = out / f"{prefix}_{a}_{b}.csv"
        write_polyline_csv(eng, p, header=(a, b))
        written.append(p)
        if solutions:
            p = out / f"{prefix}_{a}_{b}_points.csv"
            with open(p, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("label", a, b))
                for label, sol in solutions:
                    x = dict(zip(sol.names, sol.x))
                    w.writerow((label, repr(float(x[a])), repr(float(x[b]))))
            written.append(p)
    return written
