"""Command-line front end: ``madopt <command> --config run.json``.

Every command reads one JSON config, writes its reports under the config's
``output_dir`` and records a manifest in ``output_dir/manifests``. The
manifest is the only file that carries a timestamp, so two runs of the same
config produce byte-identical reports.

Exit codes: 0 success, 2 configuration or data error, 3 missing upstream
artifact, 4 solver or numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import datetime
import hashlib
import json
import math
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (INPUT_NAMES, TARGET_NAMES, Dataset, descriptive_stats, load_csv,
                      pearson_matrix, save_schema, split, subspace_filter)
from .exceptions import (ArtifactMissingError, ConfigError, DivergenceError, InfeasibleStartError,
                         MadoptError, NumericError, SolverError)
from .explain import global_importance, shapley_sampling
from .mahalanobis import MahalanobisEnvelope
from .optimizer import Mode, SolverSettings, build_problem, kkt_residuals, write_jsonl
from .robustness import MonteCarloSpec, monte_carlo
from .scenarios import (DEFAULT_TAU, ExtrapolationSpec, PlantContext, RampSpec, compare_to_holdout,
                        extrapolate, ramp_sweep, setpoint_optimize, write_ellipses)
from .surrogate import SurrogateSet, TrainConfig, coverage, evaluate, fit_surrogates
from .synthetic import synth_plant_generate

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_SOLVER = 4
SEED_KEYS = ("data", "split", "train", "solver", "mc", "shap")
VERIFY_TOL = 1e-9

DEFAULT_CONFIG = {
    "output_dir": "run",
    "data": {"csv": None, "n": 5000},
    "seeds": {"data": 7, "split": 0, "train": 0, "solver": 0, "mc": 0, "shap": 0},
    "split": {"train_fraction": 0.8, "calibration_fraction": 0.5},
    "train": {"hidden": "default", "epochs": 5000, "learning_rate": 1e-3, "l1": 1e-7,
              "weight_decay": 1e-5, "patience": 200, "batch_size": None,
              "validation_fraction": 0.1},
    "conformal_alpha": 0.05,
    "envelope": {"ridge": "auto"},
    "solver": {},
    "n_starts": 16,
    "optimize": {"setpoint": 390.0, "mode": "madopt", "tau": DEFAULT_TAU, "ambient": {"AT": 26.0}},
    "ramp": {},
    "extrapolation": {},
    "montecarlo": {"n_samples": 1000, "rounds": 50, "noise_frac": 0.01, "perturb": "process"},
    "explain": {"m": 2000, "background": 100, "rows": 200, "global_m": 100},
}


# -- configuration -----------------------------------------------------------

def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path}{k!r}")
        if isinstance(base[k], dict) and base[k] and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def load_config(path) -> dict:
    """Read a config file and fill unspecified sections with defaults.

    All seeds must be given explicitly; no randomness is left implicit.
    """
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    missing = [k for k in SEED_KEYS if k not in raw.get("seeds", {})]
    if missing:
        raise ConfigError(f"config is missing seeds {missing}")
    cfg = _merge(DEFAULT_CONFIG, raw)
    base = Path(path).resolve().parent
    cfg["output_dir"] = str((base / cfg["output_dir"]).resolve())
    if cfg["data"]["csv"]:
        cfg["data"]["csv"] = str((base / cfg["data"]["csv"]).resolve())
    try:
        _train_config(cfg)
        SolverSettings(**cfg["solver"])
        RampSpec.from_dict(cfg["ramp"])
        ExtrapolationSpec.from_dict(cfg["extrapolation"])
        MonteCarloSpec(seed=cfg["seeds"]["mc"], **cfg["montecarlo"])
        Mode(cfg["optimize"]["mode"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    return cfg


def _train_config(cfg) -> TrainConfig:
    t = {k: v for k, v in cfg["train"].items() if k != "hidden"}
    return TrainConfig(seed=cfg["seeds"]["train"], **t)


def _solver(cfg) -> SolverSettings:
    return SolverSettings(**{**cfg["solver"], "seed": cfg["seeds"]["solver"]})


# -- artifacts ---------------------------------------------------------------

def _out(cfg) -> Path:
    return Path(cfg["output_dir"])


def _require(path: Path, cmd: str) -> Path:
    if not path.exists():
        raise ArtifactMissingError(f"{path} not found; run `madopt {cmd}` first")
    return path


def _load_data(cfg) -> Dataset:
    if cfg["data"]["csv"]:
        return load_csv(_require(Path(cfg["data"]["csv"]), "gen-data"))
    return load_csv(_require(_out(cfg) / "data.csv", "gen-data"))


def _splits(cfg, data):
    s = cfg["split"]
    train, test = split(data, s["train_fraction"], cfg["seeds"]["split"])
    calib, report = split(test, s["calibration_fraction"], cfg["seeds"]["split"] + 1)
    return train, calib, report


def _load_models(cfg, sub="models") -> SurrogateSet:
    d = _out(cfg) / sub
    _require(d / "scaler.json", "train" if sub == "models" else "extrapolate")
    return SurrogateSet.load(d)


def _load_envelope(cfg) -> MahalanobisEnvelope:
    return MahalanobisEnvelope.load(_require(_out(cfg) / "envelope.json", "fit-envelope"))


def _context(cfg) -> PlantContext:
    data = _load_data(cfg)
    train, _, _ = _splits(cfg, data)
    return PlantContext(_load_models(cfg), _load_envelope(cfg), train, _solver(cfg),
                        cfg["n_starts"], cfg["seeds"]["solver"])


def _dump(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Mode):
        return o.value
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(cfg, command, artifacts, argv):
    out = _out(cfg)
    versions = {"python": platform.python_version(), "madopt": __version__}
    for mod in ("numpy", "scipy", "sklearn"):
        versions[mod] = sys.modules[mod].__version__ if mod in sys.modules else None
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": cfg,
        "seeds": cfg["seeds"],
        "versions": versions,
        "artifacts": {str(Path(p).relative_to(out)): _sha256(Path(p)) for p in sorted(map(str, artifacts))},
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    _dump(out / "manifests" / f"{command}.json", manifest)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


# -- commands ----------------------------------------------------------------

def cmd_gen_data(cfg, args):
    out = _out(cfg)
    out.mkdir(parents=True, exist_ok=True)
    data = synth_plant_generate(n=cfg["data"]["n"], seed=cfg["seeds"]["data"])
    data.to_csv(out / "data.csv")
    save_schema(data.schema, out / "schema.json")
    p = _dump(out / "data_provenance.json", data.provenance)
    return [out / "data.csv", out / "schema.json", p]


def cmd_stats(cfg, args):
    data = _load_data(cfg)
    corr = pearson_matrix(data)
    p1 = _dump(_out(cfg) / "stats.json", {"descriptive": descriptive_stats(data), "n_rows": len(data)})
    p2 = _write_csv(_out(cfg) / "correlation.csv", ("variable",) + corr.names,
                    [(a,) + tuple(corr.values[i]) for i, a in enumerate(corr.names)])
    return [p1, p2]


def _metrics(models: SurrogateSet, report: Dataset) -> dict:
    out = {}
    for t, m in models.models.items():
        met = evaluate(m, report)
        out[t] = {"r2": met.r2, "rmse": met.rmse, "hidden": m.mlp.hidden,
                  "coverage": coverage(m, models.conformal[t], report) if t in models.conformal else None}
    return out


def cmd_train(cfg, args):
    data = _load_data(cfg)
    train, calib, report = _splits(cfg, data)
    models = fit_surrogates(train, _train_config(cfg), cfg["train"]["hidden"], calib,
                            cfg["conformal_alpha"])
    written = models.save(_out(cfg) / "models")
    written.append(_dump(_out(cfg) / "metrics.json", {"test": _metrics(models, report),
                                                      "n_train": len(train), "n_calibration": len(calib),
                                                      "n_test": len(report)}))
    return written


def cmd_fit_envelope(cfg, args):
    data = _load_data(cfg)
    train, _, _ = _splits(cfg, data)
    models = _load_models(cfg)
    X = models.scaler.transform(train, columns=train.input_names)
    env = MahalanobisEnvelope(ridge=cfg["envelope"]["ridge"], names=train.input_names).fit(X)
    p = _out(cfg) / "envelope.json"
    env.save(p)
    return [p]


def _solution_stem(mode, setpoint):
    return f"{Mode(mode).value}_{float(setpoint):g}MW"


def cmd_optimize(cfg, args):
    ctx = _context(cfg)
    o = cfg["optimize"]
    setpoint = o["setpoint"] if args.setpoint is None else args.setpoint
    mode = Mode(o["mode"] if args.mode is None else args.mode)
    tau = o["tau"] if args.tau is None else args.tau
    res = setpoint_optimize(ctx, setpoint, o["ambient"], mode, tau)
    d = _out(cfg) / "optimize"
    stem = _solution_stem(mode, setpoint)
    p1 = _dump(d / f"solution_{stem}.json", res.to_dict())
    p2 = d / f"starts_{stem}.jsonl"
    write_jsonl(res.solutions, p2)
    ell = write_ellipses(ctx.envelope, ctx.scaler, tau, d, [(stem, res.solution)],
                         prefix=f"ellipse_{stem}")
    written = [p1, p2, *ell]
    if not res.solution.feasible:
        exc = SolverError(f"no feasible solution at {setpoint} MW (mode {mode.value}, tau={tau}); "
                          f"best iterate in {p1.name}", point=res.solution.x_scaled)
        exc.artifacts = written
        raise exc
    return written


def cmd_ramp(cfg, args):
    ctx = _context(cfg)
    spec = RampSpec.from_dict(cfg["ramp"])
    rep = ramp_sweep(ctx, spec)
    return rep.write(_out(cfg) / "ramp")


def cmd_extrapolate(cfg, args):
    data = _load_data(cfg)
    spec = ExtrapolationSpec.from_dict(cfg["extrapolation"])
    sub, holdout = subspace_filter(data, spec.threshold)
    if sub is None or holdout is None:
        raise ConfigError(f"threshold {spec.threshold} MW leaves an empty subspace or holdout")
    d = _out(cfg) / "extrapolate"
    models_dir = d / "models"
    models = fit_surrogates(sub, _train_config(cfg), cfg["train"]["hidden"])
    written = models.save(models_dir)
    ctx = PlantContext.build(models, sub, ridge=cfg["envelope"]["ridge"], settings=_solver(cfg),
                             n_starts=cfg["n_starts"], seed=cfg["seeds"]["solver"])
    reports = {m: extrapolate(ctx, spec, m) for m in (Mode.MAD_OPT, Mode.UNCONSTRAINED)}
    comparison = {m.value: compare_to_holdout(r, holdout) for m, r in reports.items()}
    summary = {m.value: r.to_dict() for m, r in reports.items()}
    written.append(_dump(d / "report.json", {"reports": summary, "comparison": comparison}))
    rows = []
    for m, comp in comparison.items():
        for r in comp:
            rows.append((m, r["setpoint"], r["n_reference"], r["CDP_deviation"], r["GFFR_deviation"]))
    written.append(_write_csv(d / "comparison.csv",
                              ("mode", "setpoint", "n_reference", "CDP_deviation", "GFFR_deviation"), rows))
    mad = reports[Mode.MAD_OPT]
    for sp, res in mad.results.items():
        written += write_ellipses(ctx.envelope, ctx.scaler, spec.tau_schedule[sp], d,
                                  [("madopt", res.solution),
                                   ("unconstrained", reports[Mode.UNCONSTRAINED].results[sp].solution)],
                                  prefix=f"ellipse_{sp:g}MW")
    return written


def _stds(cfg):
    data = _load_data(cfg)
    train, _, _ = _splits(cfg, data)
    st = descriptive_stats(train)
    return [st[n]["std"] for n in INPUT_NAMES], train


def _optimum(cfg, args):
    o = cfg["optimize"]
    stem = _solution_stem(o["mode"], o["setpoint"])
    path = Path(args.solution) if getattr(args, "solution", None) else _out(cfg) / "optimize" / f"solution_{stem}.json"
    sol = json.loads(_require(path, "optimize").read_text())["solution"]
    return np.array([sol["x"][n] for n in INPUT_NAMES])


def cmd_montecarlo(cfg, args):
    models = _load_models(cfg)
    x_star = _optimum(cfg, args)
    stds, _ = _stds(cfg)
    spec = MonteCarloSpec(seed=cfg["seeds"]["mc"], **cfg["montecarlo"])
    if args.noise is not None:
        spec.noise_frac = args.noise
    rep = monte_carlo(models, x_star, spec, stds)
    return rep.write(_out(cfg) / "montecarlo", stem=f"montecarlo_{spec.noise_frac:g}")


def cmd_explain(cfg, args):
    models = _load_models(cfg)
    _, train = _stds(cfg)
    e = cfg["explain"]
    seed = cfg["seeds"]["shap"]
    d = _out(cfg) / "explain"
    written = []
    rng = np.random.default_rng(seed)
    background = train.inputs[np.sort(rng.choice(len(train), size=min(e["background"], len(train)),
                                                 replace=False))]
    try:
        x = _optimum(cfg, args)
        query = "optimum"
    except ArtifactMissingError:
        x = train.inputs.mean(axis=0)
        query = "data_mean"
    for t in TARGET_NAMES:
        model = models[t]
        imp = global_importance(model, train, background, e["global_m"], seed, e["rows"])
        written.append(imp.write_csv(_ensure(d) / f"importance_{t}.csv"))
        sh = shapley_sampling(model, background, x, e["m"], seed, INPUT_NAMES)
        span = models.scaler.data_range_[models.scaler.columns_.index(t)]
        written.append(_dump(d / f"shapley_{t}.json", {
            "query": query, "x": dict(zip(INPUT_NAMES, map(float, x))),
            "attribution": sh.as_dict(),
            "attribution_scaled": {n: float(v / span) for n, v in sh.as_dict().items()},
            "standard_error": dict(zip(INPUT_NAMES, map(float, sh.se))),
            "base": sh.base, "prediction": sh.fx, "permutations": sh.n_permutations,
            "exact": sh.exact, "seed": seed}))
    return written


def _ensure(d: Path) -> Path:
    d.mkdir(parents=True, exist_ok=True)
    return d


# -- verify ------------------------------------------------------------------

class VerifyFailure(MadoptError):
    pass


def _close(a, b, what, problems):
    if a is None or b is None:
        if a is not b:
            problems.append(f"{what}: {a!r} != {b!r}")
        return
    if not math.isclose(float(a), float(b), rel_tol=VERIFY_TOL, abs_tol=VERIFY_TOL):
        problems.append(f"{what}: stored {b!r}, recomputed {a!r}")


def verify_run(run_dir) -> list[str]:
    """Recheck stored artifacts; returns a list of problems (empty when clean)."""
    run = Path(run_dir)
    manifests = sorted((run / "manifests").glob("*.json"))
    if not manifests:
        raise ArtifactMissingError(f"no manifests in {run}; nothing to verify")
    problems = []
    cfg = None
    for mp in manifests:
        man = json.loads(mp.read_text())
        cfg = cfg or man["config"]
        for rel, digest in man["artifacts"].items():
            p = run / rel
            if not p.exists():
                problems.append(f"{rel}: missing")
            elif _sha256(p) != digest:
                problems.append(f"{rel}: hash differs from {mp.name}")
    cfg = dict(cfg, output_dir=str(run))
    if (run / "metrics.json").exists():
        data = _load_data(cfg)
        _, _, report = _splits(cfg, data)
        stored = json.loads((run / "metrics.json").read_text())["test"]
        fresh = _metrics(_load_models(cfg), report)
        for t, m in stored.items():
            for k in ("r2", "rmse", "coverage"):
                _close(fresh[t][k], m[k], f"metrics {t}.{k}", problems)
    for p in sorted((run / "optimize").glob("solution_*.json")) if (run / "optimize").exists() else []:
        problems += _verify_solution(cfg, json.loads(p.read_text()), p.name)
    return problems


def _verify_solution(cfg, payload, label) -> list[str]:
    problems = []
    sol = payload["solution"]
    models = _load_models(cfg)
    env = _load_envelope(cfg)
    xs = np.array([sol["x_scaled"][n] for n in INPUT_NAMES])
    if sol["d_m"] is not None:
        _close(env.distance(xs), sol["d_m"], f"{label} d_M", problems)
    for t in TARGET_NAMES:
        _close(models[t].predict_scaled(xs[None, :])[0], sol["predictions_scaled"][t],
               f"{label} {t} prediction", problems)
    mode = Mode(sol["mode"])
    spec = build_problem(models, sol["setpoint_mw"], mode=mode, tau=sol["tau"], envelope=env,
                         ambient_lock=cfg["optimize"]["ambient"])
    kkt = kkt_residuals(spec, xs, sol["multipliers"])
    _close(kkt["feasibility"]["setpoint"], sol["residuals"]["feasibility"]["setpoint"],
           f"{label} setpoint residual", problems)
    _close(kkt["stationarity"], sol["residuals"]["stationarity"], f"{label} stationarity", problems)
    if sol["feasible"]:
        if kkt["feasibility"]["setpoint_band"] > 0:
            problems.append(f"{label}: setpoint band violated")
        if mode is Mode.MAD_OPT and sol["d_m"] > sol["tau"] + 1e-6:
            problems.append(f"{label}: d_M exceeds tau")
        if kkt["feasibility"]["bounds"] > 1e-9:
            problems.append(f"{label}: bounds violated")
    return problems


# -- entry point -------------------------------------------------------------

COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic plant dataset"),
    "stats": (cmd_stats, "descriptive statistics and correlation matrix"),
    "train": (cmd_train, "train Power/TE/THR surrogates and conformal calibration"),
    "fit-envelope": (cmd_fit_envelope, "fit the Mahalanobis envelope on scaled training inputs"),
    "optimize": (cmd_optimize, "solve at one power setpoint"),
    "ramp": (cmd_ramp, "ramp sweep over setpoints and ambient cases"),
    "extrapolate": (cmd_extrapolate, "optimise above the training range"),
    "montecarlo": (cmd_montecarlo, "Monte Carlo robustness around the optimum"),
    "explain": (cmd_explain, "Shapley attributions and global importance"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="madopt", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="run configuration (JSON)")
        if name == "optimize":
            p.add_argument("--setpoint", type=float, help="power setpoint in MW")
            p.add_argument("--mode", choices=[m.value for m in Mode])
            p.add_argument("--tau", type=float)
        if name in ("montecarlo", "explain"):
            p.add_argument("--solution", help="solution JSON to use as the operating point")
        if name == "montecarlo":
            p.add_argument("--noise", type=float, help="override the noise fraction")
    p = sub.add_parser("verify", help="recheck invariants and hashes of a run directory")
    p.add_argument("--run", required=True, help="run output directory")
    return ap


def _fail(code, exc) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            problems = verify_run(args.run)
            if problems:
                return _fail(1, VerifyFailure("; ".join(problems)))
            print(json.dumps({"verified": str(args.run)}))
            return 0
        cfg = load_config(args.config)
        func = COMMANDS[args.command][0]
        try:
            artifacts = func(cfg, args)
        except MadoptError as exc:
            if getattr(exc, "artifacts", None):
                _write_manifest(cfg, args.command, exc.artifacts, argv)
            raise
        _write_manifest(cfg, args.command, artifacts, argv)
        print(json.dumps({"command": args.command, "artifacts": len(artifacts)}))
        return 0
    except ArtifactMissingError as exc:
        return _fail(EXIT_MISSING, exc)
    except (SolverError, InfeasibleStartError, NumericError, DivergenceError, FloatingPointError) as exc:
        return _fail(EXIT_SOLVER, exc)
    except (ConfigError, ValueError, KeyError, MadoptError) as exc:
        return _fail(EXIT_CONFIG, exc)


if __name__ == "__main__":
    sys.exit(main())
