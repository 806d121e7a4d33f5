"""Acceptance criteria, one test per criterion at the stated tolerances and time budgets."""

import filecmp
import math
import time

import numpy as np
import pytest
from scipy import stats

from madopt.cli import verify_run
from madopt.dataset import INPUT_NAMES, TARGET_NAMES
from madopt.explain import shapley_sampling
from madopt.mahalanobis import MahalanobisEnvelope
from madopt.optimizer import FunctionModel, Mode, build_problem, multi_start, solve
from madopt.robustness import MonteCarloSpec, monte_carlo
from madopt.scenarios import (ExtrapolationSpec, PlantContext, RampSpec, compare_to_holdout, extrapolate,
                              extrapolation_ambient, min_feasible_tau, ramp_sweep, setpoint_optimize)
from madopt.surrogate import coverage, evaluate

from conftest import run_pipeline

HIGH_SETPOINT = 390.0


def _rel_err(g, fd):
    return np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)


def _tuned_tau(ctx, setpoint, ambient, seed=0):
    return max(0.9, min_feasible_tau(ctx, setpoint, ambient, seed=seed) + 0.1)


# 1 -------------------------------------------------------------------------
def test_c01_surrogate_fidelity(surrogates, plant_splits, record_criterion):
    _, _, report = plant_splits
    parts, ok = [], surrogates.elapsed < 300
    for t in TARGET_NAMES:
        r2 = evaluate(surrogates[t], report).r2
        cov = coverage(surrogates[t], surrogates.conformal[t], report)
        ok &= r2 >= 0.95 and cov >= 0.93
        parts.append(f"{t}: R2={r2:.4f} cov={cov:.3f}")
    detail = "; ".join(parts) + f"; train+gen {surrogates.elapsed:.0f}s (limit 300s)"
    assert record_criterion(1, ok, detail), detail


# 2 -------------------------------------------------------------------------
def test_c02_gradients(surrogates, ctx, record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    h = 1e-6
    eye = np.eye(len(INPUT_NAMES))
    shares = {}
    for t in TARGET_NAMES:
        m = surrogates[t]
        good = 0
        for _ in range(100):
            x = rng.uniform(0, 1, len(INPUT_NAMES))
            fd = np.array([(m.forward(x + h * e) - m.forward(x - h * e)) / (2 * h) for e in eye])
            good += _rel_err(m.grad_input(x), fd) <= 1e-4
        shares[t] = good / 100
    env = ctx.envelope
    good = 0
    for _ in range(100):
        x = env.mean_ + rng.normal(scale=0.2, size=len(INPUT_NAMES))
        fd = np.array([(env.sq_distance(x + h * e) - env.sq_distance(x - h * e)) / (2 * h) for e in eye])
        good += _rel_err(env.distance_grad(x), fd) <= 1e-4
    shares["ellipsoid"] = good / 100
    elapsed = time.perf_counter() - t0
    ok = all(s >= 0.95 for s in shares.values()) and elapsed < 10
    detail = ", ".join(f"{k} {v:.0%}" for k, v in shares.items()) + f" within 1e-4; {elapsed:.1f}s"
    assert record_criterion(2, ok, detail), detail


# 3 -------------------------------------------------------------------------
def test_c03_mahalanobis(record_criterion):
    rng = np.random.default_rng(3)
    A = rng.normal(size=(9, 9))
    X = rng.normal(size=(5000, 9)) @ A.T + rng.normal(size=9)
    env = MahalanobisEnvelope(ridge=0.0).fit(X)
    d_mu = env.distance(env.mean_)
    ks = stats.kstest(env.sq_distance(X), stats.chi2(9).cdf).statistic
    M = rng.normal(size=(9, 9)) + 3 * np.eye(9)
    b = rng.normal(size=9)
    env2 = MahalanobisEnvelope(ridge=0.0).fit(X @ M.T + b)
    Q = rng.normal(size=(50, 9)) @ A.T
    aff = float(np.max(np.abs(env.distance(Q) - env2.distance(Q @ M.T + b))))
    hand = MahalanobisEnvelope.from_moments([0.0, 0.0], [[1.0, 0.8], [0.8, 1.0]], ridge=0.0)
    hand_err = abs(hand.distance([1.0, 1.0]) - math.sqrt(2 / 1.8))
    ok = d_mu == 0.0 and ks < 0.05 and aff <= 1e-8 and hand_err <= 1e-10
    detail = f"d(mu)={d_mu}, KS={ks:.4f}, affine gap={aff:.1e}, hand-case err={hand_err:.1e}"
    assert record_criterion(3, ok, detail), detail


# 4 -------------------------------------------------------------------------
def test_c04_optimizer_soundness(record_criterion):
    t0 = time.perf_counter()
    c = np.array([0.6, 2.0])
    zero = FunctionModel(lambda x: 0.0, lambda x: np.zeros(2))
    stub = {"THR": FunctionModel(lambda x: 0.5 * np.sum((x - c) ** 2), lambda x: x - c), "TE": zero,
            "Power": FunctionModel(lambda x: x[0], lambda x: np.array([1.0, 0.0]))}
    env = MahalanobisEnvelope.from_moments([0.0, 0.0], np.eye(2), ridge=0.0)
    spec = build_problem(stub, 0.6, epsilon=1e-12, bounds=([-5, -5], [5, 5]), tau=1.0, envelope=env,
                         names=("a", "b"))
    sol = solve(spec, np.zeros(2))
    # Closed form: x* = (0.6, 0.8), setpoint multiplier -0.9, envelope multiplier 0.75.
    kkt_err = max(np.max(np.abs(sol.x_scaled - [0.6, 0.8])),
                  abs(sol.multipliers["setpoint"] + 0.9), abs(sol.multipliers["envelope"] - 0.75))

    f = lambda x: (x[0] ** 2 - 1) ** 2 + 0.3 * x[0] + (x[1] - 0.5) ** 2  # noqa: E731
    g = lambda x: np.array([4 * x[0] ** 3 - 4 * x[0] + 0.3, 2 * (x[1] - 0.5)])  # noqa: E731
    two = build_problem({"THR": FunctionModel(f, g), "TE": zero, "Power": zero}, 0.0, epsilon=1e-8,
                        bounds=([-2, -2], [2, 2]), mode="unconstrained", names=("a", "b"))
    best, _ = multi_start(two, 20, seed=0)
    # Grid scan: coarse over the box, then a fine grid around the coarse winner.
    u = np.linspace(-2, 2, 401)
    G0, G1 = np.meshgrid(u, u, indexing="ij")
    F = f((G0, G1))
    i, j = np.unravel_index(np.argmin(F), F.shape)
    v0 = np.linspace(u[i] - 0.01, u[i] + 0.01, 20001)
    v1 = np.linspace(u[j] - 0.01, u[j] + 0.01, 20001)
    x_grid = np.array([v0[np.argmin(f((v0, 0.5)))], v1[np.argmin(f((v0[0], v1)))]])
    ms_err = float(np.max(np.abs(best.x_scaled - x_grid)))
    elapsed = time.perf_counter() - t0
    ok = kkt_err <= 1e-6 and ms_err <= 1e-4 and elapsed < 30
    detail = f"KKT stub err={kkt_err:.1e}; two-minima x={best.x_scaled.round(6).tolist()} vs grid " \
             f"{x_grid.round(6).tolist()} (err {ms_err:.1e}); {elapsed:.1f}s"
    assert record_criterion(4, ok, detail), detail


# 5 -------------------------------------------------------------------------
def test_c05_domain_consistency_contrast(ctx, record_criterion):
    t0 = time.perf_counter()
    mad_ok, unc_flagged, notes = 0, 0, []
    for k in range(10):
        at = 26.0 + np.random.default_rng(k).uniform(-1.0, 1.0)
        tau = _tuned_tau(ctx, HIGH_SETPOINT, at, seed=k)
        mad = setpoint_optimize(ctx, HIGH_SETPOINT, at, Mode.MAD_OPT, tau, seed=k)
        unc = setpoint_optimize(ctx, HIGH_SETPOINT, at, Mode.UNCONSTRAINED, tau, seed=k)
        s = mad.solution
        mad_ok += bool(not mad.consistency.flags and s.feasible and s.d_m <= tau + 1e-6)
        unc_flagged += bool(unc.consistency.flags)
        notes.append(f"tau={tau:.2f} dM={s.d_m:.2f}/{unc.solution.d_m:.2f}")
    elapsed = time.perf_counter() - t0
    ok = mad_ok == 10 and unc_flagged >= 8 and elapsed < 300
    detail = f"{HIGH_SETPOINT:g} MW: MAD_OPT clean {mad_ok}/10, UNCONSTRAINED flagged {unc_flagged}/10; " \
             f"{elapsed:.0f}s [{'; '.join(notes[:3])}; ...]"
    assert record_criterion(5, ok, detail), detail


# 6 -------------------------------------------------------------------------
def test_c06_ramp_sweep(ctx, record_criterion):
    t0 = time.perf_counter()
    rep = ramp_sweep(ctx, RampSpec())
    elapsed = time.perf_counter() - t0
    solved = sum(not any(f.startswith("error:") for f in r["flags"]) for r in rep.rows)
    worst = max(max(a["TE_trend_violations"], a["THR_trend_violations"]) for a in rep.anomalies.values())
    infeasible = {k: a["infeasible_setpoints"] for k, a in rep.anomalies.items() if a["infeasible_setpoints"]}
    ok = len(rep.rows) == 45 and solved == 45 and worst <= 1 and elapsed < 600
    detail = f"{solved}/45 solves completed; max trend violations per case {worst}; " \
             f"infeasible (unreachable) {infeasible or 'none'}; {elapsed:.0f}s"
    assert record_criterion(6, ok, detail), detail


# 7 -------------------------------------------------------------------------
def test_c07_extrapolation(subspace_models, record_criterion):
    t0 = time.perf_counter()
    models, sub, holdout = subspace_models
    sctx = PlantContext.build(models, sub)
    spec = ExtrapolationSpec()
    mad = extrapolate(sctx, spec, Mode.MAD_OPT, suggest=False)
    unc = extrapolate(sctx, spec, Mode.UNCONSTRAINED)
    dev_m, dev_u = compare_to_holdout(mad, holdout), compare_to_holdout(unc, holdout)
    rows = mad.rows()
    feasible = all(r["feasible"] for r in rows)
    exceeds = all(r["exceeds_subspace_CDP"] and r["exceeds_subspace_GFFR"] for r in rows)
    closer = all(a[f"{v}_deviation"] < b[f"{v}_deviation"] for a, b in zip(dev_m, dev_u) for v in ("CDP", "GFFR"))
    amb = extrapolation_ambient(sub, spec.ambient_perturbation, spec.seed)
    bounds = {n: (0.0, spec.upper_bound) for n in ("CDP", "GFFR", "FGT", "PHGOT", "CDT", "FGEXT")}
    need = {sp: min_feasible_tau(sctx, sp, amb, bounds) for sp in spec.setpoints}
    elapsed = time.perf_counter() - t0
    ok = feasible and exceeds and closer and elapsed < 300
    detail = (f"tau schedule {list(spec.tau_schedule.values())}: feasible={feasible}, exceeds maxima={exceeds}, "
              f"closer than UNCONSTRAINED={closer}; smallest feasible tau "
              + ", ".join(f"{sp:g}:{t:.2f}" for sp, t in need.items()) + f"; {elapsed:.0f}s")
    assert record_criterion(7, ok, detail), detail


# 8 -------------------------------------------------------------------------
def test_c08_monte_carlo(ctx, surrogates, plant_splits, record_criterion):
    train = plant_splits[0]
    tau = _tuned_tau(ctx, HIGH_SETPOINT, 26.0)
    sol = setpoint_optimize(ctx, HIGH_SETPOINT, 26.0, Mode.MAD_OPT, tau).solution
    assert sol.converged and sol.feasible
    stds = train.columns(INPUT_NAMES).std(axis=0, ddof=1)
    t0 = time.perf_counter()
    base = monte_carlo(surrogates, sol.x, MonteCarloSpec(n_samples=1000, rounds=50, noise_frac=0.01), stds)
    elapsed = time.perf_counter() - t0
    big = monte_carlo(surrogates, sol.x, MonteCarloSpec(n_samples=1000, rounds=50, noise_frac=0.012), stds)
    s0, s1 = base.summary(), big.summary()
    within = min(s0[t]["rounds_mean_within_half_width"] for t in TARGET_NAMES)
    ratio = max(s0[t]["width_ratio"] for t in TARGET_NAMES)
    wider = all(s1[t]["mean_width"] > s0[t]["mean_width"] for t in TARGET_NAMES)
    ok = elapsed < 120 and within >= 45 and ratio < 1.5 and wider
    detail = f"{elapsed:.2f}s; min rounds within half-width {within}/50; max width ratio {ratio:.3f}; " \
             f"1.2% wider than 1% for all targets={wider}"
    assert record_criterion(8, ok, detail), detail


# 9 -------------------------------------------------------------------------
def _brute_force(f, B, x):
    from itertools import combinations
    p = len(x)

    def v(S):
        Z = B.copy()
        Z[:, list(S)] = x[list(S)]
        return f(Z).mean()

    phi = np.zeros(p)
    for j in range(p):
        rest = [k for k in range(p) if k != j]
        for r in range(p):
            for S in combinations(rest, r):
                w = math.factorial(r) * math.factorial(p - r - 1) / math.factorial(p)
                phi[j] += w * (v(S + (j,)) - v(S))
    return phi


def test_c09_shapley(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    a = rng.normal(size=9)
    B, x = rng.normal(size=(100, 9)), rng.normal(size=9)
    add = shapley_sampling(lambda X: X @ a, B, x, m=2000, seed=0)
    closed = a * (x - B.mean(axis=0))
    add_ok = bool(np.all(np.abs(add.values - closed) <= np.maximum(3 * add.se, 1e-9)))
    f3 = lambda X: X[:, 0] * X[:, 1] + np.exp(0.3 * X[:, 2]) * X[:, 0] ** 2  # noqa: E731
    B3, x3 = rng.normal(size=(20, 3)), rng.normal(size=3)
    ex = shapley_sampling(f3, B3, x3, m=6)
    bf_gap = float(np.max(np.abs(ex.values - _brute_force(f3, B3, x3))))
    fnull = lambda X: np.tanh(X[:, 0] * X[:, 2]) + X[:, 3] ** 2  # noqa: E731
    null = shapley_sampling(fnull, rng.normal(size=(30, 5)), rng.normal(size=5), m=500, seed=1)
    null_ok = null.values[1] == 0.0 and null.values[4] == 0.0
    elapsed = time.perf_counter() - t0
    ok = add_ok and bf_gap <= 1e-12 and null_ok and elapsed < 60
    detail = f"additive max err {np.max(np.abs(add.values - closed)):.1e} (3SE floor 1e-9); " \
             f"brute-force gap {bf_gap:.1e}; null players {null.values[[1, 4]].tolist()}; {elapsed:.1f}s"
    assert record_criterion(9, ok, detail), detail


# 10 ------------------------------------------------------------------------
def test_c10_reproducibility(cli_run, tmp_path, record_criterion):
    run_a, codes_a = cli_run
    run_b, codes_b = run_pipeline(tmp_path)
    files_a = sorted(p.relative_to(run_a) for p in run_a.rglob("*") if p.is_file() and p.parts[-2] != "manifests")
    files_b = sorted(p.relative_to(run_b) for p in run_b.rglob("*") if p.is_file() and p.parts[-2] != "manifests")
    same_set = files_a == files_b
    _, mismatch, errors = filecmp.cmpfiles(run_a, run_b, [str(p) for p in files_a], shallow=False)
    problems = verify_run(run_a) + verify_run(run_b)
    clean = all(c == 0 for c in {**codes_a, **codes_b}.values())
    ok = clean and same_set and not mismatch and not errors and not problems
    detail = f"{len(files_a)} report files compared, {len(mismatch)} differ; verify problems: " \
             f"{problems or 'none'}; all commands exit 0={clean}"
    assert record_criterion(10, ok, detail), detail
