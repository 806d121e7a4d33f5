"""Setpoint-constrained optimisation of efficiency and heat rate.

The problem, in scaled units, is::

    minimise    -TE(x) + THR(x)
    subject to  (Power(x) - setpoint)**2 <= epsilon
                (x - mu)' S^-1 (x - mu) <= tau**2        (MAD_OPT mode only)
                lower <= x <= upper

It is solved by an augmented-Lagrangian outer loop (setpoint as an equality,
envelope as an inequality) around bound-constrained L-BFGS-B inner solves.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .dataset import AMBIENT_NAMES, INPUT_NAMES, Dataset
from .exceptions import InfeasibleStartError, SchemaError, SolverError
from .mahalanobis import MahalanobisEnvelope

AMBIENT_LOCK_HALF_WIDTH = 0.02
SETPOINT_RANGE = (-0.5, 1.5)
ENVELOPE_SLACK = 1e-6
BOUND_SLACK = 1e-9
TIE_TOL = 1e-9


class Mode(str, enum.Enum):
    MAD_OPT = "madopt"
    UNCONSTRAINED = "unconstrained"


class FunctionModel:
    """Adapter exposing a plain function and its gradient as a surrogate."""

    def __init__(self, fun, grad):
        self.fun = fun
        self.grad = grad

    def value_and_grad(self, x):
        return float(self.fun(x)), np.asarray(self.grad(x), dtype=float)

    def forward(self, x):
        return float(self.fun(x))

    def grad_input(self, x):
        return np.asarray(self.grad(x), dtype=float)


@dataclass
class SolverSettings:
    max_outer: int = 40
    max_inner: int = 400
    penalty_growth: float = 10.0
    initial_penalty: float = 10.0
    stationarity_tol: float = 1e-6
    feasibility_tol: float = 1e-9
    seed: int = 0
    max_penalty: float = 1e10

    def __post_init__(self):
        if min(self.max_outer, self.max_inner) < 1:
            raise ValueError("iteration limits must be positive")
        if not self.penalty_growth > 1:
            raise ValueError("penalty_growth must exceed 1")
        if min(self.initial_penalty, self.stationarity_tol, self.feasibility_tol) <= 0:
            raise ValueError("penalty and tolerances must be positive")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ProblemSpec:
    """Validated optimisation problem; build it with :func:`build_problem`."""

    power: object
    te: object
    thr: object
    setpoint: float
    epsilon: float
    lower: np.ndarray
    upper: np.ndarray
    mode: Mode
    tau: float | None = None
    envelope: MahalanobisEnvelope | None = None
    names: tuple = INPUT_NAMES
    scaler: object = None
    setpoint_mw: float | None = None
    _precision: np.ndarray | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def uses_envelope(self) -> bool:
        return self.mode is Mode.MAD_OPT

    def precision(self):
        if self._precision is None:
            L = self.envelope.cholesky_
            self._precision = linalg.cho_solve((L, True), np.eye(self.dim))
        return self._precision

    def _eval(self, model, x, label):
        v, g = model.value_and_grad(x)
        if not (math.isfinite(v) and np.all(np.isfinite(g))):
            raise SolverError(f"non-finite {label} evaluation at x={x.tolist()}", point=x.copy())
        return v, g

    def objective(self, x):
        te, gte = self._eval(self.te, x, "TE")
        thr, gthr = self._eval(self.thr, x, "THR")
        return thr - te, gthr - gte

    def setpoint_residual(self, x):
        p, gp = self._eval(self.power, x, "Power")
        return p - self.setpoint, gp

    def envelope_residual(self, x):
        """``d^2(x) - tau^2`` and its gradient."""
        diff = x - self.envelope.mean_
        Pd = self.precision() @ diff
        return float(diff @ Pd) - self.tau ** 2, 2.0 * Pd

    def sq_distance(self, x):
        if self.envelope is None:
            return None
        diff = x - self.envelope.mean_
        return float(diff @ self.precision() @ diff)


def _model_map(models):
    if hasattr(models, "models"):
        models = models.models
    try:
        return models["Power"], models["TE"], models["THR"]
    except (KeyError, TypeError):
        raise ValueError("models must provide 'Power', 'TE' and 'THR'") from None


def build_problem(models, setpoint, epsilon=None, bounds=None, mode=Mode.MAD_OPT, tau=None,
                  ambient_lock=None, envelope=None, scaler=None, names=INPUT_NAMES) -> ProblemSpec:
    """Assemble and validate a :class:`ProblemSpec`.

    Parameters
    ----------
    models : SurrogateSet or mapping
        ``Power``, ``TE`` and ``THR`` surrogates. Trained surrogates must
        share one scaler.
    setpoint : float
        Power setpoint in MW when a scaler is available, otherwise already
        scaled.
    epsilon : float, optional
        Band on the squared scaled setpoint residual. Defaults to one MW
        expressed in scaled units, squared.
    bounds : (lower, upper) or mapping of name to (lower, upper), optional
        Scaled box; defaults to the unit cube.
    mode : Mode or str
    tau : float, optional
        Envelope tolerance; required for ``MAD_OPT`` and ignored (with a
        warning) otherwise.
    ambient_lock : mapping of name to value, optional
        Ambient values in engineering units (scaled when no scaler); the
        corresponding bounds are narrowed to +/-0.02 scaled units.
    """
    mode = Mode(mode)
    power, te, thr = _model_map(models)
    refs = {getattr(m, "scaler_ref", None) for m in (power, te, thr)}
    if len(refs) > 1:
        raise SchemaError("Power, TE and THR surrogates were trained with different scalers")
    if scaler is None:
        scaler = getattr(power, "scaler", None)
    names = tuple(names)
    p = len(names)

    if scaler is not None:
        setpoint_mw = float(setpoint)
        sp = scaler.scale_value("Power", setpoint_mw)
    else:
        setpoint_mw = None
        sp = float(setpoint)
    if not SETPOINT_RANGE[0] <= sp <= SETPOINT_RANGE[1]:
        raise ValueError(f"setpoint {setpoint} maps to {sp:.3f} scaled, outside {SETPOINT_RANGE}")

    if epsilon is None:
        if scaler is None:
            raise ValueError("epsilon is required when no scaler is available")
        epsilon = (1.0 / (scaler.data_max_[scaler.columns_.index("Power")]
                          - scaler.data_min_[scaler.columns_.index("Power")])) ** 2
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")

    if bounds is None:
        lower, upper = np.zeros(p), np.ones(p)
    elif isinstance(bounds, dict):
        lower, upper = np.zeros(p), np.ones(p)
        for k, (lo, hi) in bounds.items():
            i = names.index(k)
            lower[i], upper[i] = lo, hi
    else:
        lower = np.broadcast_to(np.asarray(bounds[0], dtype=float), (p,)).copy()
        upper = np.broadcast_to(np.asarray(bounds[1], dtype=float), (p,)).copy()
    for k, v in (ambient_lock or {}).items():
        i = names.index(k)
        vs = scaler.scale_value(k, v) if scaler is not None else float(v)
        lo, hi = vs - AMBIENT_LOCK_HALF_WIDTH, vs + AMBIENT_LOCK_HALF_WIDTH
        if hi >= lower[i] and lo <= upper[i]:
            lo, hi = max(lo, lower[i]), min(hi, upper[i])
        lower[i], upper[i] = lo, hi
    if np.any(lower > upper):
        bad = [names[i] for i in np.flatnonzero(lower > upper)]
        raise ValueError(f"lower bound exceeds upper bound for {bad}")

    if mode is Mode.UNCONSTRAINED:
        if tau is not None:
            warnings.warn("tau is ignored without the envelope constraint", stacklevel=2)
        tau = None
    else:
        if envelope is None or tau is None:
            raise ValueError("MAD_OPT mode needs an envelope and tau")
        if not tau > 0:
            raise ValueError("tau must be positive")
        if envelope.n_features_in_ != p:
            raise ValueError("envelope dimension does not match the decision vector")
        tau = float(tau)
    return ProblemSpec(power, te, thr, sp, float(epsilon), lower, upper, mode, tau, envelope,
                       names, scaler, setpoint_mw)


@dataclass
class OptSolution:
    x_scaled: np.ndarray
    objective: float
    converged: bool
    feasible: bool
    iterations: int
    start_id: int
    mode: Mode
    tau: float | None
    setpoint: float
    multipliers: dict
    residuals: dict
    d_m: float | None = None
    x: np.ndarray | None = None
    predictions: dict | None = None
    predictions_scaled: dict | None = None
    setpoint_mw: float | None = None
    names: tuple = INPUT_NAMES
    message: str = ""
    x0: np.ndarray | None = None

    def to_dict(self) -> dict:
        def fl(v):
            return None if v is None else float(v)
        return {
            "start_id": self.start_id,
            "mode": self.mode.value,
            "tau": fl(self.tau),
            "setpoint_scaled": fl(self.setpoint),
            "setpoint_mw": fl(self.setpoint_mw),
            "converged": self.converged,
            "feasible": self.feasible,
            "iterations": self.iterations,
            "objective": fl(self.objective),
            "d_m": fl(self.d_m),
            "x_scaled": dict(zip(self.names, map(float, self.x_scaled))),
            "x": None if self.x is None else dict(zip(self.names, map(float, self.x))),
            "x0_scaled": None if self.x0 is None else [float(v) for v in self.x0],
            "predictions": None if self.predictions is None else
            {k: float(v) for k, v in self.predictions.items()},
            "predictions_scaled": None if self.predictions_scaled is None else
            {k: float(v) for k, v in self.predictions_scaled.items()},
            "multipliers": {k: float(v) for k, v in self.multipliers.items()},
            "residuals": _jsonable(self.residuals),
            "message": self.message,
        }


def _jsonable(d):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out[k] = _jsonable(v)
        elif isinstance(v, (bool, np.bool_)):
            out[k] = bool(v)
        elif v is None:
            out[k] = None
        else:
            out[k] = float(v)
    return out


def _lagrangian_grad(spec, x, lam, nu):
    _, gf = spec.objective(x)
    h, gh = spec.setpoint_residual(x)
    grad = gf + lam * gh
    g = None
    if spec.uses_envelope:
        g, gg = spec.envelope_residual(x)
        grad = grad + nu * gg
    return grad, h, g


def _estimate_multipliers(spec, x):
    _, gf = spec.objective(x)
    _, gh = spec.setpoint_residual(x)
    free = (x > spec.lower + BOUND_SLACK) & (x < spec.upper - BOUND_SLACK)
    cols = [gh]
    active_env = False
    if spec.uses_envelope:
        g, gg = spec.envelope_residual(x)
        if g > -1e-6:
            cols.append(gg)
            active_env = True
    A = np.column_stack(cols)[free]
    if A.size == 0:
        return {"setpoint": 0.0, "envelope": 0.0}
    coef, *_ = np.linalg.lstsq(A, -gf[free], rcond=None)
    nu = max(0.0, float(coef[1])) if active_env else 0.0
    return {"setpoint": float(coef[0]), "envelope": nu}


def kkt_residuals(spec: ProblemSpec, x, multipliers=None) -> dict:
    """First-order optimality measures at ``x`` in scaled units.

    ``stationarity`` is the infinity norm of the projected Lagrangian
    gradient; bound multipliers are recovered from the gradient at active
    bounds and must be non-negative.
    """
    x = np.asarray(x, dtype=float)
    if multipliers is None:
        multipliers = _estimate_multipliers(spec, x)
    lam = multipliers.get("setpoint", 0.0)
    nu = multipliers.get("envelope", 0.0)
    grad, h, g = _lagrangian_grad(spec, x, lam, nu)
    projected = x - np.clip(x - grad, spec.lower, spec.upper)
    at_lo = x <= spec.lower + BOUND_SLACK
    at_hi = x >= spec.upper - BOUND_SLACK
    z_lo = np.where(at_lo, grad, 0.0)
    z_hi = np.where(at_hi, -grad, 0.0)
    comp_bounds = max(float(np.max(np.abs(z_lo * (x - spec.lower)), initial=0.0)),
                      float(np.max(np.abs(z_hi * (spec.upper - x)), initial=0.0)))
    comp_env = abs(nu * g) if g is not None else 0.0
    bound_violation = float(max(np.max(spec.lower - x), np.max(x - spec.upper), 0.0))
    return {
        "stationarity": float(np.max(np.abs(projected))),
        "feasibility": {
            "setpoint": float(h),
            "setpoint_band": float(h * h - spec.epsilon),
            "envelope": None if g is None else float(g),
            "bounds": bound_violation,
        },
        "complementarity": max(comp_env, comp_bounds),
        "bound_multiplier_sign_ok": bool(np.all(z_lo[at_lo] >= -1e-8) and np.all(z_hi[at_hi] >= -1e-8)),
    }


def _is_feasible(spec, x, h, g):
    ok = h * h <= spec.epsilon
    ok &= bool(np.all(x >= spec.lower - BOUND_SLACK) and np.all(x <= spec.upper + BOUND_SLACK))
    if spec.uses_envelope:
        ok &= g <= ENVELOPE_SLACK
    return bool(ok)


def _decorate(spec, sol: OptSolution) -> OptSolution:
    x = sol.x_scaled
    p_s = spec.power.value_and_grad(x)[0]
    te_s = spec.te.value_and_grad(x)[0]
    thr_s = spec.thr.value_and_grad(x)[0]
    sol.predictions_scaled = {"Power": p_s, "TE": te_s, "THR": thr_s}
    d2 = spec.sq_distance(x)
    sol.d_m = None if d2 is None else math.sqrt(max(d2, 0.0))
    if spec.scaler is not None:
        sol.x = spec.scaler.inverse_transform(x, columns=spec.names)
        sol.predictions = {t: spec.scaler.unscale_value(t, v) for t, v in sol.predictions_scaled.items()}
    return sol


def solve(spec: ProblemSpec, x0, settings: SolverSettings | None = None, start_id: int = 0) -> OptSolution:
    """Augmented-Lagrangian solve from one start point.

    Non-converged runs are returned with ``converged=False`` and the final
    iterate; ``feasible`` reports separately whether that iterate meets the
    setpoint band, the envelope and the bounds.
    """
    settings = settings or SolverSettings()
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (spec.dim,):
        raise ValueError(f"x0 must have shape ({spec.dim},)")
    if np.any(x0 < spec.lower - 1e-6) or np.any(x0 > spec.upper + 1e-6):
        raise ValueError("x0 lies outside the bounds")
    x = np.clip(x0, spec.lower, spec.upper)
    lam, nu, rho = 0.0, 0.0, settings.initial_penalty
    box = list(zip(spec.lower, spec.upper))
    prev_viol = math.inf
    converged = False
    message = "outer iteration limit reached"
    outer = 0

    def merit(z):
        f, gf = spec.objective(z)
        h, gh = spec.setpoint_residual(z)
        val = f + lam * h + 0.5 * rho * h * h
        grad = gf + (lam + rho * h) * gh
        if spec.uses_envelope:
            g, gg = spec.envelope_residual(z)
            shifted = nu + rho * g
            if shifted > 0:
                val += (shifted * shifted - nu * nu) / (2 * rho)
                grad = grad + shifted * gg
            else:
                val -= nu * nu / (2 * rho)
        return val, grad

    for outer in range(1, settings.max_outer + 1):
        res = optimize.minimize(merit, x, jac=True, method="L-BFGS-B", bounds=box,
                                options={"maxiter": settings.max_inner, "ftol": 1e-15,
                                         "gtol": 1e-11, "maxcor": 20})
        x = np.clip(res.x, spec.lower, spec.upper)
        h, _ = spec.setpoint_residual(x)
        viol = abs(h)
        g = None
        if spec.uses_envelope:
            g, _ = spec.envelope_residual(x)
            viol = max(viol, max(g, -nu / rho))
        lam += rho * h
        if spec.uses_envelope:
            nu = max(0.0, nu + rho * g)
        kkt = kkt_residuals(spec, x, {"setpoint": lam, "envelope": nu})
        true_viol = max(abs(h), max(g, 0.0) if g is not None else 0.0)
        if true_viol <= settings.feasibility_tol:
            if kkt["stationarity"] > settings.stationarity_tol:
                # The running estimates can lag at a feasible point; least-squares
                # multipliers certify stationarity just as well.
                est = _estimate_multipliers(spec, x)
                if kkt_residuals(spec, x, est)["stationarity"] <= settings.stationarity_tol:
                    lam, nu = est["setpoint"], est["envelope"]
                    kkt = None
            if kkt is None or kkt["stationarity"] <= settings.stationarity_tol:
                converged = True
                message = "converged"
                break
        if viol > 0.25 * prev_viol and viol > settings.feasibility_tol and rho < settings.max_penalty:
            rho = min(rho * settings.penalty_growth, settings.max_penalty)
        prev_viol = viol

    f, _ = spec.objective(x)
    h, _ = spec.setpoint_residual(x)
    g = spec.envelope_residual(x)[0] if spec.uses_envelope else None
    mult = {"setpoint": lam, "envelope": nu}
    kkt = kkt_residuals(spec, x, mult)
    feasible = _is_feasible(spec, x, h, g)
    converged = converged and feasible
    sol = OptSolution(x_scaled=x, objective=f, converged=converged, feasible=feasible,
                      iterations=outer, start_id=start_id, mode=spec.mode, tau=spec.tau,
                      setpoint=spec.setpoint, multipliers=mult, residuals=kkt,
                      setpoint_mw=spec.setpoint_mw, names=spec.names, message=message,
                      x0=x0.copy())
    return _decorate(spec, sol)


def write_jsonl(solutions, path):
    """One JSON object per solution, in start order."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in solutions:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")


def sample_starts(spec: ProblemSpec, n_starts: int, rng, lock_width=0.1) -> np.ndarray:
    """Start points inside the bounds, and inside the envelope in MAD_OPT mode.

    Variables whose box is narrower than ``lock_width`` are drawn uniformly
    within it; the rest are drawn uniformly from the slice of the
    tau-ellipsoid through those values and rejected if outside the box.
    """
    p = spec.dim
    if not spec.uses_envelope:
        return spec.lower + (spec.upper - spec.lower) * rng.random((n_starts, p))
    locked = (spec.upper - spec.lower) <= lock_width
    F = np.flatnonzero(~locked)
    A = np.flatnonzero(locked)
    mu = spec.envelope.mean_
    S = spec.envelope.regularized_covariance_
    P = spec.precision()
    C = linalg.cholesky(P[np.ix_(F, F)], lower=True)
    S_AA_inv = linalg.inv(S[np.ix_(A, A)]) if len(A) else None
    starts = []
    rejections = 0
    limit = 100 * n_starts
    while len(starts) < n_starts:
        x = np.empty(p)
        x[A] = spec.lower[A] + (spec.upper[A] - spec.lower[A]) * rng.random(len(A))
        if len(A):
            da = x[A] - mu[A]
            r2 = spec.tau ** 2 - float(da @ S_AA_inv @ da)
            centre = mu[F] - linalg.cho_solve((C, True), P[np.ix_(F, A)] @ da)
        else:
            r2 = spec.tau ** 2
            centre = mu[F]
        ok = r2 > 0
        if ok:
            u = rng.standard_normal(len(F))
            u *= math.sqrt(r2) * rng.random() ** (1.0 / len(F)) / np.linalg.norm(u)
            x[F] = centre + linalg.solve_triangular(C.T, u, lower=False)
            ok = bool(np.all(x[F] >= spec.lower[F]) and np.all(x[F] <= spec.upper[F]))
        if ok:
            starts.append(x)
        else:
            rejections += 1
            if rejections > limit:
                raise InfeasibleStartError(
                    f"no start inside bounds and the tau={spec.tau:g} envelope after {limit} rejections")
    return np.array(starts)


def select_best(solutions):
    """Lowest objective among feasible runs.

    Ties go to converged runs, then to the smaller d_M, then to the lower
    start id. When no run is feasible the least-infeasible one is returned.
    """
    feas = [s for s in solutions if s.feasible]
    if not feas:
        def violation(s):
            f = s.residuals["feasibility"]
            env = f["envelope"] if f["envelope"] is not None else 0.0
            return (max(f["setpoint_band"], 0.0) + max(env, 0.0) + f["bounds"], s.start_id)
        return min(solutions, key=violation)
    best_obj = min(s.objective for s in feas)
    tied = [s for s in feas if s.objective <= best_obj + TIE_TOL]
    return min(tied, key=lambda s: (not s.converged, s.d_m if s.d_m is not None else 0.0, s.start_id))


def multi_start(spec: ProblemSpec, n_starts: int = 16, seed: int = 0,
                settings: SolverSettings | None = None, starts=None):
    """Solve from ``n_starts`` seeded start points; returns ``(best, all)``."""
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    if starts is None:
        starts = sample_starts(spec, n_starts, np.random.default_rng(seed))
    sols = [solve(spec, x0, settings, start_id=i) for i, x0 in enumerate(starts)]
    return select_best(sols), sols


def distance_problem(spec: ProblemSpec) -> ProblemSpec:
    """Same setpoint band and bounds, but minimising the squared envelope distance."""
    if spec.envelope is None:
        raise ValueError("the problem has no envelope")
    p = spec.dim
    mu = spec.envelope.mean_
    P = spec.precision()
    zero = FunctionModel(lambda x: 0.0, lambda x: np.zeros(p))
    d2 = FunctionModel(lambda x: (x - mu) @ P @ (x - mu), lambda x: 2.0 * P @ (x - mu))
    return dataclasses.replace(spec, te=zero, thr=d2, mode=Mode.UNCONSTRAINED, tau=None,
                               _precision=P)


def min_envelope_distance(spec: ProblemSpec, n_starts: int = 4, seed: int = 0,
                          settings: SolverSettings | None = None):
    """Smallest d_M compatible with the setpoint band and bounds.

    Returns ``(distance, solution)``; the distance is ``inf`` if no start
    reaches the setpoint band, and the solution is then the least
    infeasible iterate.
    """
    best, _ = multi_start(distance_problem(spec), n_starts, seed, settings)
    return (math.sqrt(max(best.objective, 0.0)) if best.feasible else math.inf), best


# -- domain consistency ----------------------------------------------------

@dataclass
class ConsistencyReport:
    flags: list
    details: dict

    @property
    def consistent(self) -> bool:
        return not self.flags

    def to_dict(self):
        return {"consistent": self.consistent, "flags": list(self.flags), "details": self.details}


def check_domain_consistency(sol: OptSolution, envelope: MahalanobisEnvelope | None, data: Dataset,
                             tau: float | None = None, outputs=("TE", "THR")) -> ConsistencyReport:
    """Flag a solution that leaves the historically observed operating domain.

    Flags: ``range:<var>`` for inputs outside the schema's [min, max],
    ``envelope`` for ``d_M > tau`` and ``output:<target>`` for predictions
    outside the range of that target observed in ``data``.
    """
    if sol.x is None or sol.predictions is None:
        raise ValueError("solution carries no engineering-unit view")
    tau = sol.tau if tau is None else tau
    flags, details = [], {"ranges": {}, "outputs": {}}
    for i, name in enumerate(sol.names):
        spec = data.spec(name)
        lo, hi = float(spec.min), float(spec.max)
        v = float(sol.x[i])
        tol = 1e-9 * max(1.0, abs(lo), abs(hi))
        out = v < lo - tol or v > hi + tol
        details["ranges"][name] = {"value": v, "min": lo, "max": hi, "outside": out}
        if out:
            flags.append(f"range:{name}")
    if envelope is not None and tau is not None:
        d = float(envelope.distance(sol.x_scaled))
        details["d_m"] = d
        details["tau"] = float(tau)
        if d > tau + ENVELOPE_SLACK:
            flags.append("envelope")
    for t in outputs:
        col = data.column(t)
        lo, hi = float(col.min()), float(col.max())
        v = float(sol.predictions[t])
        out = v < lo or v > hi
        details["outputs"][t] = {"value": v, "min": lo, "max": hi, "outside": out}
        if out:
            flags.append(f"output:{t}")
    return ConsistencyReport(flags, details)
