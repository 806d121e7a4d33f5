"""Synthetic stand-in for the proprietary plant dataset.

Inputs are drawn from a Gaussian copula with Beta marginals whose support,
mean and standard deviation match the reference table, so no input ever
needs clipping. Outputs come from a small deterministic oracle plus seeded
measurement noise:

* thermal efficiency rises with compressor discharge pressure/temperature
  and saturates with load, so it is concave and increasing in load (``TE``),
* power is efficiency times fuel energy, ``Power = K_FUEL * TE/100 * GFFR``,
* heat rate is the reciprocal of efficiency, ``THR = 360000 / TE``.

The constants below were calibrated once against the reference table; they
are not claims about any real plant.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy import stats

from .dataset import (INPUT_NAMES, PERFORMANCE_OUTPUT, TABLE1, CorrelationMatrix, Dataset,
                      VariableSpec)
from .exceptions import MadoptError

# Efficiency drivers, weights on standardised inputs.
TE_WEIGHTS = {"CDP": 0.55, "CDT": 0.35, "FGT": 0.12, "AT": -0.12, "AP": 0.04,
              "AH": -0.04, "FGEXT": 0.06, "PHGOT": 0.03}
TE_SATURATION = 0.9         # decay rate of the load response, load = (z_CDP + z_CDT) / 2
TE_RAW_MEAN = -1.394        # population moments of the raw index under DEFAULT_INPUT_CORR
TE_RAW_STD = 1.188
K_FUEL = 19.1               # MW per (lb/s) of fuel at 100 % efficiency
THR_PER_TE = 360000.0       # kJ/kWh at 1 % efficiency

NOISE_STD = {"TE": 0.30, "Power": 1.0, "THR": 80.0}


def _default_corr() -> CorrelationMatrix:
    names = INPUT_NAMES
    R = np.eye(len(names))

    def put(a, b, v):
        i, j = names.index(a), names.index(b)
        R[i, j] = R[j, i] = v

    put("CDP", "GFFR", 0.95)
    put("CDP", "CDT", 0.85)
    put("GFFR", "CDT", 0.85)
    for v in ("CDP", "GFFR", "CDT"):
        put("FGT", v, 0.5)
    put("FGEXT", "CDP", 0.6)
    put("FGEXT", "GFFR", 0.65)
    put("FGEXT", "CDT", 0.7)
    put("FGEXT", "FGT", 0.35)
    put("PHGOT", "CDT", 0.15)
    put("PHGOT", "CDP", 0.1)
    put("PHGOT", "GFFR", 0.1)
    put("PHGOT", "FGT", 0.2)
    put("AT", "CDP", -0.2)
    put("AT", "GFFR", -0.15)
    put("AT", "CDT", 0.25)
    put("AT", "FGEXT", 0.2)
    put("AT", "AH", -0.5)
    put("AT", "AP", -0.3)
    put("AP", "CDP", 0.1)
    put("AP", "AH", 0.1)
    return CorrelationMatrix(names, R)


DEFAULT_INPUT_CORR = _default_corr()


class IndefiniteCorrelationError(MadoptError, ValueError):
    pass


def repair_correlation(C, max_change=0.25, floor=1e-8, n_iter=50) -> np.ndarray:
    """Nearest positive-definite correlation matrix by eigenvalue clipping.

    Raises :class:`IndefiniteCorrelationError` when the input is not a
    plausible correlation matrix or the repair would move an entry by more
    than ``max_change``.
    """
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1] or not np.all(np.isfinite(C)):
        raise IndefiniteCorrelationError("correlation must be a finite square matrix")
    if np.max(np.abs(C - C.T)) > 1e-8:
        raise IndefiniteCorrelationError("correlation matrix is not symmetric")
    if np.max(np.abs(np.diag(C) - 1.0)) > 1e-8 or np.max(np.abs(C)) > 1.0 + 1e-12:
        raise IndefiniteCorrelationError("correlation needs unit diagonal and entries in [-1, 1]")
    R = 0.5 * (C + C.T)
    for _ in range(n_iter):
        w, V = np.linalg.eigh(R)
        if w.min() >= floor:
            break
        R = (V * np.maximum(w, floor)) @ V.T
        d = np.sqrt(np.diag(R))
        R = R / np.outer(d, d)
        R = 0.5 * (R + R.T)
    np.fill_diagonal(R, 1.0)
    if np.linalg.eigvalsh(R).min() <= 0 or np.max(np.abs(R - C)) > max_change:
        raise IndefiniteCorrelationError("correlation matrix cannot be repaired to positive definite")
    return R


def _beta_shape(spec: VariableSpec) -> tuple[float, float]:
    mu = (spec.mean - spec.min) / spec.span
    var = (spec.std / spec.span) ** 2
    t = mu * (1 - mu) / var - 1.0
    if not t > 0:
        raise ValueError(f"{spec.name}: std too large for a bounded marginal on [min, max]")
    return mu * t, (1 - mu) * t


def plant_oracle(X, names=INPUT_NAMES, targets=TABLE1) -> dict[str, np.ndarray]:
    """Noise-free TE (%), Power (MW) and THR (kJ/kWh) for input rows ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    specs = {v.name: v for v in targets}
    col = {n: X[:, i] for i, n in enumerate(names)}
    z = {n: (col[n] - specs[n].mean) / specs[n].std for n in TE_WEIGHTS}
    lin = sum(w * z[n] for n, w in TE_WEIGHTS.items())
    load = 0.5 * (z["CDP"] + z["CDT"])
    # Replace the linear load share by a saturating curve with the same slope at load 0.
    k = TE_WEIGHTS["CDP"] + TE_WEIGHTS["CDT"]
    lin = lin - k * load - k * np.exp(-TE_SATURATION * load) / TE_SATURATION
    eta = (lin - TE_RAW_MEAN) / TE_RAW_STD
    te = specs["TE"].mean + specs["TE"].std * eta
    power = K_FUEL * te / 100.0 * col["GFFR"]
    thr = THR_PER_TE / te
    return {"TE": te, "Power": power, "THR": thr}


def synth_plant_generate(targets=TABLE1, corr: CorrelationMatrix | None = None, n: int = 5000,
                         seed: int = 7, noise: dict | None = None) -> Dataset:
    """Draw ``n`` seeded rows of synthetic plant data.

    The returned dataset's provenance records the seed and the fraction of
    rows in which at least one output had to be clipped to its reference
    range; a warning is emitted if that exceeds 2 %.
    """
    targets = tuple(targets)
    corr = DEFAULT_INPUT_CORR if corr is None else corr
    noise = dict(NOISE_STD if noise is None else noise)
    in_specs = [v for v in targets if v.role != PERFORMANCE_OUTPUT]
    in_names = tuple(v.name for v in in_specs)
    order = [corr.names.index(nm) for nm in in_names]
    R = repair_correlation(corr.values[np.ix_(order, order)])
    L = np.linalg.cholesky(R)

    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, len(in_names))) @ L.T
    u = stats.norm.cdf(g)
    X = np.empty_like(u)
    for j, spec in enumerate(in_specs):
        a, b = _beta_shape(spec)
        X[:, j] = spec.min + spec.span * stats.beta.ppf(u[:, j], a, b)

    out = plant_oracle(X, in_names, targets)
    clipped = np.zeros(n, dtype=bool)
    table = {}
    for spec in targets:
        if spec.role != PERFORMANCE_OUTPUT:
            table[spec.name] = X[:, in_names.index(spec.name)]
            continue
        y = out[spec.name] + noise.get(spec.name, 0.0) * rng.standard_normal(n)
        lo, hi = spec.min, spec.max
        clipped |= (y < lo) | (y > hi)
        table[spec.name] = np.clip(y, lo, hi)
    values = np.column_stack([table[v.name] for v in targets])
    frac = float(clipped.mean())
    if frac >= 0.02:
        warnings.warn(f"clipping fraction {frac:.3%} exceeds 2%", stacklevel=2)
    return Dataset(targets, values, {"synthetic_seed": int(seed), "n": int(n),
                                     "clip_fraction": frac})
