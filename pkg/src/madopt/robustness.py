"""Monte Carlo sensitivity of the predictions around an optimal operating point."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import AMBIENT_NAMES, INPUT_NAMES, TARGET_NAMES
from .exceptions import NumericError


@dataclass
class MonteCarloSpec:
    """Sampling plan: ``rounds`` independent rounds of ``n_samples`` draws.

    Noise on variable ``j`` has standard deviation ``noise_frac * std_j``.
    ``perturb`` is ``"process"`` (ambient inputs held fixed) or ``"all"``.
    """

    n_samples: int = 1000
    rounds: int = 50
    noise_frac: float = 0.01
    seed: int = 0
    perturb: str = "process"

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be at least 2")
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if not self.noise_frac > 0:
            raise ValueError("noise_frac must be positive")
        if self.perturb not in ("process", "all"):
            raise ValueError("perturb must be 'process' or 'all'")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def perturb_inputs(x_star, stds, frac, n, seed, mask=None) -> np.ndarray:
    """``n`` rows of ``x_star + e`` with independent ``e_j ~ N(0, (frac * std_j)**2)``.

    Variables excluded by ``mask`` or with a non-positive std are held fixed;
    the latter with a warning.
    """
    x_star = np.asarray(x_star, dtype=float)
    stds = np.asarray(stds, dtype=float)
    if x_star.shape != stds.shape:
        raise ValueError("x_star and stds must have the same length")
    scale = frac * stds
    bad = ~(stds > 0)
    if np.any(bad):
        warnings.warn(f"non-positive std for variables {np.flatnonzero(bad).tolist()}; held fixed",
                      stacklevel=2)
        scale = np.where(bad, 0.0, scale)
    if mask is not None:
        scale = np.where(np.asarray(mask, dtype=bool), scale, 0.0)
    rng = np.random.default_rng(seed)
    return x_star + rng.standard_normal((n, len(x_star))) * scale


def confidence_interval(samples, level=0.95):
    """Central empirical interval ``(lo, hi, width)`` by linear interpolation."""
    s = np.asarray(samples, dtype=float).ravel()
    if s.size < 2:
        raise ValueError("need at least two samples")
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(s, [a, 1.0 - a], method="linear")
    return float(lo), float(hi), float(hi - lo)


def _predict(models, X, targets):
    if hasattr(models, "predict") and not callable(getattr(models, "get", None)):
        out = models.predict(X)
    else:
        out = {t: models[t](X) for t in targets}
    return {t: np.asarray(out[t], dtype=float) for t in targets}


@dataclass
class MonteCarloReport:
    spec: MonteCarloSpec
    deterministic: dict
    rounds: list
    perturbed: list
    seeds: list = field(default_factory=list)

    def widths(self, target):
        return np.array([r[f"{target}_width"] for r in self.rounds])

    def summary(self) -> dict:
        out = {}
        for t in self.deterministic:
            w = self.widths(t)
            means = np.array([r[f"{t}_mean"] for r in self.rounds])
            det = self.deterministic[t]
            out[t] = {
                "deterministic": det,
                "mean_of_means": float(means.mean()),
                "mean_width": float(w.mean()),
                "width_ratio": float(w.max() / w.min()) if w.min() > 0 else (1.0 if w.max() == 0 else np.inf),
                "rounds_mean_within_half_width": int(np.sum(np.abs(means - det) <= w / 2.0)),
            }
        return out

    def write(self, outdir, stem="montecarlo") -> list[Path]:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        p_csv = out / f"{stem}_rounds.csv"
        fields = list(self.rounds[0])
        with open(p_csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(fields)
            for r in self.rounds:
                w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in fields])
        p_json = out / f"{stem}_summary.json"
        p_json.write_text(json.dumps({"spec": self.spec.to_dict(), "perturbed": self.perturbed,
                                      "seeds": self.seeds, "summary": self.summary()},
                                     indent=1, sort_keys=True) + "\n")
        return [p_csv, p_json]


def monte_carlo(models, x_star, spec: MonteCarloSpec, stds, names=INPUT_NAMES,
                targets=TARGET_NAMES) -> MonteCarloReport:
    """Propagate input noise through the surrogates, round by round.

    ``models`` is a :class:`~madopt.surrogate.SurrogateSet` (or any object
    whose ``predict`` maps engineering-unit rows to a dict of targets) or a
    mapping of target to callable. Each round draws from its own child of
    ``SeedSequence(spec.seed)``.
    """
    names = tuple(names)
    x_star = np.asarray(x_star, dtype=float)
    stds = np.asarray([stds[n] for n in names] if isinstance(stds, dict) else stds, dtype=float)
    mask = np.array([spec.perturb == "all" or n not in AMBIENT_NAMES for n in names])
    det = {t: float(v[0]) for t, v in _predict(models, x_star[None, :], targets).items()}
    children = np.random.SeedSequence(spec.seed).spawn(spec.rounds)
    rows = []
    for k, child in enumerate(children):
        X = perturb_inputs(x_star, stds, spec.noise_frac, spec.n_samples, child, mask)
        preds = _predict(models, X, targets)
        row = {"round": k}
        for t in targets:
            y = preds[t]
            if not np.all(np.isfinite(y)):
                i = int(np.flatnonzero(~np.isfinite(y))[0])
                raise NumericError(f"non-finite {t} prediction in round {k}, sample {i}", index=(k, i))
            lo, hi, width = confidence_interval(y)
            row.update({f"{t}_mean": float(y.mean()), f"{t}_q025": lo, f"{t}_q975": hi,
                        f"{t}_width": width})
        rows.append(row)
    seeds = [{"entropy": int(c.entropy), "spawn_key": list(c.spawn_key)} for c in children]
    return MonteCarloReport(spec, det, rows, [n for n, m in zip(names, mask) if m], seeds)
