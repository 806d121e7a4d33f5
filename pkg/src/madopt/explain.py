"""Permutation-sampling Shapley attributions for surrogate models."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Dataset

DEFAULT_PERMUTATIONS = 2000
DEFAULT_BACKGROUND = 100
DEFAULT_GLOBAL_ROWS = 200
DEFAULT_GLOBAL_PERMUTATIONS = 100


def as_function(model):
    """Return a vectorised ``f(X) -> y`` for a model or callable."""
    if hasattr(model, "predict"):
        return lambda X: np.asarray(model.predict(X), dtype=float)
    if callable(model):
        return lambda X: np.asarray(model(X), dtype=float)
    raise TypeError("model must be callable or provide predict")


def _background(background, names):
    if isinstance(background, Dataset):
        names = names or background.input_names
        return background.columns(names), tuple(names)
    B = np.atleast_2d(np.asarray(background, dtype=float))
    return B, tuple(names) if names else tuple(f"x{i}" for i in range(B.shape[1]))


@dataclass
class ShapleyResult:
    names: tuple
    values: np.ndarray
    base: float
    fx: float
    se: np.ndarray
    n_permutations: int
    exact: bool
    seed: int | None

    @property
    def efficiency_gap(self) -> float:
        return float(self.fx - self.base - self.values.sum())

    def as_dict(self):
        return dict(zip(self.names, map(float, self.values)))


def shapley_sampling(model, background, x, m=DEFAULT_PERMUTATIONS, seed=0, names=None) -> ShapleyResult:
    """Shapley values of ``model`` at ``x`` with background imputation.

    A coalition's value is the model output averaged over background rows
    whose coalition features are replaced by ``x``. Each permutation adds the
    features one at a time and credits each with the change. When ``m`` is at
    least ``p!`` every permutation is used once and the result is exact.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    f = as_function(model)
    B, names = _background(background, names)
    if B.shape[0] == 0:
        raise ValueError("background is empty")
    x = np.asarray(x, dtype=float)
    p = B.shape[1]
    if x.shape != (p,):
        raise ValueError(f"x must have {p} entries")
    nb = B.shape[0]
    base = float(f(B).mean())
    fx = float(f(x[None, :])[0])

    exact = p <= 8 and m >= math.factorial(p)
    if exact:
        perms = np.array(list(itertools.permutations(range(p))))
    else:
        rng = np.random.default_rng(seed)
        perms = np.array([rng.permutation(p) for _ in range(m)])

    contrib = np.empty((len(perms), p))
    for k, perm in enumerate(perms):
        # Row block i holds the background with the first i+1 features of perm taken from x.
        Z = np.tile(B, (p, 1))
        for i, j in enumerate(perm):
            Z[(i) * nb:, j] = x[j]
        v = f(Z).reshape(p, nb).mean(axis=1)
        prev = np.concatenate([[base], v[:-1]])
        contrib[k, perm] = v - prev
    values = contrib.mean(axis=0)
    n = len(perms)
    se = np.zeros(p) if exact or n < 2 else contrib.std(axis=0, ddof=1) / math.sqrt(n)
    return ShapleyResult(names, values, base, fx, se, n, exact, None if exact else seed)


@dataclass
class ImportanceReport:
    names: tuple
    mean_abs: np.ndarray
    ranking: list
    n_rows: int
    n_permutations: int
    seed: int

    def rows(self):
        return [{"feature": n, "mean_abs_attribution": float(self.mean_abs[self.names.index(n)]),
                 "rank": r + 1} for r, n in enumerate(self.ranking)]

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("feature", "mean_abs_attribution", "rank"))
            for r in self.rows():
                w.writerow((r["feature"], repr(r["mean_abs_attribution"]), r["rank"]))
        return Path(path)


def global_importance(model, data, background=None, m=DEFAULT_GLOBAL_PERMUTATIONS, seed=0,
                      n_rows=DEFAULT_GLOBAL_ROWS, n_background=DEFAULT_BACKGROUND, names=None) -> ImportanceReport:
    """Features ranked by mean absolute Shapley value over sampled rows.

    ``n_rows`` query rows and, unless given, ``n_background`` background
    rows are drawn from ``data`` without replacement using ``seed``. Ties in
    the ranking keep the input column order.
    """
    X, names = _background(data, names)
    if X.shape[0] < 50:
        raise ValueError("global importance needs at least 50 rows")
    rng = np.random.default_rng(seed)
    q_idx = rng.choice(X.shape[0], size=min(n_rows, X.shape[0]), replace=False)
    if background is None:
        b_idx = rng.choice(X.shape[0], size=min(n_background, X.shape[0]), replace=False)
        B = X[np.sort(b_idx)]
    else:
        B, _ = _background(background, names)
    seeds = np.random.SeedSequence(seed).spawn(len(q_idx))
    acc = np.zeros(X.shape[1])
    for i, s in zip(np.sort(q_idx), seeds):
        res = shapley_sampling(model, B, X[i], m, int(s.generate_state(1)[0]), names)
        acc += np.abs(res.values)
    mean_abs = acc / len(q_idx)
    order = sorted(range(len(names)), key=lambda j: (-mean_abs[j], j))
    return ImportanceReport(names, mean_abs, [names[j] for j in order], len(q_idx), m, seed)
