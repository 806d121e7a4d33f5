"""Plant operating data: schema, CSV loading, summary statistics and splits."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import DegenerateColumnError, ParseError, SchemaError, UnknownColumnError

PROCESS_INPUT = "process_input"
AMBIENT_INPUT = "ambient_input"
PERFORMANCE_OUTPUT = "performance_output"
ROLES = (PROCESS_INPUT, AMBIENT_INPUT, PERFORMANCE_OUTPUT)


@dataclass(frozen=True)
class VariableSpec:
    """One plant variable with its unit, role and reference statistics.

    ``sanity`` holds the physical plausibility bounds enforced on load; when
    omitted it defaults to the reference range widened by half its span on
    each side.
    """

    name: str
    unit: str
    role: str
    min: float
    max: float
    mean: float = math.nan
    std: float = math.nan
    sanity: tuple[float, float] | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise SchemaError(f"unknown role {self.role!r} for {self.name}")
        if not self.min <= self.max:
            raise SchemaError(f"{self.name}: min {self.min} > max {self.max}")
        if not math.isnan(self.mean) and not self.min <= self.mean <= self.max:
            raise SchemaError(f"{self.name}: mean {self.mean} outside [{self.min}, {self.max}]")
        if not math.isnan(self.std) and self.std < 0:
            raise SchemaError(f"{self.name}: negative std")

    @property
    def span(self) -> float:
        return self.max - self.min

    @property
    def sanity_bounds(self) -> tuple[float, float]:
        if self.sanity is not None:
            return tuple(self.sanity)
        half = 0.5 * self.span
        return (self.min - half, self.max + half)

    def to_dict(self) -> dict:
        d = asdict(self)
        d = {k: v for k, v in d.items() if not (isinstance(v, float) and math.isnan(v))}
        if d.get("sanity") is None:
            d.pop("sanity", None)
        else:
            d["sanity"] = list(d["sanity"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VariableSpec":
        d = dict(d)
        if d.get("sanity") is not None:
            d["sanity"] = tuple(float(v) for v in d["sanity"])
        for key in ("min", "max", "mean", "std"):
            if key in d:
                d[key] = float(d[key])
        return cls(**d)


# Reference statistics of the 395 MW gas turbine system.
TABLE1: tuple[VariableSpec, ...] = (
    VariableSpec("CDP", "psi", PROCESS_INPUT, 186, 312, 248, 36.82),
    VariableSpec("GFFR", "lb/s", PROCESS_INPUT, 29, 50, 39, 5.65),
    VariableSpec("FGT", "degF", PROCESS_INPUT, 484, 535, 513, 14.93),
    VariableSpec("AT", "degC", AMBIENT_INPUT, 20, 34, 26, 3.67),
    VariableSpec("AP", "hPa", AMBIENT_INPUT, 983, 992, 988, 1.99),
    VariableSpec("AH", "%", AMBIENT_INPUT, 34, 98, 66, 14.16),
    VariableSpec("PHGOT", "degF", PROCESS_INPUT, 400, 425, 411, 2.47),
    VariableSpec("CDT", "degF", PROCESS_INPUT, 813, 926, 861, 34.26),
    VariableSpec("FGEXT", "degC", PROCESS_INPUT, 629, 673, 659, 15.90),
    VariableSpec("TE", "%", PERFORMANCE_OUTPUT, 32.69, 42.97, 38.99, 2.36),
    VariableSpec("Power", "MW", PERFORMANCE_OUTPUT, 185, 395, 297, 59.32),
    VariableSpec("THR", "kJ/kWh", PERFORMANCE_OUTPUT, 8377, 11022, 9267, 579.46),
)

INPUT_NAMES = tuple(v.name for v in TABLE1 if v.role != PERFORMANCE_OUTPUT)
AMBIENT_NAMES = tuple(v.name for v in TABLE1 if v.role == AMBIENT_INPUT)
PROCESS_NAMES = tuple(v.name for v in TABLE1 if v.role == PROCESS_INPUT)
TARGET_NAMES = ("Power", "TE", "THR")


def table1_spec(name: str) -> VariableSpec:
    for v in TABLE1:
        if v.name == name:
            return v
    raise UnknownColumnError(name)


def _check_schema(schema: Sequence[VariableSpec]) -> tuple[VariableSpec, ...]:
    schema = tuple(schema)
    names = [v.name for v in schema]
    dup = {n for n in names if names.count(n) > 1}
    if dup:
        raise SchemaError(f"duplicate variable names: {sorted(dup)}")
    return schema


class Dataset:
    """Immutable table of plant observations in engineering units.

    Parameters
    ----------
    schema : sequence of VariableSpec
        Column definitions, in column order.
    values : array-like of shape (n_rows, n_columns)
    provenance : dict, optional
        Where the rows came from (``{"csv_path": ...}`` or
        ``{"synthetic_seed": ...}``).
    check_sanity : bool, default=True
        Reject rows outside each variable's sanity bounds.
    """

    def __init__(self, schema, values, provenance=None, check_sanity=True, min_rows=2):
        self.schema = _check_schema(schema)
        arr = np.array(values, dtype=float, copy=True)
        if arr.ndim != 2 or arr.shape[1] != len(self.schema):
            raise SchemaError(
                f"values must have shape (n, {len(self.schema)}), got {arr.shape}")
        if arr.shape[0] < min_rows:
            raise ValueError(f"a dataset needs at least {min_rows} rows, got {arr.shape[0]}")
        if not np.all(np.isfinite(arr)):
            bad = np.argwhere(~np.isfinite(arr))[0]
            raise ParseError(
                f"missing or non-finite value at row {bad[0] + 1}, column {self.schema[bad[1]].name}",
                row=int(bad[0]) + 1, column=self.schema[bad[1]].name)
        if check_sanity:
            for j, spec in enumerate(self.schema):
                lo, hi = spec.sanity_bounds
                out = (arr[:, j] < lo) | (arr[:, j] > hi)
                if out.any():
                    i = int(np.argmax(out))
                    raise ParseError(
                        f"{spec.name}={arr[i, j]} at row {i + 1} outside sanity bounds [{lo}, {hi}]",
                        row=i + 1, column=spec.name)
        arr.setflags(write=False)
        self.values = arr
        self.provenance = dict(provenance or {})
        self._index = {v.name: j for j, v in enumerate(self.schema)}

    def __len__(self):
        return self.values.shape[0]

    def __repr__(self):
        return f"Dataset(n_rows={len(self)}, columns={list(self.names)})"

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.schema)

    @property
    def n_rows(self) -> int:
        return len(self)

    def spec(self, name: str) -> VariableSpec:
        return self.schema[self.index(name)]

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownColumnError(f"unknown column {name!r}") from None

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.index(name)]

    def columns(self, names: Iterable[str]) -> np.ndarray:
        return self.values[:, [self.index(n) for n in names]]

    @property
    def input_names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.schema if v.role != PERFORMANCE_OUTPUT)

    @property
    def inputs(self) -> np.ndarray:
        return self.columns(self.input_names)

    def subset(self, rows, provenance=None) -> "Dataset":
        prov = dict(self.provenance)
        prov.update(provenance or {})
        return Dataset(self.schema, self.values[rows], prov, check_sanity=False, min_rows=1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.names)
            for row in self.values:
                w.writerow([repr(float(v)) for v in row])


def save_schema(schema: Sequence[VariableSpec], path) -> None:
    Path(path).write_text(json.dumps([v.to_dict() for v in schema], indent=2) + "\n",
                          encoding="utf-8")


def load_schema(path) -> tuple[VariableSpec, ...]:
    try:
        items = json.loads(Path(path).read_text(encoding="utf-8"))
        return _check_schema(VariableSpec.from_dict(d) for d in items)
    except (TypeError, KeyError) as exc:
        raise SchemaError(f"malformed schema sidecar {path}: {exc}") from exc


def load_csv(path, schema: Sequence[VariableSpec] = TABLE1, check_sanity=True) -> Dataset:
    """Read a comma-separated file whose header names the schema variables.

    Header matching is order-insensitive; extra columns are dropped with a
    warning. Any empty or non-numeric cell is a hard error reporting its
    1-based data row and column name.
    """
    schema = _check_schema(schema)
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path} is empty") from None
        missing = [v.name for v in schema if v.name not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        extra = [h for h in header if h not in {v.name for v in schema}]
        if extra:
            warnings.warn(f"ignoring extra column(s) {extra} in {path}", stacklevel=2)
        pos = [header.index(v.name) for v in schema]
        rows = []
        for i, rec in enumerate(reader, start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"row {i} has {len(rec)} fields, expected {len(header)}", row=i)
            row = []
            for spec, p in zip(schema, pos):
                cell = rec[p].strip()
                try:
                    val = float(cell)
                except ValueError:
                    raise ParseError(
                        f"row {i}, column {spec.name}: cannot parse {cell!r} as a number",
                        row=i, column=spec.name) from None
                if not math.isfinite(val):
                    raise ParseError(f"row {i}, column {spec.name}: non-finite value {cell!r}",
                                     row=i, column=spec.name)
                row.append(val)
            rows.append(row)
    if not rows:
        raise ParseError(f"{path} has a header but no data rows")
    return Dataset(schema, np.array(rows), {"csv_path": str(path)}, check_sanity=check_sanity)


def descriptive_stats(data: Dataset) -> dict[str, dict[str, float]]:
    """Minimum, mean, maximum and sample standard deviation (ddof=1) per column."""
    if len(data) < 2:
        raise ValueError("descriptive statistics need at least 2 rows")
    out = {}
    for j, name in enumerate(data.names):
        col = data.values[:, j]
        out[name] = {
            "min": float(col.min()),
            "mean": float(col.mean()),
            "max": float(col.max()),
            "std": float(col.std(ddof=1)),
        }
    return out


@dataclass(frozen=True)
class CorrelationMatrix:
    names: tuple[str, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        p = len(self.names)
        if v.shape != (p, p):
            raise ValueError(f"correlation matrix must be {p}x{p}")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "values", v)

    def __getitem__(self, pair):
        a, b = pair
        return float(self.values[self.names.index(a), self.names.index(b)])

    def to_dict(self) -> dict:
        return {"names": list(self.names), "values": self.values.tolist()}


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dx = x - x.mean()
    dy = y - y.mean()
    den = math.sqrt(float(np.sum(dx * dx)) * float(np.sum(dy * dy)))
    if den == 0.0:
        raise DegenerateColumnError("correlation undefined for a constant series")
    return float(np.sum(dx * dy)) / den


def pearson_matrix(data: Dataset, columns: Sequence[str] | None = None) -> CorrelationMatrix:
    names = tuple(columns) if columns is not None else data.names
    X = data.columns(names)
    D = X - X.mean(axis=0)
    ss = np.sum(D * D, axis=0)
    for name, s in zip(names, ss):
        if s == 0.0:
            raise DegenerateColumnError(f"correlation undefined: column {name} is constant",
                                        column=name)
    norm = np.sqrt(ss)
    C = (D.T @ D) / np.outer(norm, norm)
    C = 0.5 * (C + C.T)
    np.clip(C, -1.0, 1.0, out=C)
    np.fill_diagonal(C, 1.0)
    return CorrelationMatrix(names, C)


def split(data: Dataset, ratio: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded shuffle split; the first part holds ``round(ratio * N)`` rows."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    n = len(data)
    if n < 5:
        raise ValueError(f"too few rows to split: {n} < 5")
    n_first = int(math.floor(ratio * n + 0.5))
    perm = np.random.default_rng(seed).permutation(n)
    first = np.sort(perm[:n_first])
    second = np.sort(perm[n_first:])
    return (data.subset(first, {"split": "first", "split_seed": seed}),
            data.subset(second, {"split": "second", "split_seed": seed}))


class EmptyPartitionWarning(UserWarning):
    pass


def subspace_filter(data: Dataset, threshold: float, column: str = "Power"):
    """Partition rows into ``column <= threshold`` and the remainder.

    Returns ``(subspace, holdout)``; an empty side is returned as ``None``
    and an :class:`EmptyPartitionWarning` is emitted.
    """
    col = data.column(column)
    lo = np.flatnonzero(col <= threshold)
    hi = np.flatnonzero(col > threshold)
    parts = []
    for rows, label in ((lo, "subspace"), (hi, "holdout")):
        if len(rows) == 0:
            warnings.warn(f"{label} is empty at {column} threshold {threshold}",
                          EmptyPartitionWarning, stacklevel=2)
            parts.append(None)
        else:
            parts.append(data.subset(rows, {"partition": label, "threshold": threshold}))
    return parts[0], parts[1]
