"""Min-max scaling of plant variables onto [0, 1]."""

from __future__ import annotations

import hashlib
import json

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dataset import Dataset
from .exceptions import DegenerateColumnError, UnknownColumnError


class RangeScaler(TransformerMixin, BaseEstimator):
    """Affine map ``(x - min) / (max - min)`` fitted per named column.

    Parameters
    ----------
    columns : sequence of str, optional
        Columns to fit when given a :class:`Dataset`. Defaults to all of them.
        When fitting a plain array the names default to ``x0, x1, ...``.

    Attributes
    ----------
    columns_ : tuple of str
    data_min_, data_max_ : ndarray
    """

    def __init__(self, columns=None):
        self.columns = columns

    def fit(self, X, y=None):
        if isinstance(X, Dataset):
            names = tuple(self.columns) if self.columns is not None else X.names
            arr = X.columns(names)
        else:
            arr = np.asarray(X, dtype=float)
            if arr.ndim != 2:
                raise ValueError("expected a 2-D array")
            names = (tuple(self.columns) if self.columns is not None
                     else tuple(f"x{i}" for i in range(arr.shape[1])))
            if len(names) != arr.shape[1]:
                raise ValueError("number of column names does not match array width")
        lo = arr.min(axis=0)
        hi = arr.max(axis=0)
        for name, a, b in zip(names, lo, hi):
            if not b > a:
                raise DegenerateColumnError(f"cannot scale constant column {name}", column=name)
        self.columns_ = names
        self.data_min_ = lo
        self.data_max_ = hi
        self.n_features_in_ = len(names)
        return self

    @classmethod
    def from_bounds(cls, bounds: dict[str, tuple[float, float]]) -> "RangeScaler":
        names = tuple(bounds)
        lo = np.array([bounds[n][0] for n in names], dtype=float)
        hi = np.array([bounds[n][1] for n in names], dtype=float)
        return cls(columns=names).fit(np.vstack([lo, hi]))

    @property
    def data_range_(self):
        return self.data_max_ - self.data_min_

    def _select(self, columns):
        check_is_fitted(self, "columns_")
        if columns is None:
            return np.arange(len(self.columns_))
        idx = []
        for c in columns:
            try:
                idx.append(self.columns_.index(c))
            except ValueError:
                raise UnknownColumnError(f"scaler has no column {c!r}") from None
        return np.array(idx)

    def _as_array(self, X, columns):
        if isinstance(X, Dataset):
            names = columns if columns is not None else self.columns_
            return X.columns(names), names
        if isinstance(X, dict):
            names = tuple(X) if columns is None else tuple(columns)
            return np.array([X[n] for n in names], dtype=float), names
        return np.asarray(X, dtype=float), columns

    def transform(self, X, columns=None):
        """Scale ``X`` (rows or a single row) whose columns are ``columns``."""
        arr, columns = self._as_array(X, columns)
        idx = self._select(columns)
        return (arr - self.data_min_[idx]) / self.data_range_[idx]

    def inverse_transform(self, X, columns=None):
        arr, columns = self._as_array(X, columns)
        idx = self._select(columns)
        return arr * self.data_range_[idx] + self.data_min_[idx]

    def scale_value(self, name, value):
        out = self.transform(np.atleast_1d(np.asarray(value, dtype=float)), columns=[name])
        return float(out[0]) if np.ndim(value) == 0 else out

    def unscale_value(self, name, value):
        out = self.inverse_transform(np.atleast_1d(np.asarray(value, dtype=float)), columns=[name])
        return float(out[0]) if np.ndim(value) == 0 else out

    def to_dict(self) -> dict:
        check_is_fitted(self, "columns_")
        return {
            "columns": list(self.columns_),
            "min": [float(v) for v in self.data_min_],
            "max": [float(v) for v in self.data_max_],
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, d) -> "RangeScaler":
        return cls.from_bounds({n: (lo, hi) for n, lo, hi in zip(d["columns"], d["min"], d["max"])})

    @property
    def fingerprint(self) -> str:
        """Short content hash used to check that models share one scaler."""
        payload = json.dumps([list(self.columns_), [repr(float(v)) for v in self.data_min_],
                              [repr(float(v)) for v in self.data_max_]])
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def fit_scaler(data: Dataset, columns=None) -> RangeScaler:
    return RangeScaler(columns=columns).fit(data)


def scale(params: RangeScaler, x, columns=None):
    return params.transform(x, columns=columns)


def unscale(params: RangeScaler, x, columns=None):
    return params.inverse_transform(x, columns=columns)
