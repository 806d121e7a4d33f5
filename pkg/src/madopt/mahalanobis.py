"""Mahalanobis operating envelope over the scaled decision variables."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import EnvelopeFitError, UnknownColumnError

BOUNDARY_SLACK = 1e-12


class MahalanobisEnvelope(BaseEstimator):
    """Mean and covariance of historical operation, queried as an ellipsoid.

    Parameters
    ----------
    ridge : float or "auto", default="auto"
        Added to the covariance diagonal before factorisation. ``"auto"``
        uses ``1e-8 * trace(cov) / p``.
    names : sequence of str, optional
        Variable names, used by :meth:`ellipse_2d`.

    Attributes
    ----------
    mean_ : ndarray of shape (p,)
    covariance_ : ndarray of shape (p, p)
        Sample covariance (ddof=1), without the ridge.
    ridge_ : float
    cholesky_ : ndarray of shape (p, p)
        Lower Cholesky factor of ``covariance_ + ridge_ * I``.
    """

    def __init__(self, ridge="auto", names=None):
        self.ridge = ridge
        self.names = names

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise ValueError("X must be 2-D")
        n, p = X.shape
        if n <= p:
            raise ValueError(f"need more than {p} rows to fit a {p}-variable envelope, got {n}")
        return self._set_moments(X.mean(axis=0), np.cov(X, rowvar=False, ddof=1))

    @classmethod
    def from_moments(cls, mean, covariance, ridge=0.0, names=None) -> "MahalanobisEnvelope":
        return cls(ridge=ridge, names=names)._set_moments(np.asarray(mean, dtype=float),
                                                          np.asarray(covariance, dtype=float))

    def _set_moments(self, mean, cov):
        cov = np.atleast_2d(cov)
        p = len(mean)
        if cov.shape != (p, p):
            raise ValueError("covariance shape does not match mean")
        if np.max(np.abs(cov - cov.T)) > 1e-10 * max(1.0, np.abs(cov).max()):
            raise EnvelopeFitError("covariance matrix is not symmetric")
        cov = 0.5 * (cov + cov.T)
        if self.ridge == "auto":
            ridge = 1e-8 * np.trace(cov) / p
        else:
            ridge = float(self.ridge)
            if ridge < 0:
                raise ValueError("ridge must be non-negative")
        try:
            L = linalg.cholesky(cov + ridge * np.eye(p), lower=True)
        except linalg.LinAlgError as exc:
            raise EnvelopeFitError(
                f"covariance is not positive definite with ridge={ridge:g}; try a larger ridge") from exc
        if self.names is not None and len(self.names) != p:
            raise ValueError("names do not match the number of variables")
        self.mean_ = mean
        self.covariance_ = cov
        self.ridge_ = ridge
        self.cholesky_ = L
        self.n_features_in_ = p
        return self

    @property
    def names_(self):
        check_is_fitted(self, "mean_")
        return tuple(self.names) if self.names is not None else tuple(
            f"x{i}" for i in range(self.n_features_in_))

    @property
    def regularized_covariance_(self):
        return self.covariance_ + self.ridge_ * np.eye(self.n_features_in_)

    def _centered(self, x):
        check_is_fitted(self, "mean_")
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} variables, got {x.shape[-1]}")
        return x - self.mean_

    def _whiten(self, diff):
        # Solves L w = diff for every row.
        return linalg.solve_triangular(self.cholesky_, diff.T, lower=True).T

    def sq_distance(self, x):
        """Squared distance ``(x - mu)' S^-1 (x - mu)`` for one row or many."""
        w = self._whiten(np.atleast_2d(self._centered(x)))
        d2 = np.einsum("ij,ij->i", w, w)
        return float(d2[0]) if np.ndim(x) == 1 else d2

    def distance(self, x):
        return np.sqrt(self.sq_distance(x))

    def precision_dot(self, v):
        """``S^-1 v`` via the stored factorisation."""
        return linalg.cho_solve((self.cholesky_, True), np.asarray(v, dtype=float))

    def distance_grad(self, x):
        """Gradient of the squared distance, ``2 S^-1 (x - mu)``."""
        diff = self._centered(x)
        if diff.ndim != 1:
            raise ValueError("distance_grad expects a single row")
        return 2.0 * self.precision_dot(diff)

    def contains(self, x, tau):
        """``(inside, margin)`` with ``margin = tau**2 - d**2``."""
        if not tau > 0:
            raise ValueError("tau must be positive")
        margin = tau * tau - self.sq_distance(x)
        return bool(margin >= -BOUNDARY_SLACK), float(margin)

    # -- 2-D views -----------------------------------------------------
    def _pair_index(self, pair):
        names = self.names_
        try:
            return [names.index(p) for p in pair]
        except ValueError:
            raise UnknownColumnError(f"unknown variable in pair {pair}") from None

    def marginal(self, pair) -> "MahalanobisEnvelope":
        idx = self._pair_index(pair)
        sub = self.regularized_covariance_[np.ix_(idx, idx)]
        return MahalanobisEnvelope.from_moments(self.mean_[idx], sub, ridge=0.0, names=list(pair))

    def ellipse_2d(self, pair, tau, n_points=256):
        """Closed polyline of the tau-level marginal ellipse for two variables.

        The polyline starts on the major axis and its last point repeats
        the first.
        """
        if n_points < 128:
            raise ValueError("n_points must be at least 128")
        idx = self._pair_index(pair)
        sub = self.regularized_covariance_[np.ix_(idx, idx)]
        w, V = np.linalg.eigh(sub)
        order = np.argsort(w)[::-1]
        w, V = w[order], V[:, order]
        if V[0, 0] < 0:
            V[:, 0] = -V[:, 0]
        theta = np.linspace(0.0, 2.0 * np.pi, n_points)
        circle = np.vstack([np.cos(theta), np.sin(theta)])
        pts = self.mean_[idx][:, None] + tau * (V * np.sqrt(w)) @ circle
        pts[:, -1] = pts[:, 0]
        return pts.T

    def in_marginal(self, x, pair, tau):
        idx = self._pair_index(pair)
        return self.marginal(pair).contains(np.asarray(x, dtype=float)[idx], tau)

    # -- persistence ---------------------------------------------------
    def to_dict(self):
        check_is_fitted(self, "mean_")
        return {"format": "madopt.envelope", "version": 1, "names": list(self.names_),
                "mu": self.mean_.tolist(), "sigma": self.covariance_.tolist(),
                "ridge": self.ridge_}

    @classmethod
    def from_dict(cls, d) -> "MahalanobisEnvelope":
        return cls.from_moments(d["mu"], d["sigma"], ridge=d["ridge"], names=d["names"])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_ellipsoid(X, ridge="auto", names=None) -> MahalanobisEnvelope:
    return MahalanobisEnvelope(ridge=ridge, names=names).fit(X)


def write_polyline_csv(points, path, header=("x", "y")):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for a, b in points:
            w.writerow([repr(float(a)), repr(float(b))])
