"""Single-hidden-layer neural surrogates for Power, TE and THR.

The network itself (:class:`MLPSurrogate`) works entirely in scaled units and
follows the scikit-learn estimator protocol. :class:`SurrogateModel` binds a
network to the shared scaler so predictions can be made in engineering units,
and :class:`SurrogateSet` bundles the three targets with their conformal
calibrations.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .dataset import INPUT_NAMES, TARGET_NAMES, Dataset
from .exceptions import DegenerateColumnError, DivergenceError, SchemaError
from .scaling import RangeScaler

FORMAT_VERSION = 1
HIDDEN_GRID = (8, 16, 24, 31, 40)
DEFAULT_HIDDEN = {"Power": 31, "TE": 16, "THR": 31}


def _tanh(a):
    return np.tanh(a)


def _tanh_prime(a, h):
    return 1.0 - h * h


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _identity(a):
    return a


def _relu(a):
    return np.maximum(a, 0.0)


ACTIVATIONS = {
    "tanh": (_tanh, _tanh_prime),
    "sigmoid": (_sigmoid, lambda a, h: h * (1.0 - h)),
    "identity": (_identity, lambda a, h: np.ones_like(a)),
    "relu": (_relu, lambda a, h: (a > 0).astype(float)),
}


@dataclass
class TrainConfig:
    """Optimiser and regularisation settings for one network.

    ``l1`` weights the L1 penalty on all connection weights inside the loss;
    ``weight_decay`` is applied decoupled from the Adam update.
    """

    epochs: int = 5000
    batch_size: int | None = None
    learning_rate: float = 1e-3
    l1: float = 1e-7
    weight_decay: float = 1e-5
    seed: int = 0
    patience: int = 200
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.patience < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, patience and learning_rate must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.l1 < 0 or self.weight_decay < 0:
            raise ValueError("l1 and weight_decay must be non-negative")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")

    def estimator_params(self) -> dict:
        return {"max_epochs": self.epochs, "batch_size": self.batch_size,
                "learning_rate": self.learning_rate, "l1": self.l1,
                "weight_decay": self.weight_decay, "random_state": self.seed,
                "patience": self.patience, "validation_fraction": self.validation_fraction}

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        return cls(**d)


class MLPSurrogate(RegressorMixin, BaseEstimator):
    """Shallow regression network ``W2 . act(W1 x + b1) + b2``.

    Parameters
    ----------
    hidden : int, default=16
        Hidden-layer width.
    activation : {"tanh", "sigmoid", "relu", "identity"}, default="tanh"
    learning_rate : float, default=1e-3
        Adam step size.
    max_epochs : int, default=5000
    batch_size : int or None, default=None
        ``None`` trains full-batch.
    l1 : float, default=1e-7
        L1 penalty on connection weights, added to the MSE loss.
    weight_decay : float, default=1e-5
        Decoupled decay applied to connection weights after each Adam step.
    patience : int, default=200
        Early-stopping patience on the validation loss.
    validation_fraction : float, default=0.1
        Share of the training rows held out for early stopping when no
        explicit validation set is passed to :meth:`fit`.
    random_state : int, default=0
    """

    def __init__(self, hidden=16, activation="tanh", learning_rate=1e-3, max_epochs=5000,
                 batch_size=None, l1=1e-7, weight_decay=1e-5, patience=200,
                 validation_fraction=0.1, random_state=0):
        self.hidden = hidden
        self.activation = activation
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.l1 = l1
        self.weight_decay = weight_decay
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    # -- parameters -----------------------------------------------------
    def _init_params(self, input_dim):
        if self.hidden < 1:
            raise ValueError(f"hidden must be >= 1, got {self.hidden}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        rng = np.random.default_rng(self.random_state)
        b_in = 1.0 / math.sqrt(input_dim)
        b_hid = 1.0 / math.sqrt(self.hidden)
        self.W1_ = rng.uniform(-b_in, b_in, size=(self.hidden, input_dim))
        self.b1_ = rng.uniform(-b_in, b_in, size=self.hidden)
        self.W2_ = rng.uniform(-b_hid, b_hid, size=self.hidden)
        self.b2_ = float(rng.uniform(-b_hid, b_hid))
        self.n_features_in_ = input_dim
        return self

    def set_weights(self, W1, b1, W2, b2):
        W1 = np.array(W1, dtype=float, ndmin=2)
        self.W1_ = W1
        self.b1_ = np.array(b1, dtype=float).reshape(W1.shape[0])
        self.W2_ = np.array(W2, dtype=float).reshape(W1.shape[0])
        self.b2_ = float(b2)
        self.hidden = W1.shape[0]
        self.n_features_in_ = W1.shape[1]
        return self

    def _params(self):
        return [self.W1_, self.b1_, self.W2_, np.array([self.b2_])]

    def _check_x(self, X):
        check_is_fitted(self, "W1_")
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} inputs, got {X.shape[-1]}")
        return X

    # -- evaluation -----------------------------------------------------
    def _hidden(self, X):
        act, _ = ACTIVATIONS[self.activation]
        A = X @ self.W1_.T + self.b1_
        return A, act(A)

    def predict(self, X):
        X = self._check_x(X)
        _, H = self._hidden(X)
        return H @ self.W2_ + self.b2_

    def forward(self, x) -> float:
        """Scaled prediction for a single scaled input row."""
        x = self._check_x(x)
        if x.ndim != 1:
            raise ValueError("forward expects a single row; use predict for batches")
        return float(self.predict(x))

    def grad_input(self, x) -> np.ndarray:
        """Gradient of the scaled output with respect to the scaled inputs."""
        x = self._check_x(x)
        if x.ndim != 1:
            raise ValueError("grad_input expects a single row")
        _, deriv = ACTIVATIONS[self.activation]
        A, H = self._hidden(x)
        return (self.W2_ * deriv(A, H)) @ self.W1_

    def value_and_grad(self, x):
        x = self._check_x(x)
        _, deriv = ACTIVATIONS[self.activation]
        A, H = self._hidden(x)
        return float(H @ self.W2_ + self.b2_), (self.W2_ * deriv(A, H)) @ self.W1_

    def weight_l1(self) -> float:
        return float(np.abs(self.W1_).sum() + np.abs(self.W2_).sum())

    # -- training -------------------------------------------------------
    def _loss_and_grads(self, X, y):
        _, deriv = ACTIVATIONS[self.activation]
        A, H = self._hidden(X)
        r = H @ self.W2_ + self.b2_ - y
        mse = float(np.mean(r * r))
        g = 2.0 * r / len(y)
        gW2 = H.T @ g
        gb2 = g.sum()
        dA = np.outer(g, self.W2_) * deriv(A, H)
        gW1 = dA.T @ X
        gb1 = dA.sum(axis=0)
        loss = mse
        if self.l1 > 0:
            loss += self.l1 * self.weight_l1()
            gW1 = gW1 + self.l1 * np.sign(self.W1_)
            gW2 = gW2 + self.l1 * np.sign(self.W2_)
        return mse, loss, [gW1, gb1, gW2, np.array([gb2])]

    def _mse(self, X, y):
        r = self.predict(X) - y
        return float(np.mean(r * r))

    def fit(self, X, y, X_val=None, y_val=None):
        """Train with Adam, L1 penalty and decoupled weight decay.

        Early stopping restores the parameters with the lowest validation
        MSE. ``loss_history_`` holds the penalised training loss per epoch.
        """
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float).ravel()
        if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
            raise ValueError("X must be 2-D with one row per target value")
        rng = np.random.default_rng(self.random_state)
        if X_val is None:
            n_val = max(1, int(round(self.validation_fraction * len(y))))
            if len(y) - n_val < 1:
                raise ValueError("too few rows for a validation split")
            perm = rng.permutation(len(y))
            X_val, y_val = X[perm[:n_val]], y[perm[:n_val]]
            X, y = X[perm[n_val:]], y[perm[n_val:]]
        else:
            X_val = np.asarray(X_val, dtype=float)
            y_val = np.asarray(y_val, dtype=float).ravel()
        self._init_params(X.shape[1])

        beta1, beta2, eps = 0.9, 0.999, 1e-8
        m = [np.zeros_like(p) for p in self._params()]
        v = [np.zeros_like(p) for p in self._params()]
        batch = len(y) if self.batch_size is None else min(self.batch_size, len(y))
        history, val_history = [], []
        best = (math.inf, None, 0)
        step = 0
        wait = 0
        for epoch in range(self.max_epochs):
            order = np.arange(len(y)) if batch == len(y) else rng.permutation(len(y))
            epoch_loss = 0.0
            for start in range(0, len(y), batch):
                idx = order[start:start + batch]
                _, loss, grads = self._loss_and_grads(X[idx], y[idx])
                if not math.isfinite(loss):
                    raise DivergenceError(f"non-finite training loss at epoch {epoch}", epoch=epoch)
                epoch_loss += loss * len(idx)
                step += 1
                params = self._params()
                for k, (p, gk) in enumerate(zip(params, grads)):
                    m[k] = beta1 * m[k] + (1 - beta1) * gk
                    v[k] = beta2 * v[k] + (1 - beta2) * gk * gk
                    mh = m[k] / (1 - beta1 ** step)
                    vh = v[k] / (1 - beta2 ** step)
                    p -= self.learning_rate * mh / (np.sqrt(vh) + eps)
                    if k in (0, 2) and self.weight_decay > 0:
                        p -= self.learning_rate * self.weight_decay * p
                self.b2_ = float(params[3][0])
            history.append(epoch_loss / len(y))
            val = self._mse(X_val, y_val)
            if not math.isfinite(val):
                raise DivergenceError(f"non-finite validation loss at epoch {epoch}", epoch=epoch)
            val_history.append(val)
            if val < best[0]:
                best = (val, [p.copy() for p in self._params()], epoch)
                wait = 0
            else:
                wait += 1
                if wait >= self.patience:
                    break
        W1, b1, W2, b2 = best[1]
        self.set_weights(W1, b1, W2, b2[0])
        self.loss_history_ = np.array(history)
        self.val_history_ = np.array(val_history)
        self.best_epoch_ = best[2]
        self.n_epochs_ = len(history)
        return self

    # -- persistence ----------------------------------------------------
    def to_dict(self) -> dict:
        check_is_fitted(self, "W1_")
        return {
            "input_dim": int(self.n_features_in_),
            "hidden": int(self.hidden),
            "activation": self.activation,
            "W1": self.W1_.tolist(),
            "b1": self.b1_.tolist(),
            "W2": self.W2_.tolist(),
            "b2": float(self.b2_),
        }

    @classmethod
    def from_dict(cls, d) -> "MLPSurrogate":
        model = cls(hidden=int(d["hidden"]), activation=d["activation"])
        return model.set_weights(d["W1"], d["b1"], d["W2"], d["b2"])


def init_mlp(input_dim=len(INPUT_NAMES), hidden=16, activation="tanh", seed=0) -> MLPSurrogate:
    """Untrained network with PyTorch-style uniform fan-in initialisation."""
    return MLPSurrogate(hidden=hidden, activation=activation, random_state=seed)._init_params(input_dim)


# -- metrics --------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    r2: float
    rmse: float

    def to_dict(self):
        return asdict(self)


def r2_score(y, y_hat) -> float:
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    y_bar = y.mean()
    sst = float(np.sum((y - y_bar) ** 2))
    if sst == 0.0:
        raise DegenerateColumnError("R^2 is undefined for a constant target")
    return 1.0 - float(np.sum((y - y_hat) ** 2)) / sst


def rmse(y, y_hat) -> float:
    r = np.asarray(y, dtype=float) - np.asarray(y_hat, dtype=float)
    return math.sqrt(float(np.mean(r * r)))


# -- engineering-unit wrapper ---------------------------------------------

class SurrogateModel:
    """A trained network for one target plus the scaler it was trained with."""

    def __init__(self, mlp: MLPSurrogate, scaler: RangeScaler, target: str,
                 input_names=INPUT_NAMES, train_config: TrainConfig | None = None,
                 metrics: dict | None = None):
        self.mlp = mlp
        self.scaler = scaler
        self.target = target
        self.input_names = tuple(input_names)
        self.train_config = train_config
        self.metrics = dict(metrics or {})

    def __repr__(self):
        return f"SurrogateModel(target={self.target!r}, hidden={self.mlp.hidden})"

    @property
    def scaler_ref(self) -> str:
        return self.scaler.fingerprint

    def scale_inputs(self, X):
        return self.scaler.transform(X, columns=self.input_names)

    def predict_scaled(self, Xs):
        return self.mlp.predict(Xs)

    def predict(self, X):
        """Engineering-unit prediction from engineering-unit inputs."""
        if isinstance(X, Dataset):
            X = X.columns(self.input_names)
        ys = self.mlp.predict(self.scale_inputs(X))
        return self.scaler.unscale_value(self.target, ys)

    def forward(self, xs) -> float:
        return self.mlp.forward(xs)

    def grad_input(self, xs):
        return self.mlp.grad_input(xs)

    def value_and_grad(self, xs):
        return self.mlp.value_and_grad(xs)

    def to_dict(self) -> dict:
        return {
            "format": "madopt.surrogate",
            "version": FORMAT_VERSION,
            "target": self.target,
            "input_names": list(self.input_names),
            "scaler_ref": self.scaler_ref,
            "network": self.mlp.to_dict(),
            "train_config": asdict(self.train_config) if self.train_config else None,
            "metrics": self.metrics,
        }

    @classmethod
    def from_dict(cls, d, scaler: RangeScaler) -> "SurrogateModel":
        if d.get("format") != "madopt.surrogate" or d.get("version") != FORMAT_VERSION:
            raise SchemaError("unsupported surrogate file format")
        if d["scaler_ref"] != scaler.fingerprint:
            raise SchemaError(f"model for {d['target']} was trained with a different scaler")
        cfg = TrainConfig.from_dict(d["train_config"]) if d.get("train_config") else None
        return cls(MLPSurrogate.from_dict(d["network"]), scaler, d["target"],
                   d["input_names"], cfg, d.get("metrics"))


def train(model: MLPSurrogate, train_data: Dataset, config: TrainConfig, target: str,
          scaler: RangeScaler, validation: Dataset | None = None):
    """Fit ``model`` on one target of ``train_data``; returns ``(model, loss_history)``."""
    model.set_params(**config.estimator_params())
    Xs = scaler.transform(train_data, columns=INPUT_NAMES)
    ys = scaler.scale_value(target, train_data.column(target))
    if validation is not None:
        model.fit(Xs, ys, scaler.transform(validation, columns=INPUT_NAMES),
                  scaler.scale_value(target, validation.column(target)))
    else:
        model.fit(Xs, ys)
    return model, model.loss_history_


def evaluate(model: SurrogateModel, data: Dataset) -> Metrics:
    """R^2 and RMSE in the target's engineering units."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    y = data.column(model.target)
    y_hat = model.predict(data)
    return Metrics(r2_score(y, y_hat), rmse(y, y_hat))


def select_hidden(train_data: Dataset, target: str, scaler: RangeScaler, config: TrainConfig,
                  grid=HIDDEN_GRID, activation="tanh"):
    """Pick the hidden width with the lowest validation RMSE.

    The validation rows are carved from ``train_data`` with ``config.seed``;
    returns ``(best_width, {width: rmse})``.
    """
    Xs = scaler.transform(train_data, columns=INPUT_NAMES)
    ys = scaler.scale_value(target, train_data.column(target))
    rng = np.random.default_rng(config.seed + 7919)
    perm = rng.permutation(len(ys))
    n_val = max(1, int(round(config.validation_fraction * len(ys))))
    va, tr = perm[:n_val], perm[n_val:]
    scores = {}
    for h in grid:
        net = MLPSurrogate(hidden=h, activation=activation, **config.estimator_params())
        net.fit(Xs[tr], ys[tr], Xs[va], ys[va])
        scores[h] = rmse(ys[va], net.predict(Xs[va]))
    best = min(grid, key=lambda h: (scores[h], h))
    return best, scores


# -- conformal intervals --------------------------------------------------

@dataclass
class ConformalCalibration:
    """Inductive conformal calibration from absolute residuals."""

    alpha: float
    quantile: float
    scores: np.ndarray = field(repr=False)

    @property
    def n_cal(self) -> int:
        return len(self.scores)

    def to_dict(self):
        return {"alpha": self.alpha, "quantile": self.quantile, "scores": self.scores.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["alpha"]), float(d["quantile"]), np.array(d["scores"], dtype=float))


def conformal_quantile(scores, alpha) -> float:
    """The ``ceil((n + 1)(1 - alpha))``-th smallest score."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    s = np.sort(np.asarray(scores, dtype=float))
    n = len(s)
    k = math.ceil((n + 1) * (1.0 - alpha) - 1e-9)
    if k > n:
        raise ValueError(f"calibration set of {n} rows is too small for alpha={alpha}")
    return float(s[k - 1])


def calibrate_conformal(model: SurrogateModel, calib: Dataset, alpha: float = 0.05) -> ConformalCalibration:
    scores = np.abs(calib.column(model.target) - model.predict(calib))
    return ConformalCalibration(alpha, conformal_quantile(scores, alpha), np.sort(scores))


def predict_interval(model: SurrogateModel, calib: ConformalCalibration | None, X):
    """Symmetric conformal band ``prediction -/+ quantile`` in engineering units."""
    if calib is None:
        raise ValueError(f"surrogate for {model.target} has no conformal calibration")
    y = model.predict(X)
    return y - calib.quantile, y + calib.quantile


def coverage(model: SurrogateModel, calib: ConformalCalibration, data: Dataset) -> float:
    lo, hi = predict_interval(model, calib, data)
    y = data.column(model.target)
    return float(np.mean((y >= lo) & (y <= hi)))


# -- the three-target bundle ----------------------------------------------

@dataclass
class SurrogateSet:
    scaler: RangeScaler
    models: dict[str, SurrogateModel]
    conformal: dict[str, ConformalCalibration] = field(default_factory=dict)

    def __getitem__(self, target) -> SurrogateModel:
        return self.models[target]

    def predict(self, X) -> dict[str, np.ndarray]:
        return {t: m.predict(X) for t, m in self.models.items()}

    def interval(self, target, X):
        return predict_interval(self.models[target], self.conformal.get(target), X)

    def save(self, directory) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        written = [d / "scaler.json"]
        written[0].write_text(json.dumps(self.scaler.to_dict(), indent=1) + "\n")
        for t, m in self.models.items():
            payload = m.to_dict()
            if t in self.conformal:
                payload["conformal"] = self.conformal[t].to_dict()
            p = d / f"model_{t}.json"
            p.write_text(json.dumps(payload) + "\n")
            written.append(p)
        return written

    @classmethod
    def load(cls, directory) -> "SurrogateSet":
        d = Path(directory)
        scaler = RangeScaler.from_dict(json.loads((d / "scaler.json").read_text()))
        models, conformal = {}, {}
        for t in TARGET_NAMES:
            payload = json.loads((d / f"model_{t}.json").read_text())
            models[t] = SurrogateModel.from_dict(payload, scaler)
            if payload.get("conformal"):
                conformal[t] = ConformalCalibration.from_dict(payload["conformal"])
        return cls(scaler, models, conformal)


def fit_surrogates(train_data: Dataset, config: TrainConfig | None = None, hidden="default",
                   calib: Dataset | None = None, alpha: float = 0.05,
                   targets=TARGET_NAMES) -> SurrogateSet:
    """Train one network per target on a scaler fitted to ``train_data``.

    ``hidden`` is ``"default"`` (16 for TE, 31 otherwise), ``"grid"`` for
    validation-RMSE selection over :data:`HIDDEN_GRID`, or a mapping of
    target to width.
    """
    config = config or TrainConfig()
    scaler = RangeScaler().fit(train_data)
    models = {}
    for t in targets:
        if hidden == "default":
            h = DEFAULT_HIDDEN[t]
        elif hidden == "grid":
            h, _ = select_hidden(train_data, t, scaler, config)
        else:
            h = int(hidden[t])
        net, _ = train(MLPSurrogate(hidden=h), train_data, config, t, scaler)
        sm = SurrogateModel(net, scaler, t, train_config=config)
        sm.metrics["train"] = evaluate(sm, train_data).to_dict()
        models[t] = sm
    conformal = {}
    if calib is not None:
        for t, m in models.items():
            conformal[t] = calibrate_conformal(m, calib, alpha)
            m.metrics["calibration_quantile"] = conformal[t].quantile
    return SurrogateSet(scaler, models, conformal)
