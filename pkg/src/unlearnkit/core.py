"""Datasets, penalised losses and their derivatives, and keyed randomness.

Parameter vectors are plain float64 arrays of length ``p + 1``: the ``p``
feature weights followed by an intercept.  The intercept is never
regularised.  Every loss is a mean over samples plus ``l2_lambda / 2 * |w|^2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.special import expit

from .errors import DegenerateInput, MissingSample, ShapeError

_MASK64 = (1 << 64) - 1


def _readonly(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DatasetTable:
    """Immutable feature matrix with integer labels and stable sample ids."""

    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    class_count: int = 2

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim == 1 and X.size == 0:
            X = X.reshape(0, 0)
        if X.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {X.shape}")
        y = np.asarray(self.labels).astype(np.int64, copy=False).ravel()
        ids = np.asarray(self.ids).astype(np.int64, copy=False).ravel()
        n = X.shape[0]
        if y.shape[0] != n or ids.shape[0] != n:
            raise ShapeError(
                f"row count mismatch: features {n}, labels {y.shape[0]}, ids {ids.shape[0]}"
            )
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if n and (y.min() < 0 or y.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if np.unique(ids).size != n:
            raise ValueError("sample ids must be unique")
        object.__setattr__(self, "features", _readonly(X))
        object.__setattr__(self, "labels", _readonly(y))
        object.__setattr__(self, "ids", _readonly(ids))

    @classmethod
    def from_arrays(cls, X, y, ids=None, class_count=None):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if ids is None:
            ids = np.arange(X.shape[0], dtype=np.int64)
        if class_count is None:
            class_count = max(2, int(y.max()) + 1 if y.size else 2)
        return cls(X, y, ids, class_count)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.n

    def positions(self, ids: Iterable[int]) -> np.ndarray:
        """Row positions of ``ids``; raises MissingSample for unknown ids."""
        ids = np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.int64)
        order = np.argsort(self.ids, kind="stable")
        sorted_ids = self.ids[order]
        idx = np.searchsorted(sorted_ids, ids)
        idx = np.clip(idx, 0, max(self.n - 1, 0))
        if self.n == 0 and ids.size:
            raise MissingSample(f"unknown sample id {int(ids[0])}")
        bad = sorted_ids[idx] != ids if ids.size else np.zeros(0, bool)
        if bad.any():
            raise MissingSample(f"unknown sample id {int(ids[bad][0])}")
        return order[idx]

    def take(self, positions) -> "DatasetTable":
        positions = np.asarray(positions, dtype=np.int64)
        return DatasetTable(
            self.features[positions], self.labels[positions], self.ids[positions], self.class_count
        )

    def subset(self, ids) -> "DatasetTable":
        """Rows for ``ids`` in table order (not in the order given)."""
        pos = np.sort(self.positions(ids))
        return self.take(pos)


def remove_rows(data: DatasetTable, ids) -> DatasetTable:
    """Return ``data`` without the rows in ``ids``; survivor order is kept."""
    ids = np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.int64)
    if ids.size == 0:
        return data
    pos = data.positions(ids)
    keep = np.ones(data.n, dtype=bool)
    keep[pos] = False
    return data.take(np.flatnonzero(keep))


@dataclass(frozen=True)
class LossSpec:
    kind: str = "logistic"
    l2_lambda: float = 0.0

    def __post_init__(self):
        if self.kind not in ("logistic", "squared"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not self.l2_lambda >= 0:
            raise ValueError("l2_lambda must be nonnegative")


def _check(params, data):
    params = np.asarray(params, dtype=np.float64)
    if data.n == 0:
        raise DegenerateInput("loss is undefined on an empty dataset")
    if params.ndim != 1 or params.shape[0] != data.p + 1:
        raise ShapeError(f"expected {data.p + 1} parameters, got shape {params.shape}")
    return params


def decision_function(params, X) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    return X @ params[:-1] + params[-1]


def predict_proba(params, X) -> np.ndarray:
    """Positive-class probability of a logistic model."""
    return expit(decision_function(params, X))


def per_sample_loss(params, data: DatasetTable, spec: LossSpec) -> np.ndarray:
    """Unregularised loss of every row."""
    params = _check(params, data)
    z = decision_function(params, data.features)
    y = data.labels.astype(np.float64)
    if spec.kind == "logistic":
        return np.logaddexp(0.0, z) - y * z
    return 0.5 * (z - y) ** 2


def loss_value(params, data: DatasetTable, spec: LossSpec) -> float:
    params = _check(params, data)
    w = params[:-1]
    return float(np.mean(per_sample_loss(params, data, spec)) + 0.5 * spec.l2_lambda * (w @ w))


def _residual(params, data, spec):
    z = decision_function(params, data.features)
    y = data.labels.astype(np.float64)
    if spec.kind == "logistic":
        return expit(z) - y
    return z - y


def _gradient_from_residual(params, X, r, l2_lambda):
    n = X.shape[0]
    g = np.empty_like(params)
    g[:-1] = X.T @ r / n + l2_lambda * params[:-1]
    g[-1] = r.sum() / n
    return g


def loss_gradient(params, data: DatasetTable, spec: LossSpec) -> np.ndarray:
    params = _check(params, data)
    return _gradient_from_residual(params, data.features, _residual(params, data, spec), spec.l2_lambda)


def value_and_gradient(params, data: DatasetTable, spec: LossSpec):
    """``(loss_value, loss_gradient)`` sharing one pass over the data.

    The gradient is bit-identical to :func:`loss_gradient`.
    """
    params = _check(params, data)
    z = decision_function(params, data.features)
    y = data.labels.astype(np.float64)
    if spec.kind == "logistic":
        losses = np.logaddexp(0.0, z) - y * z
        r = expit(z) - y
    else:
        losses = 0.5 * (z - y) ** 2
        r = z - y
    w = params[:-1]
    value = float(np.mean(losses) + 0.5 * spec.l2_lambda * (w @ w))
    return value, _gradient_from_residual(params, data.features, r, spec.l2_lambda)


def per_sample_gradients(params, data: DatasetTable, spec: LossSpec) -> np.ndarray:
    """Row ``i`` is the gradient of sample ``i``'s loss plus the full penalty.

    The penalty is folded into each row so that the mean of the rows equals
    :func:`loss_gradient` up to rounding.
    """
    params = _check(params, data)
    r = _residual(params, data, spec)
    G = np.empty((data.n, params.shape[0]))
    G[:, :-1] = data.features * r[:, None] + spec.l2_lambda * params[:-1]
    G[:, -1] = r
    return G


def loss_hessian(params, data: DatasetTable, spec: LossSpec) -> np.ndarray:
    params = _check(params, data)
    X = data.features
    n, p = X.shape
    if spec.kind == "logistic":
        s = expit(decision_function(params, X))
        wts = s * (1.0 - s)
    else:
        wts = np.ones(n)
    H = np.empty((p + 1, p + 1))
    Xw = X * wts[:, None]
    H[:p, :p] = X.T @ Xw / n
    H[:p, p] = Xw.sum(axis=0) / n
    H[p, :p] = H[:p, p]
    H[p, p] = wts.sum() / n
    H[:p, :p] += spec.l2_lambda * np.eye(p)
    # exact symmetry regardless of BLAS blocking
    return 0.5 * (H + H.T)


def ridge_solution(data: DatasetTable, l2_lambda: float) -> np.ndarray:
    """Closed-form minimiser of the squared loss (normal equations)."""
    X = np.hstack([data.features, np.ones((data.n, 1))])
    y = data.labels.astype(np.float64)
    reg = np.eye(data.p + 1) * l2_lambda
    reg[-1, -1] = 0.0
    return np.linalg.solve(X.T @ X / data.n + reg, X.T @ y / data.n)


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RngStream:
    """A (seed, stream id) pair naming one reproducible random sequence.

    ``generator()`` always starts the sequence afresh, so two calls yield
    identical draws.  ``derive`` names independent child streams, which is how
    resume points, trees and blocks get their own keyed randomness.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)
        object.__setattr__(self, "stream_id", int(self.stream_id) & _MASK64)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.stream_id])))

    def derive(self, *keys: int) -> "RngStream":
        sid = self.stream_id
        for k in keys:
            sid = _splitmix64(sid ^ _splitmix64(int(k) & _MASK64))
        return RngStream(self.seed, sid)
