"""Gradient-descent training with full history caching.

Every run records ``theta_0 .. theta_T`` and the full-data gradient at each of
them.  Histories can be written to and read from the ``UKH1`` binary format so
that expensive training runs can be resumed or replayed by other processes.

UKH1 layout (all integers little-endian int64, all floats little-endian float64)::

    b"UKH1"
    meta_len                      JSON metadata length in bytes
    meta                          UTF-8 JSON (config, rng, counters, extras)
    rows, dim                     parameter block shape
    rows * dim floats             parameters, row-major
    grad_rows, dim                gradient block shape (grad_rows may be 0)
    grad_rows * dim floats        gradients, row-major
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    DatasetTable,
    LossSpec,
    RngStream,
    loss_gradient,
    remove_rows,
    value_and_gradient,
)
from .errors import DegenerateInput, HistoryMismatch, NumericalDivergence

MAGIC = b"UKH1"
DIVERGENCE_LIMIT = 1e12
NOISE_KEY = 0x6E6F697365  # child stream for objective noise
SHUFFLE_KEY = 0x73687566  # child stream for minibatch order


@dataclass(frozen=True)
class TrainConfig:
    """Plain gradient descent settings.

    With ``batch_size=None`` each of the ``steps`` iterations is one full-batch
    step.  Otherwise each iteration is one epoch of minibatch steps over a
    fresh permutation of the rows.
    """

    steps: int = 100
    learning_rate: float = 0.1
    schedule: str = "constant"  # or "inverse_time": lr / (t + 1)
    batch_size: int | None = None
    init: str = "zeros"  # or "gaussian"
    init_scale: float = 0.01

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.schedule not in ("constant", "inverse_time"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.init not in ("zeros", "gaussian"):
            raise ValueError(f"unknown init {self.init!r}")

    def lr(self, t: int) -> float:
        if self.schedule == "constant":
            return self.learning_rate
        return self.learning_rate / (t + 1)

    @property
    def full_batch(self) -> bool:
        return self.batch_size is None


@dataclass(frozen=True, eq=False)
class TrainHistory:
    params: np.ndarray  # (T+1, d): theta_0 .. theta_T
    grads: np.ndarray  # (T+1, d): full-data gradient at each theta_t
    config: TrainConfig
    rng: RngStream
    grad_evals: int = 0  # per-sample gradient evaluations spent optimising
    batch_evals: int = 0  # minibatch (or full-batch) gradient calls
    extras: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return self.params.shape[0] - 1

    @property
    def final(self) -> np.ndarray:
        return self.params[-1]

    @property
    def loss_spec(self) -> LossSpec:
        spec = self.extras.get("loss_spec")
        if spec is None:
            raise HistoryMismatch("history does not record its loss specification")
        return spec if isinstance(spec, LossSpec) else LossSpec(**spec)


def initial_params(p: int, cfg: TrainConfig, rng: RngStream) -> np.ndarray:
    if cfg.init == "zeros":
        return np.zeros(p + 1)
    return cfg.init_scale * rng.generator().standard_normal(p + 1)


def _check_loss(value, t):
    if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
        raise NumericalDivergence(f"loss {value!r} at step {t}")


def _run(data, spec, cfg, rng, init_params, shift):
    if data.n == 0:
        raise DegenerateInput("cannot train on an empty dataset")
    theta = initial_params(data.p, cfg, rng) if init_params is None else np.array(init_params, dtype=np.float64)
    T = cfg.steps
    params = np.empty((T + 1, theta.shape[0]))
    grads = np.empty_like(params)
    n = data.n
    shuffler = None if cfg.full_batch else rng.derive(SHUFFLE_KEY).generator()
    batch_evals = 0

    def full_grad(th, t):
        value, g = value_and_gradient(th, data, spec)
        if shift is not None:
            value += float(shift @ th)
            g = g + shift
        _check_loss(value, t)
        return g

    for t in range(T):
        params[t] = theta
        g = full_grad(theta, t)
        grads[t] = g
        eta = cfg.lr(t)
        if cfg.full_batch:
            theta = theta - eta * g
            batch_evals += 1
        else:
            order = shuffler.permutation(n)
            for start in range(0, n, cfg.batch_size):
                batch = data.take(np.sort(order[start : start + cfg.batch_size]))
                gb = loss_gradient(theta, batch, spec)
                if shift is not None:
                    gb = gb + shift
                theta = theta - eta * gb
                batch_evals += 1
        if not np.all(np.isfinite(theta)):
            raise NumericalDivergence(f"non-finite parameters after step {t}")
    params[T] = theta
    grads[T] = full_grad(theta, T)
    history = TrainHistory(
        params, grads, cfg, rng, grad_evals=T * n, batch_evals=batch_evals, extras={"loss_spec": spec}
    )
    return theta.copy(), history


def train_gd(data: DatasetTable, spec: LossSpec, cfg: TrainConfig, rng: RngStream, init_params=None):
    """Minimise ``spec`` on ``data``; returns ``(theta_T, history)``.

    ``init_params`` warm-starts training; otherwise the configured
    initialisation is drawn from ``rng``.
    """
    return _run(data, spec, cfg, rng, init_params, None)


def noise_vector(p: int, rng: RngStream) -> np.ndarray:
    """Standard normal draw over the weights; intercept coordinate is 0."""
    b = np.zeros(p + 1)
    b[:-1] = rng.derive(NOISE_KEY).generator().standard_normal(p)
    return b


def train_noisy(data: DatasetTable, spec: LossSpec, sigma: float, cfg: TrainConfig, rng: RngStream, init_params=None):
    """Train on ``L(theta, D) + sigma * b.theta / n`` with ``b`` drawn once.

    Returns ``(theta_T, history, b)``.  ``sigma = 0`` reproduces
    :func:`train_gd` bit for bit.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if data.n == 0:
        raise DegenerateInput("cannot train on an empty dataset")
    b = noise_vector(data.p, rng)
    shift = None if sigma == 0 else sigma * b / data.n
    theta, history = _run(data, spec, cfg, rng, init_params, shift)
    history.extras["sigma"] = float(sigma)
    return theta, history, b


def naive_retrain(data: DatasetTable, ids_to_remove, spec: LossSpec, cfg: TrainConfig, rng: RngStream):
    """Retrain from scratch without ``ids_to_remove``.

    Returns ``(theta, history, wall_time)``; the deterministic cost is in
    ``history.grad_evals``.
    """
    remaining = remove_rows(data, ids_to_remove)
    if remaining.n == 0:
        raise DegenerateInput("every sample was removed")
    start = time.perf_counter()
    theta, history = train_gd(remaining, spec, cfg, rng)
    return theta, history, time.perf_counter() - start


def replay_history(history: TrainHistory) -> np.ndarray:
    """Re-apply the stored full-batch gradients from ``theta_0``."""
    if not history.config.full_batch:
        raise ValueError("only full-batch histories can be replayed")
    theta = history.params[0].copy()
    for t in range(history.steps):
        theta = theta - history.config.lr(t) * history.grads[t]
    return theta


# -- UKH1 serialisation ------------------------------------------------------


def _write_block(fh, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    rows, dim = arr.shape
    fh.write(struct.pack("<qq", rows, dim))
    fh.write(arr.tobytes())


def _read_block(fh):
    rows, dim = struct.unpack("<qq", fh.read(16))
    buf = fh.read(8 * rows * dim)
    if len(buf) != 8 * rows * dim:
        raise ValueError("truncated UKH1 file")
    return np.frombuffer(buf, dtype="<f8").reshape(rows, dim).astype(np.float64)


def write_ukh1(path, params, grads=None, meta=None):
    params = np.atleast_2d(np.asarray(params, dtype=np.float64))
    if grads is None:
        grads = np.zeros((0, params.shape[1]))
    payload = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<q", len(payload)))
        fh.write(payload)
        _write_block(fh, params)
        _write_block(fh, np.atleast_2d(grads) if grads.size else grads.reshape(0, params.shape[1]))


def read_ukh1(path):
    """Returns ``(params, grads, meta)``."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a UKH1 file")
        (meta_len,) = struct.unpack("<q", fh.read(8))
        meta = json.loads(fh.read(meta_len).decode())
        params = _read_block(fh)
        grads = _read_block(fh)
    return params, grads, meta


def save_history(history: TrainHistory, path) -> Path:
    meta = {
        "config": asdict(history.config),
        "rng": [history.rng.seed, history.rng.stream_id],
        "grad_evals": history.grad_evals,
        "batch_evals": history.batch_evals,
        "extras": {k: (asdict(v) if isinstance(v, LossSpec) else v) for k, v in history.extras.items()},
    }
    write_ukh1(path, history.params, history.grads, meta)
    return Path(path)


def load_history(path) -> TrainHistory:
    params, grads, meta = read_ukh1(path)
    return TrainHistory(
        params,
        grads,
        TrainConfig(**meta["config"]),
        RngStream(*meta["rng"]),
        grad_evals=meta["grad_evals"],
        batch_evals=meta["batch_evals"],
        extras={k: (LossSpec(**v) if k == "loss_spec" else v) for k, v in meta.get("extras", {}).items()},
    )
