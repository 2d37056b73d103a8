"""Approximate retraining by replaying a cached full-batch gradient history.

Replay starts at ``theta_0`` and re-runs the ``T`` original steps on the
survivors.  Burn-in steps and every ``T0``-th step afterwards evaluate the
survivor gradient directly.  The remaining steps estimate the full-data
gradient from the cached one plus a quasi-Hessian correction, then remove the
deleted rows' contribution, which only costs ``m`` per-sample gradients.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .core import DatasetTable, RngStream, per_sample_gradients, loss_gradient, remove_rows
from .errors import DegenerateInput, EmptyHistory, HistoryMismatch
from .trainer import TrainHistory

CURVATURE_FLOOR = 1e-12


@dataclass(frozen=True)
class DeltaGradConfig:
    burn_in: int = 10  # j0
    period: int = 5  # T0
    history_size: int = 2  # k
    sigma: float = 0.0

    def __post_init__(self):
        if self.burn_in < 0 or self.period < 1 or self.history_size < 1:
            raise ValueError("need burn_in >= 0, period >= 1, history_size >= 1")
        if not self.sigma >= 0:
            raise ValueError("sigma must be nonnegative")

    def is_exact(self, t: int) -> bool:
        return t < self.burn_in or (t - self.burn_in) % self.period == 0

    def exact_count(self, steps: int) -> int:
        if steps <= self.burn_in:
            return steps
        return self.burn_in + math.ceil((steps - self.burn_in) / self.period)


@dataclass
class CorrectionBuffers:
    """Parameter differences ``s`` and gradient differences ``y``."""

    dtheta: list = field(default_factory=list)
    dgrad: list = field(default_factory=list)

    def push(self, s, y):
        self.dtheta.append(np.asarray(s, dtype=np.float64))
        self.dgrad.append(np.asarray(y, dtype=np.float64))

    def __len__(self):
        return len(self.dtheta)


def _usable_pairs(buffers, k):
    pairs = []
    for s, y in zip(reversed(buffers.dtheta), reversed(buffers.dgrad)):
        if len(pairs) == k:
            break
        if float(s @ y) > CURVATURE_FLOOR:
            pairs.append((s, y))
    pairs.reverse()
    return pairs


def quasi_hessian_product(buffers: CorrectionBuffers, v, k: int) -> np.ndarray:
    """``B v`` for the limited-memory BFGS matrix built from the last ``k`` pairs.

    ``B`` starts from ``gamma * I`` with ``gamma = y.y / s.y`` of the newest
    pair and applies the direct BFGS update once per pair.  The updates are
    unrolled into rank-two terms so no matrix is formed.  Pairs violating
    ``s.y > 1e-12`` are skipped.
    """
    v = np.asarray(v, dtype=np.float64)
    pairs = _usable_pairs(buffers, k)
    if not pairs:
        raise EmptyHistory("no curvature pairs satisfy s.y > 0")
    s_last, y_last = pairs[-1]
    gamma = float(y_last @ y_last) / float(s_last @ y_last)
    a_vecs, b_vecs = [], []
    for s, y in pairs:
        Bs = gamma * s
        for a, b in zip(a_vecs, b_vecs):
            Bs = Bs + (b @ s) * b - (a @ s) * a
        a_vecs.append(Bs / math.sqrt(float(s @ Bs)))
        b_vecs.append(y / math.sqrt(float(y @ s)))
    out = gamma * v
    for a, b in zip(a_vecs, b_vecs):
        out = out + (b @ v) * b - (a @ v) * a
    return out


@dataclass(frozen=True)
class DeltaGradCost:
    exact_steps: int  # full survivor-gradient evaluations
    approx_steps: int
    sample_grad_evals: int  # per-sample gradients, comparable to TrainHistory.grad_evals
    wall_time: float


def deltagrad_unlearn(
    history: TrainHistory,
    data: DatasetTable,
    ids,
    cfg: DeltaGradConfig = DeltaGradConfig(),
    rng: RngStream | None = None,
):
    """Replay ``history`` without the rows ``ids``; returns ``(theta, DeltaGradCost)``."""
    if not history.config.full_batch:
        raise HistoryMismatch("only full-batch histories can be replayed")
    if history.params.shape[1] != data.p + 1:
        raise HistoryMismatch(
            f"history has dimension {history.params.shape[1]}, data needs {data.p + 1}"
        )
    if history.extras.get("sigma", 0.0):
        raise HistoryMismatch("history was trained on a noise-shifted objective")
    ids = np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.int64)
    survivors = remove_rows(data, ids)
    removed = data.subset(ids) if ids.size else None
    n, m = data.n, ids.size
    n_surv = survivors.n
    if n_surv == 0:
        raise DegenerateInput("every sample was removed")

    spec = history.loss_spec
    start = time.perf_counter()
    buffers = CorrectionBuffers()
    theta_u = history.params[0].copy()
    exact = approx = 0
    sample_evals = 0
    for t in range(history.steps):
        theta_t = history.params[t]
        eta = history.config.lr(t)
        removed_rows = per_sample_gradients(theta_u, removed, spec) if m else None
        if cfg.is_exact(t):
            g_surv = loss_gradient(theta_u, survivors, spec)
            sample_evals += n_surv + m
            exact += 1
            if m:
                g_full = (n_surv * g_surv + removed_rows.sum(axis=0)) / n
            else:
                g_full = g_surv
            buffers.push(theta_u - theta_t, g_full - history.grads[t])
        else:
            diff = theta_u - theta_t
            g_full = history.grads[t]
            if np.any(diff):
                g_full = g_full + quasi_hessian_product(buffers, diff, cfg.history_size)
            if m:
                g_surv = (n * g_full - removed_rows.sum(axis=0)) / n_surv
                sample_evals += m
            else:
                g_surv = g_full
            approx += 1
        theta_u = theta_u - eta * g_surv
    if cfg.sigma > 0:
        noise_rng = rng if rng is not None else history.rng.derive(0x6467)
        theta_u = theta_u + cfg.sigma * noise_rng.generator().standard_normal(theta_u.shape[0])
    cost = DeltaGradCost(exact, approx, sample_evals, time.perf_counter() - start)
    return theta_u, cost

