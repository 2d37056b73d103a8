"""Perturbed projected gradient descent over a sequence of single deletions.

Each request removes one sample, runs ``T_i`` projected gradient steps and
publishes the result plus Gaussian noise.  In ``perfect`` mode a request
starts from the previously *published* parameters; in ``imperfect`` mode it
starts from the previous secret (noise-free) parameters.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .core import DatasetTable, LossSpec, RngStream, loss_gradient, loss_value, remove_rows
from .errors import DegenerateInput, MissingSample

MODES = ("perfect", "imperfect")


def project_ball(theta, radius: float) -> np.ndarray:
    """Euclidean projection onto ``{x : |x| <= radius}``."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    norm = float(np.linalg.norm(theta))
    if norm <= radius:
        return theta.copy()
    return theta * (radius / norm)


@dataclass(frozen=True, eq=False)
class D2DState:
    published: np.ndarray
    secret: np.ndarray
    data: DatasetTable
    mode: str
    radius: float
    sigma: float
    index: int = 0
    grad_evals: int = 0  # cost of the request that produced this state
    wall_time: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.sigma >= 0:
            raise ValueError("sigma must be nonnegative")


def _step_size(schedule, t):
    return schedule(t) if callable(schedule) else float(schedule)


def _noise(rng, index, size, sigma):
    if sigma == 0:
        return np.zeros(size)
    return sigma * rng.derive(index).generator().standard_normal(size)


def d2d_init(theta, data: DatasetTable, mode="perfect", sigma=0.0, rng=RngStream(0), radius=None) -> D2DState:
    """Wrap a trained model as request 0; the radius defaults to ``10 |theta|``."""
    theta = np.asarray(theta, dtype=np.float64)
    if radius is None:
        radius = 10.0 * float(np.linalg.norm(theta)) or 1.0
    secret = project_ball(theta, radius)
    return D2DState(secret + _noise(rng, 0, secret.size, sigma), secret, data, mode, float(radius), float(sigma))


def pgd_unlearn(
    state: D2DState,
    z,
    spec: LossSpec,
    schedule,
    rng: RngStream,
    budget: int,
    start_hook: Callable[[str, np.ndarray], None] | None = None,
) -> D2DState:
    """Serve one deletion request.

    ``schedule`` is a constant step size or a callable ``t -> eta_t``.
    ``start_hook`` is called with the name of the state field the request
    starts from (``"published"`` or ``"secret"``) and its value.
    """
    if budget < 0:
        raise ValueError("budget must be nonnegative")
    if int(z) not in set(state.data.ids.tolist()):
        raise MissingSample(f"sample {int(z)} is not in the current dataset")
    data = remove_rows(state.data, [z])
    if data.n == 0:
        raise DegenerateInput("no samples remain")
    field_name = "published" if state.mode == "perfect" else "secret"
    start = getattr(state, field_name)
    if start_hook is not None:
        start_hook(field_name, start)
    t0 = time.perf_counter()
    theta = start.copy()
    for t in range(budget):
        theta = project_ball(theta - _step_size(schedule, t) * loss_gradient(theta, data, spec), state.radius)
    index = state.index + 1
    published = theta + _noise(rng, index, theta.size, state.sigma)
    return replace(
        state,
        published=published,
        secret=theta,
        data=data,
        index=index,
        grad_evals=budget * data.n,
        wall_time=time.perf_counter() - t0,
    )


@dataclass(frozen=True)
class SequenceRecord:
    index: int
    seconds: float
    grad_evals: int
    loss_gap: float | None
    published_norm: float


def run_sequence(
    state: D2DState,
    ids,
    spec: LossSpec,
    schedule,
    budgets,
    rng: RngStream,
    oracle: Callable[[DatasetTable], np.ndarray] | None = None,
    start_hook=None,
):
    """Chain :func:`pgd_unlearn` over ``ids``; returns ``(states, records)``.

    ``budgets`` is one integer or one per request.  With an ``oracle`` (a
    map from a dataset to its retrained parameters) each record carries the
    loss gap ``L(published, D_i) - L(oracle(D_i), D_i)``.
    """
    ids = [int(i) for i in ids]
    if len(set(ids)) != len(ids):
        raise ValueError("deletion ids must be distinct")
    if np.isscalar(budgets):
        budgets = [int(budgets)] * len(ids)
    if len(budgets) != len(ids):
        raise ValueError("need one budget per request")
    states, records = [], []
    for z, T in zip(ids, budgets):
        state = pgd_unlearn(state, z, spec, schedule, rng, T, start_hook)
        gap = None
        if oracle is not None:
            ref = oracle(state.data)
            gap = loss_value(state.published, state.data, spec) - loss_value(ref, state.data, spec)
        states.append(state)
        records.append(
            SequenceRecord(state.index, state.wall_time, state.grad_evals, gap, float(np.linalg.norm(state.published)))
        )
    return states, records


def write_sequence_csv(records, path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["request", "seconds", "grad_evals", "loss_gap", "published_norm"])
        for r in records:
            w.writerow([r.index, repr(r.seconds), r.grad_evals, "" if r.loss_gap is None else repr(r.loss_gap),
                        repr(r.published_norm)])
    return Path(path)


def contraction_factor(H, eta: float) -> float:
    """Per-step error contraction of gradient descent on a quadratic with Hessian ``H``."""
    lam = np.linalg.eigvalsh(H)
    return float(np.max(np.abs(1.0 - eta * lam)))
