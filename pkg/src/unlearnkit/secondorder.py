"""Newton-step removal: Fisher (with optional curvature-shaped noise) and Influence.

Both mechanisms walk the removal set in mini-batches.  After each batch the
surviving table ``D'`` shrinks and one Newton correction is applied at the
current parameters.  On quadratic losses a single batch lands exactly on the
survivor optimum.

The Fisher matrix is taken to be the loss Hessian.  For the supported losses
(logistic log-likelihood and Gaussian squared error, both L2-penalised) the
two coincide.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .core import DatasetTable, LossSpec, RngStream, loss_gradient, loss_hessian, remove_rows
from .errors import DegenerateInput, SingularCurvature

EIG_FLOOR = 1e-10


@dataclass(frozen=True)
class RemovalBatchPlan:
    """Mini-batch size ``m'`` for walking the removal set; ``None`` is one batch."""

    minibatch_size: int | None = None

    def __post_init__(self):
        if self.minibatch_size is not None and self.minibatch_size < 1:
            raise ValueError("minibatch_size must be >= 1")

    def split(self, ids) -> list[np.ndarray]:
        ids = np.asarray(ids, dtype=np.int64).ravel()
        if ids.size == 0:
            return []
        size = ids.size if self.minibatch_size is None else self.minibatch_size
        return [ids[i : i + size] for i in range(0, ids.size, size)]


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    rng: RngStream = RngStream(0)

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError("sigma must be nonnegative")


def _checked_factor(F):
    F = 0.5 * (F + F.T)
    lo = float(np.linalg.eigvalsh(F)[0])
    if not lo > EIG_FLOOR:
        raise SingularCurvature(f"curvature matrix has min eigenvalue {lo:.3e}", lo)
    return cho_factor(F)


def inverse_quarter_root(F) -> np.ndarray:
    """``F^{-1/4}`` for a symmetric positive definite ``F``."""
    F = np.asarray(F, dtype=np.float64)
    F = 0.5 * (F + F.T)
    lam, Q = np.linalg.eigh(F)
    if not lam[0] > EIG_FLOOR:
        raise SingularCurvature(f"matrix has min eigenvalue {lam[0]:.3e}", float(lam[0]))
    R = (Q * lam**-0.25) @ Q.T
    return 0.5 * (R + R.T)


def _survivors(data, ids):
    remaining = remove_rows(data, ids)
    if remaining.n == 0:
        raise DegenerateInput("no samples survive the removal")
    return remaining


def fisher_unlearn(
    theta,
    data: DatasetTable,
    ids,
    noise: NoiseSpec = NoiseSpec(),
    plan: RemovalBatchPlan = RemovalBatchPlan(),
    spec: LossSpec = LossSpec(),
    noise_log: list | None = None,
) -> np.ndarray:
    """Newton correction towards the survivor optimum, one step per batch.

    When ``noise.sigma > 0`` each batch also adds ``sigma * F^{-1/4} b`` with a
    fresh standard normal ``b`` drawn from a per-batch child stream.  If
    ``noise_log`` is given, every injected vector is appended to it.  An
    empty removal set performs one step on the full table.
    """
    theta_u = np.array(theta, dtype=np.float64)
    data.positions(ids)  # surface MissingSample before any work
    batches = plan.split(ids) or [np.zeros(0, np.int64)]
    current = data
    for j, batch in enumerate(batches):
        current = _survivors(current, batch)
        delta = loss_gradient(theta_u, current, spec)
        F = loss_hessian(theta_u, current, spec)
        theta_u = theta_u - cho_solve(_checked_factor(F), delta)
        if noise.sigma > 0:
            b = noise.rng.derive(j).generator().standard_normal(theta_u.shape[0])
            injected = noise.sigma * (inverse_quarter_root(F) @ b)
            theta_u = theta_u + injected
            if noise_log is not None:
                noise_log.append(injected)
    return theta_u


def influence_unlearn(
    theta,
    data: DatasetTable,
    ids,
    plan: RemovalBatchPlan = RemovalBatchPlan(),
    spec: LossSpec = LossSpec(),
) -> np.ndarray:
    """Influence-function removal: ``theta += (m'/n') H'^{-1} grad L(theta, batch)``.

    ``H'`` is the Hessian on the survivors after the batch and ``n'`` their
    count; the ``m'/n'`` factor converts the mean batch gradient into the
    change of the survivors' mean objective.  Noise belongs to training
    (:func:`unlearnkit.trainer.train_noisy`), not to this step.
    """
    theta_u = np.array(theta, dtype=np.float64)
    data.positions(ids)
    current = data
    for batch in plan.split(ids):
        batch_table = current.subset(batch)
        current = _survivors(current, batch)
        g = loss_gradient(theta_u, batch_table, spec)
        H = loss_hessian(theta_u, current, spec)
        theta_u = theta_u + (batch.size / current.n) * cho_solve(_checked_factor(H), g)
    return theta_u
