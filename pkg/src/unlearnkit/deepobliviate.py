"""Block-sequential training and residual-memory-guided partial retraining.

The table is split into ``B`` stratified blocks and a model is trained on them
in sequence, keeping every intermediate ``theta_i``.  To forget a sample in
block ``d``, training is replayed from ``theta_{d-1}`` without it.  After each
replayed block the L1 gap between the original and replayed block updates (the
temporal residual memory) is fitted with ``a x^-alpha + b``.  Replay stops
once the fitted slope is flatter than ``eps``, and the untouched tail of the
original run is stitched on.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.optimize import least_squares, minimize_scalar

from . import _kernels
from .core import DatasetTable, LossSpec, RngStream, remove_rows
from .errors import DegenerateInput, InsufficientSeries, MissingSample, ShapeError
from .trainer import TrainConfig, initial_params, train_gd

PARTITION_KEY = 0x626C6F636B
MIN_WINDOW = 4
MIN_FIT_POINTS = 3
RIDGE = 1e-8
ALPHA_GRID = np.linspace(0.0, 10.0, 201)


@dataclass(frozen=True, eq=False)
class BlockTrainRun:
    """``blocks[i]`` holds the ids of block ``i + 1``; ``params[i]`` is ``theta_i``."""

    blocks: tuple
    params: np.ndarray  # (B+1, p+1), row 0 is the initialisation
    spec: LossSpec
    config: TrainConfig
    rng: RngStream
    layout: tuple = ()  # fixed parameter order: feature names then "intercept"

    @property
    def block_count(self) -> int:
        return len(self.blocks)

    def block_of(self, sample_id) -> int:
        """1-based block index containing ``sample_id``."""
        for i, ids in enumerate(self.blocks):
            if np.any(ids == sample_id):
                return i + 1
        raise MissingSample(f"sample {int(sample_id)} is in no block")

    def block_stream(self, i: int) -> RngStream:
        return self.rng.derive(i)


def default_layout(p: int) -> tuple:
    return tuple(f"w{j}" for j in range(p)) + ("intercept",)


def stratified_blocks(data: DatasetTable, B: int, rng: RngStream) -> tuple:
    """Round-robin over label-grouped shuffled rows: sizes and per-label counts differ by at most one."""
    if B < 1:
        raise ValueError("B must be >= 1")
    if B > data.n:
        raise DegenerateInput(f"{data.n} samples cannot fill {B} blocks")
    perm = rng.derive(PARTITION_KEY).generator().permutation(data.n)
    order = perm[np.argsort(data.labels[perm], kind="stable")]
    which = np.arange(data.n) % B
    return tuple(np.sort(data.ids[order[which == i]]) for i in range(B))


def _train_block(data, ids, spec, cfg, stream, theta):
    if len(ids) == 0:
        return theta.copy()
    theta, _ = train_gd(data.subset(ids), spec, cfg, stream, init_params=theta)
    return theta


def block_train(data: DatasetTable, B: int, spec: LossSpec, cfg: TrainConfig, rng: RngStream) -> BlockTrainRun:
    """Train block by block, warm-starting each block from its predecessor."""
    blocks = stratified_blocks(data, B, rng)
    params = np.empty((B + 1, data.p + 1))
    params[0] = initial_params(data.p, cfg, rng.derive(0))
    for i, ids in enumerate(blocks, start=1):
        params[i] = _train_block(data, ids, spec, cfg, rng.derive(i), params[i - 1])
    return BlockTrainRun(blocks, params, spec, cfg, rng, default_layout(data.p))


def block_retrain(run: BlockTrainRun, data: DatasetTable, ids) -> np.ndarray:
    """Naive block-sequential retrain without ``ids``, keeping blocks and seeds."""
    gone = np.asarray(list(ids), dtype=np.int64)
    theta = run.params[0].copy()
    for i, block in enumerate(run.blocks, start=1):
        theta = _train_block(data, block[~np.isin(block, gone)], run.spec, run.config, run.block_stream(i), theta)
    return theta


def temporal_influence(theta_i, theta_prev) -> np.ndarray:
    theta_i = np.asarray(theta_i, dtype=np.float64)
    theta_prev = np.asarray(theta_prev, dtype=np.float64)
    if theta_i.shape != theta_prev.shape:
        raise ShapeError(f"parameter shapes differ: {theta_i.shape} vs {theta_prev.shape}")
    return theta_i - theta_prev


def check_layout(run: BlockTrainRun, layout) -> None:
    """Raise ShapeError when ``layout`` is not the run's fixed parameter order."""
    if tuple(layout) != tuple(run.layout):
        raise ShapeError("parameter order differs from the order fixed at training time")


# -- detrended fluctuation analysis ---------------------------------------------


class DfaResult(NamedTuple):
    alpha: float
    degenerate: bool
    windows: np.ndarray
    fluctuations: np.ndarray


def dfa_windows(n: int) -> np.ndarray:
    w, out = MIN_WINDOW, []
    while w <= n // 4:
        out.append(w)
        w *= 2
    return np.array(out, dtype=np.int64)


def dfa_exponent(series) -> DfaResult:
    """Order-1 DFA over windows ``4, 8, 16, ...`` no larger than a quarter of the series.

    A series with no fluctuation at all returns ``alpha = 0`` flagged as degenerate.
    """
    x = np.asarray(series, dtype=np.float64)
    windows = dfa_windows(x.size)
    if windows.size < 2:
        raise InsufficientSeries(f"DFA needs at least {8 * MIN_WINDOW} points, got {x.size}")
    profile = np.cumsum(x - x.mean())
    F = _kernels.dfa_fluctuations(np.ascontiguousarray(profile), windows)
    scale = max(float(np.max(np.abs(profile))), 1.0)
    if np.any(F <= 1e-12 * scale):
        return DfaResult(0.0, True, windows, F)
    alpha = float(np.polyfit(np.log(windows), np.log(F), 1)[0])
    return DfaResult(alpha, False, windows, F)


# -- power-law fit ----------------------------------------------------------------


class PowerLawFit(NamedTuple):
    a: float
    alpha: float
    b: float
    source: str  # "dfa" or "direct"

    def value(self, x):
        return self.a * np.asarray(x, dtype=np.float64) ** -self.alpha + self.b

    def slope(self, x):
        return -self.a * self.alpha * np.asarray(x, dtype=np.float64) ** (-self.alpha - 1.0)


def _linear_ab(x, y, alpha):
    A = np.column_stack([x**-alpha, np.ones_like(x)])
    a, b = np.linalg.solve(A.T @ A + RIDGE * np.eye(2), A.T @ y)
    return a, b, float(np.sum((A @ np.array([a, b]) - y) ** 2))


def _direct_fit(x, y):
    sse = [_linear_ab(x, y, al)[2] for al in ALPHA_GRID]
    i = int(np.argmin(sse))
    lo, hi = ALPHA_GRID[max(i - 1, 0)], ALPHA_GRID[min(i + 1, ALPHA_GRID.size - 1)]
    if hi > lo:
        alpha = float(minimize_scalar(lambda al: _linear_ab(x, y, al)[2], bounds=(lo, hi), method="bounded",
                                      options={"xatol": 1e-12}).x)
    else:
        alpha = float(lo)
    a, b, _ = _linear_ab(x, y, alpha)
    res = least_squares(
        lambda q: q[0] * x ** -q[1] + q[2] - y,
        x0=[a, alpha, b],
        bounds=([-np.inf, 0.0, -np.inf], [np.inf, np.inf, np.inf]),
        xtol=1e-15, ftol=1e-15, gtol=1e-15,
    )
    return float(res.x[0]), float(res.x[1]), float(res.x[2])


def fit_power_law(x, y) -> PowerLawFit:
    """Fit ``a x^-alpha + b``; alpha comes from DFA when the series is long enough."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    try:
        alpha = dfa_exponent(y).alpha
    except InsufficientSeries:
        return PowerLawFit(*_direct_fit(x, y), "direct")
    a, b, _ = _linear_ab(x, y, alpha)
    return PowerLawFit(float(a), alpha, float(b), "dfa")


@dataclass
class ResidualSeries:
    x: list = field(default_factory=list)
    delta: list = field(default_factory=list)
    fit: PowerLawFit | None = None
    g: float | None = None

    def append(self, x, delta):
        if delta < 0:
            raise ValueError("residuals are norms and cannot be negative")
        self.x.append(float(x))
        self.delta.append(float(delta))
        if len(self.delta) >= MIN_FIT_POINTS:
            self.fit = fit_power_law(self.x, self.delta)
            self.g = float(self.fit.slope(self.x[-1]))
        return self.g

    def should_stop(self, eps) -> bool:
        return self.g is not None and abs(self.g) < eps

    def write_csv(self, path) -> Path:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "delta", "fitted", "g"])
            for x, d in zip(self.x, self.delta):
                fitted = "" if self.fit is None else repr(float(self.fit.value(x)))
                g = "" if self.fit is None else repr(float(self.fit.slope(x)))
                w.writerow([int(x), repr(d), fitted, g])
        return Path(path)


def stop_index(xs, deltas, eps) -> int | None:
    """First position at which the running fit signals a stop, if any."""
    series = ResidualSeries()
    for i, (x, d) in enumerate(zip(xs, deltas)):
        series.append(x, d)
        if series.should_stop(eps):
            return i
    return None


class UnlearnResult(NamedTuple):
    params: np.ndarray
    t_stop: int
    cost: dict
    run: BlockTrainRun
    residuals: ResidualSeries


def deepobliviate_unlearn(run: BlockTrainRun, data: DatasetTable, z, eps: float) -> UnlearnResult:
    """Forget ``z``; the returned run has its cached parameters replaced by the replayed ones."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    d = run.block_of(int(z))
    B = run.block_count
    theta = run.params
    new_blocks = list(run.blocks)
    new_blocks[d - 1] = new_blocks[d - 1][new_blocks[d - 1] != int(z)]
    replayed = {d - 1: theta[d - 1].copy()}
    series = ResidualSeries()
    start = time.perf_counter()
    evals = 0
    t = 0
    while True:
        j = d + t
        replayed[j] = _train_block(data, new_blocks[j - 1], run.spec, run.config, run.block_stream(j), replayed[j - 1])
        evals += len(new_blocks[j - 1]) * run.config.steps
        V = temporal_influence(theta[j], theta[j - 1])
        VU = temporal_influence(replayed[j], replayed[j - 1])
        series.append(j, float(np.sum(np.abs(V - VU))))
        if series.should_stop(eps) or j == B:
            break
        t += 1
    out = replayed[d + t] + (theta[B] - theta[d + t])
    params = theta.copy()
    for j in range(d, d + t + 1):
        params[j] = replayed[j]
    # the deployed model is the stitched one
    params[B] = out
    new_run = replace(run, blocks=tuple(new_blocks), params=params)
    cost = {"blocks_retrained": t + 1, "sample_grad_evals": evals, "wall_time": time.perf_counter() - start}
    return UnlearnResult(out, t, cost, new_run, series)
