"""Sharded, isolated, sliced and aggregated training with exact removal.

Each shard owns a linear model trained slice by slice on the cumulative union
of its slices, warm-starting from the previous checkpoint.  Every
``(shard, slice)`` resume point draws from its own keyed random stream, so
retraining from a checkpoint reproduces retraining from scratch bit for bit
once the survivors keep their shard and slice assignment.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import DatasetTable, LossSpec, RngStream, predict_proba, decision_function
from .errors import DegenerateInput, MissingSample, ShapeError
from .trainer import TrainConfig, initial_params, train_gd, write_ukh1, read_ukh1

ASSIGN_KEY = 0x61737369676E
AGGREGATIONS = ("majority_vote", "mean_probability")


@dataclass(frozen=True, eq=False)
class SisaModel:
    """Ensemble of shard models plus every intermediate checkpoint.

    ``checkpoints[i, j]`` is shard ``i`` after its first ``j`` slices, so
    ``checkpoints[:, 0]`` are the initialisations and ``checkpoints[:, R]``
    the deployed shard models.  ``assign_ids``/``assign_shard``/``assign_slice``
    form the index map of the samples currently in the model.
    """

    shard_count: int
    slice_count: int
    epochs: tuple
    checkpoints: np.ndarray  # (S, R+1, p+1)
    assign_ids: np.ndarray
    assign_shard: np.ndarray
    assign_slice: np.ndarray
    spec: LossSpec
    train_config: TrainConfig
    rng: RngStream
    aggregation: str = "majority_vote"
    train_cost: int = 0

    @property
    def shard_models(self) -> np.ndarray:
        return self.checkpoints[:, -1]

    def index_map(self) -> dict:
        return {
            int(i): (int(s), int(r))
            for i, s, r in zip(self.assign_ids, self.assign_shard, self.assign_slice)
        }

    def resume_stream(self, shard: int, slice_: int) -> RngStream:
        return self.rng.derive(shard, slice_)


@dataclass(frozen=True)
class RetrainCost:
    sample_grad_evals: int
    wall_time: float
    shards_retrained: tuple


def random_assignment(data: DatasetTable, S: int, R: int, rng: RngStream):
    """Uniform random shards of near-equal size, each cut into ``R`` slices."""
    perm = rng.derive(ASSIGN_KEY).generator().permutation(data.n)
    shard = np.empty(data.n, np.int64)
    slice_ = np.empty(data.n, np.int64)
    for i, chunk in enumerate(np.array_split(perm, S)):
        shard[chunk] = i
        for j, piece in enumerate(np.array_split(chunk, R)):
            slice_[piece] = j
    return data.ids.copy(), shard, slice_


def _slice_config(base: TrainConfig, epochs: int) -> TrainConfig:
    return replace(base, steps=int(epochs))


def _train_shard(data, member_pos, member_slice, start_slice, state, epochs, spec, base_cfg, model_rng, shard):
    """Run slices ``start_slice..R-1`` for one shard; returns (checkpoints, cost)."""
    R = len(epochs)
    saved = []
    cost = 0
    for j in range(start_slice, R):
        pos = np.sort(member_pos[member_slice <= j])
        if pos.size:
            cfg = _slice_config(base_cfg, epochs[j])
            state, hist = train_gd(data.take(pos), spec, cfg, model_rng.derive(shard, j + 1), init_params=state)
            cost += hist.grad_evals
        saved.append(state.copy())
    return saved, cost


def sisa_train(
    data: DatasetTable,
    spec: LossSpec,
    S: int,
    R: int,
    epochs,
    rng: RngStream,
    train_config: TrainConfig = TrainConfig(),
    aggregation: str = "majority_vote",
    assignment=None,
) -> SisaModel:
    """Train ``S`` shard models over ``R`` cumulative slices.

    ``epochs[j]`` full-batch steps are taken on slice union ``0..j``.
    ``assignment`` is an optional ``(ids, shard, slice)`` triple; without it
    a uniform random partition is drawn from ``rng``.
    """
    if S < 1 or R < 1:
        raise ValueError("need S >= 1 and R >= 1")
    epochs = tuple(int(e) for e in epochs)
    if len(epochs) != R or min(epochs) < 0:
        raise ValueError(f"need {R} nonnegative epoch counts")
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    if assignment is None:
        if data.n < S * R:
            raise DegenerateInput(f"{data.n} samples cannot fill {S} shards x {R} slices")
        ids, shard, slice_ = random_assignment(data, S, R, rng)
    else:
        ids, shard, slice_ = (np.asarray(a, dtype=np.int64) for a in assignment)
        if data.n == 0:
            raise DegenerateInput("cannot train on an empty dataset")
    pos = data.positions(ids)
    if pos.size != data.n:
        raise ShapeError("assignment must cover every row exactly once")
    row_shard = np.empty(data.n, np.int64)
    row_slice = np.empty(data.n, np.int64)
    row_shard[pos] = shard
    row_slice[pos] = slice_

    ckpt = np.empty((S, R + 1, data.p + 1))
    total = 0
    for i in range(S):
        init = initial_params(data.p, train_config, rng.derive(i, 0))
        ckpt[i, 0] = init
        members = np.flatnonzero(row_shard == i)
        saved, cost = _train_shard(data, members, row_slice[members], 0, init, epochs, spec, train_config, rng, i)
        ckpt[i, 1:] = saved
        total += cost
    return SisaModel(
        S, R, epochs, ckpt, data.ids.copy(), row_shard, row_slice, spec, train_config, rng, aggregation, total
    )


def sisa_unlearn(model: SisaModel, data: DatasetTable, ids):
    """Remove ``ids`` by retraining affected shards from their last clean checkpoint.

    ``data`` must contain every sample still in the model.  Returns
    ``(new_model, RetrainCost)``; the input model is not modified.
    """
    ids = np.unique(np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.int64))
    order = np.argsort(model.assign_ids)
    sorted_ids = model.assign_ids[order]
    at = np.searchsorted(sorted_ids, ids)
    at = np.clip(at, 0, max(sorted_ids.size - 1, 0))
    if ids.size and (sorted_ids.size == 0 or np.any(sorted_ids[at] != ids)):
        bad = ids[(sorted_ids.size == 0) | (sorted_ids[at] != ids)][0]
        raise MissingSample(f"sample {int(bad)} is not in the model")
    gone = order[at] if ids.size else np.zeros(0, np.int64)
    keep = np.ones(model.assign_ids.size, bool)
    keep[gone] = False

    new_ids = model.assign_ids[keep]
    new_shard = model.assign_shard[keep]
    new_slice = model.assign_slice[keep]
    alive = data.subset(new_ids)
    pos = alive.positions(new_ids)
    row_shard = np.empty(alive.n, np.int64)
    row_slice = np.empty(alive.n, np.int64)
    row_shard[pos] = new_shard
    row_slice[pos] = new_slice

    ckpt = model.checkpoints.copy()
    start = time.perf_counter()
    cost = 0
    touched = []
    for i in sorted(set(model.assign_shard[gone].tolist())):
        r = int(model.assign_slice[gone][model.assign_shard[gone] == i].min())
        members = np.flatnonzero(row_shard == i)
        saved, c = _train_shard(
            alive, members, row_slice[members], r, ckpt[i, r].copy(),
            model.epochs, model.spec, model.train_config, model.rng, i,
        )
        ckpt[i, r + 1 :] = saved
        cost += c
        touched.append(i)
    wall = time.perf_counter() - start
    new_model = replace(
        model, checkpoints=ckpt, assign_ids=new_ids, assign_shard=new_shard, assign_slice=new_slice
    )
    return new_model, RetrainCost(cost, wall, tuple(touched))


def _shard_positive_prob(model, X):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.checkpoints.shape[2] - 1:
        raise ShapeError(f"expected {model.checkpoints.shape[2] - 1} features, got {X.shape[1]}")
    if model.spec.kind == "logistic":
        return np.stack([predict_proba(th, X) for th in model.shard_models])
    return np.stack([np.clip(decision_function(th, X), 0.0, 1.0) for th in model.shard_models])


def sisa_predict_many(model: SisaModel, X):
    """Labels ``(n,)`` and class-probability rows ``(n, 2)`` for a batch."""
    p1 = _shard_positive_prob(model, X)  # (S, n)
    if model.aggregation == "mean_probability":
        pos = p1.mean(axis=0)
        probs = np.column_stack([1.0 - pos, pos])
    else:
        votes = (p1 > 0.5).sum(axis=0)
        pos = votes / model.shard_count
        probs = np.column_stack([1.0 - pos, pos])
    # argmax picks the lowest label on ties
    return np.argmax(probs, axis=1), probs


def sisa_predict(model: SisaModel, x):
    labels, probs = sisa_predict_many(model, np.asarray(x, dtype=np.float64).reshape(1, -1))
    return int(labels[0]), probs[0]


def expected_speedup(S: int, R: int) -> float:
    """Expected speed-up for one uniformly placed deletion with equal epochs.

    Cost is counted in sample-gradients under cumulative-union slicing, and
    the baseline trains one model on all data with the same slice schedule.
    """
    full = sum(range(1, R + 1))
    retrain = sum(sum(range(j, R + 1)) for j in range(1, R + 1)) / R
    return S * full / retrain


def theoretical_max_speedup(S: int, R: int) -> float:
    return (R + 1) * S / 2


# -- on-disk store ------------------------------------------------------------


def save_sisa(model: SisaModel, run_dir) -> Path:
    """One UKH1 file per ``(shard, slice)`` checkpoint plus ``index_map.csv``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "S": model.shard_count,
        "R": model.slice_count,
        "epochs": list(model.epochs),
        "spec": [model.spec.kind, model.spec.l2_lambda],
        "train_config": {k: getattr(model.train_config, k) for k in model.train_config.__dataclass_fields__},
        "rng": [model.rng.seed, model.rng.stream_id],
        "aggregation": model.aggregation,
        "train_cost": model.train_cost,
    }
    for i in range(model.shard_count):
        for j in range(model.slice_count + 1):
            write_ukh1(run_dir / f"shard{i:03d}_slice{j:03d}.ukh", model.checkpoints[i, j], None, meta)
    with open(run_dir / "index_map.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "shard", "slice"])
        w.writerows(zip(model.assign_ids.tolist(), model.assign_shard.tolist(), model.assign_slice.tolist()))
    return run_dir


def load_sisa(run_dir) -> SisaModel:
    run_dir = Path(run_dir)
    with open(run_dir / "index_map.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    ids = np.array([int(r["id"]) for r in rows], np.int64)
    shard = np.array([int(r["shard"]) for r in rows], np.int64)
    slice_ = np.array([int(r["slice"]) for r in rows], np.int64)
    _, _, meta = read_ukh1(run_dir / "shard000_slice000.ukh")
    S, R = meta["S"], meta["R"]
    ckpt = None
    for i in range(S):
        for j in range(R + 1):
            params, _, _ = read_ukh1(run_dir / f"shard{i:03d}_slice{j:03d}.ukh")
            if ckpt is None:
                ckpt = np.empty((S, R + 1, params.shape[1]))
            ckpt[i, j] = params[0]
    return SisaModel(
        S, R, tuple(meta["epochs"]), ckpt, ids, shard, slice_,
        LossSpec(*meta["spec"]), TrainConfig(**meta["train_config"]), RngStream(*meta["rng"]),
        meta["aggregation"], meta["train_cost"],
    )
