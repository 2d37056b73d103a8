"""Uniform adapters over the removal mechanisms.

Every adapter offers ``train(data)``, ``unlearn(state, data, ids)``,
``naive(data, ids)`` (the matched retrain-from-scratch baseline),
``predict``/``predict_proba`` and ``params``.  ``unlearn`` and ``naive``
stash a deterministic cost on the adapter as ``last_cost``; costs are in
per-sample gradient evaluations for parametric models and in node-statistic
operations for forests.
"""

from __future__ import annotations

import copy
from dataclasses import replace

import numpy as np

from .core import DatasetTable, LossSpec, RngStream, predict_proba, remove_rows
from .d2d import d2d_init, pgd_unlearn
from .dare import DareParams, dare_predict_many, dare_train, dare_unlearn
from .deepobliviate import block_retrain, block_train, deepobliviate_unlearn
from .deltagrad import DeltaGradConfig, deltagrad_unlearn
from .secondorder import NoiseSpec, RemovalBatchPlan, fisher_unlearn, influence_unlearn
from .sisa import random_assignment, sisa_predict_many, sisa_train, sisa_unlearn
from .trainer import TrainConfig, train_gd, train_noisy


def _linear_probs(theta, X):
    p1 = predict_proba(theta, np.atleast_2d(X))
    return np.column_stack([1.0 - p1, p1])


def _ids(ids):
    return np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.int64)


class Mechanism:
    name = "base"
    exact = False
    replay = False

    def __init__(self, spec: LossSpec, cfg: TrainConfig, rng: RngStream):
        self.spec, self.cfg, self.rng = spec, cfg, rng
        self.last_cost = 0

    def params(self, state):
        return None

    def predict_proba(self, state, X):
        return _linear_probs(self.params(state), X)

    def predict(self, state, X):
        return np.argmax(self.predict_proba(state, X), axis=1)

    def train_cost(self, state) -> int:
        return 0


class LinearMechanism(Mechanism):
    """Shared pieces for mechanisms whose state is (theta, history)."""

    def train(self, data):
        theta, hist = train_gd(data, self.spec, self.cfg, self.rng)
        return theta, hist

    def params(self, state):
        return state[0]

    def naive(self, data, ids):
        survivors = remove_rows(data, _ids(ids))
        theta, hist = train_gd(survivors, self.spec, self.cfg, self.rng)
        self.last_cost = hist.grad_evals
        return theta, hist

    def train_cost(self, state):
        return state[1].grad_evals


class Naive(LinearMechanism):
    name = "naive"
    exact = True

    def unlearn(self, state, data, ids):
        return self.naive(data, ids)


class Fisher(LinearMechanism):
    name = "fisher"

    def __init__(self, spec, cfg, rng, sigma=0.0, minibatch_size=None):
        super().__init__(spec, cfg, rng)
        self.noise = NoiseSpec(sigma, rng.derive(0x66))
        self.plan = RemovalBatchPlan(minibatch_size)

    def unlearn(self, state, data, ids):
        ids = _ids(ids)
        theta = fisher_unlearn(state[0], data, ids, self.noise, self.plan, self.spec)
        self.last_cost = _newton_cost(data, ids, self.plan)
        return theta, state[1]


class Influence(LinearMechanism):
    name = "influence"

    def __init__(self, spec, cfg, rng, sigma=0.0, minibatch_size=None):
        super().__init__(spec, cfg, rng)
        self.sigma = sigma
        self.plan = RemovalBatchPlan(minibatch_size)

    def train(self, data):
        theta, hist, _ = train_noisy(data, self.spec, self.sigma, self.cfg, self.rng)
        return theta, hist

    def naive(self, data, ids):
        survivors = remove_rows(data, _ids(ids))
        theta, hist, _ = train_noisy(survivors, self.spec, self.sigma, self.cfg, self.rng)
        self.last_cost = hist.grad_evals
        return theta, hist

    def unlearn(self, state, data, ids):
        ids = _ids(ids)
        theta = influence_unlearn(state[0], data, ids, self.plan, self.spec)
        self.last_cost = _newton_cost(data, ids, self.plan)
        return theta, state[1]


def _newton_cost(data, ids, plan):
    # one gradient and one Hessian over the survivors per batch; a Hessian row
    # costs p + 1 gradient-equivalents
    cost, n = 0, data.n
    for batch in plan.split(ids) or [ids]:
        n -= len(batch)
        cost += n * (data.p + 2)
    return cost


class DeltaGrad(LinearMechanism):
    name = "deltagrad"
    replay = True  # unlearn always replays the original history

    def __init__(self, spec, cfg, rng, burn_in=10, period=5, history_size=2, sigma=0.0):
        super().__init__(spec, cfg, rng)
        self.dg = DeltaGradConfig(burn_in, period, history_size, sigma)

    def unlearn(self, state, data, ids):
        theta, cost = deltagrad_unlearn(state[1], data, _ids(ids), self.dg, self.rng.derive(0x6467))
        self.last_cost = cost.sample_grad_evals
        return theta, state[1]


class DescentToDelete(LinearMechanism):
    name = "d2d"

    def __init__(self, spec, cfg, rng, budget=50, sigma=0.0, mode="perfect", radius=None):
        super().__init__(spec, cfg, rng)
        self.budget, self.sigma, self.mode, self.radius = budget, sigma, mode, radius

    def train(self, data):
        theta, hist = train_gd(data, self.spec, self.cfg, self.rng)
        return d2d_init(theta, data, self.mode, self.sigma, self.rng.derive(0x64), self.radius), hist

    def params(self, state):
        return state[0].published

    def unlearn(self, state, data, ids):
        s = state[0]
        cost = 0
        for z in _ids(ids):
            s = pgd_unlearn(s, z, self.spec, self.cfg.learning_rate, self.rng.derive(0x64), self.budget)
            cost += s.grad_evals
        self.last_cost = cost
        return s, state[1]

    def naive(self, data, ids):
        theta, hist = super().naive(data, ids)
        return d2d_init(theta, remove_rows(data, _ids(ids)), self.mode, 0.0, self.rng, self.radius), hist


class Sisa(Mechanism):
    name = "sisa"
    exact = True

    def __init__(self, spec, cfg, rng, shards=4, slices=5, epochs=None, aggregation="majority_vote"):
        super().__init__(spec, cfg, rng)
        self.S, self.R = shards, slices
        self.epochs = tuple(epochs) if epochs is not None else (cfg.steps,) * slices
        self.aggregation = aggregation

    def train(self, data):
        return sisa_train(data, self.spec, self.S, self.R, self.epochs, self.rng, self.cfg, self.aggregation)

    def unlearn(self, state, data, ids):
        model, cost = sisa_unlearn(state, data, _ids(ids))
        self.last_cost = cost.sample_grad_evals
        return model

    def naive(self, data, ids):
        ids = _ids(ids)
        a_ids, shard, slice_ = random_assignment(data, self.S, self.R, self.rng)
        keep = ~np.isin(a_ids, ids)
        model = sisa_train(
            remove_rows(data, ids), self.spec, self.S, self.R, self.epochs, self.rng, self.cfg,
            self.aggregation, assignment=(a_ids[keep], shard[keep], slice_[keep]),
        )
        self.last_cost = model.train_cost
        return model

    def params(self, state):
        return state.shard_models.ravel()

    def predict_proba(self, state, X):
        return sisa_predict_many(state, X)[1]

    def predict(self, state, X):
        return sisa_predict_many(state, X)[0]

    def train_cost(self, state):
        return state.train_cost


class Dare(Mechanism):
    name = "dare"
    exact = True

    def __init__(self, spec, cfg, rng, trees=10, d_max=10, k=5, p_tilde=None, d_rmax=0):
        super().__init__(spec, cfg, rng)
        self.params_ = DareParams(trees, d_max, k, p_tilde, d_rmax)

    def train(self, data):
        return dare_train(data, self.params_, self.rng)

    def unlearn(self, state, data, ids):
        forest = copy.deepcopy(state)
        total = 0
        for z in _ids(ids):
            forest, cost = dare_unlearn(forest, z)
            total += cost.total
        self.last_cost = total
        return forest

    def naive(self, data, ids):
        forest = dare_train(remove_rows(data, _ids(ids)), self.params_, self.rng)
        self.last_cost = forest.train_cost
        return forest

    def predict_proba(self, state, X):
        p1 = dare_predict_many(state, X)
        return np.column_stack([1.0 - p1, p1])

    def train_cost(self, state):
        return state.train_cost


class DeepObliviate(Mechanism):
    name = "deepobliviate"

    def __init__(self, spec, cfg, rng, blocks=8, eps=0.0):
        super().__init__(spec, cfg, rng)
        self.B, self.eps = blocks, eps

    def train(self, data):
        return block_train(data, self.B, self.spec, self.cfg, self.rng)

    def unlearn(self, state, data, ids):
        run, cost = state, 0
        for z in _ids(ids):
            res = deepobliviate_unlearn(run, data, int(z), self.eps)
            run = res.run
            cost += res.cost["sample_grad_evals"]
        self.last_cost = cost
        return run

    def naive(self, data, ids):
        run = block_train(data, self.B, self.spec, self.cfg, self.rng)
        theta = block_retrain(run, data, _ids(ids))
        params = run.params.copy()
        params[-1] = theta
        self.last_cost = (data.n - len(_ids(ids))) * self.cfg.steps
        return replace(run, params=params)

    def params(self, state):
        return state.params[-1]

    def train_cost(self, state):
        return sum(len(b) for b in state.blocks) * self.cfg.steps


REGISTRY = {
    cls.name: cls
    for cls in (Naive, Fisher, Influence, DeltaGrad, DescentToDelete, Sisa, Dare, DeepObliviate)
}


def build_method(name: str, spec: LossSpec, cfg: TrainConfig, rng: RngStream, **hyper) -> Mechanism:
    try:
        cls = REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown method {name!r}; choose from {sorted(REGISTRY)}") from None
    return cls(spec, cfg, rng, **hyper)
