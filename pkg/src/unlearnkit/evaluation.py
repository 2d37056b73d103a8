"""Efficiency, effectiveness, consistency and certifiability measurements.

Everything here is a pure function of its inputs, apart from
:func:`backdoor_experiment`, which drives a mechanism end to end.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import DatasetTable, RngStream
from .errors import DegenerateInput, InvalidMeasurement, NoBaseline, ShapeError

SIMPLEX_TOL = 1e-9


def speedup(time_naive: float, time_unlearn: float) -> float:
    """Works for wall time or any deterministic cost count."""
    if not (time_naive > 0 and time_unlearn > 0):
        raise InvalidMeasurement(f"costs must be positive, got {time_naive!r} and {time_unlearn!r}")
    return time_naive / time_unlearn


def acc_err(metric_unlearned: float, metric_naive: float) -> float:
    return abs(metric_unlearned - metric_naive)


def param_diff(theta_u, theta_star) -> float:
    a = np.asarray(theta_u, dtype=np.float64)
    b = np.asarray(theta_star, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"parameter shapes differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def disagree_consistency(preds_u, preds_star) -> float:
    """Percentage of test predictions on which the two models agree."""
    a, b = np.asarray(preds_u), np.asarray(preds_star)
    if a.shape != b.shape:
        raise ShapeError("prediction vectors differ in length")
    if a.size == 0:
        raise DegenerateInput("no predictions to compare")
    return 100.0 * float(np.count_nonzero(a == b)) / a.size


def _check_simplex(p, name):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InvalidMeasurement(f"{name} is not a probability vector")
    if abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise InvalidMeasurement(f"{name} sums to {p.sum()!r}")
    return p


def kl_divergence(p, q) -> float:
    """``sum p log(p/q)`` in nats; ``inf`` when ``q`` misses mass that ``p`` has."""
    p = _check_simplex(p, "p")
    q = _check_simplex(q, "q")
    if p.shape != q.shape:
        raise InvalidMeasurement("p and q differ in length")
    support = p > 0
    if np.any(q[support] == 0):
        return math.inf
    return float(max(np.sum(p[support] * np.log(p[support] / q[support])), 0.0))


def con_kl(probs_u, probs_star) -> float:
    """Mean per-point KL between two models' class-probability rows."""
    P, Q = np.atleast_2d(probs_u), np.atleast_2d(probs_star)
    if P.shape != Q.shape:
        raise ShapeError("probability tables differ in shape")
    if P.shape[0] == 0:
        raise DegenerateInput("no test points")
    return float(np.mean([kl_divergence(p, q) for p, q in zip(P, Q)]))


def sape(a: float, b: float) -> float:
    """Symmetric absolute percentage error, with ``sape(0, 0) = 0``."""
    if not (math.isfinite(a) and math.isfinite(b)):
        raise InvalidMeasurement("metrics must be finite")
    denom = abs(a) + abs(b)
    if denom == 0:
        return 0.0
    # |a - b| <= |a| + |b|; the clamp only absorbs rounding
    return min(100.0 * abs(a - b) / denom, 100.0)


def acc_dis(metric_unlearned_on_du: float, metric_naive_on_du: float) -> float:
    return sape(metric_unlearned_on_du, metric_naive_on_du)


def alpha_beta_estimate(gaps, alpha: float) -> float:
    """Fraction of loss-gap samples exceeding ``alpha``."""
    gaps = np.asarray(gaps, dtype=np.float64)
    if gaps.size == 0:
        raise DegenerateInput("no loss-gap samples")
    return float(np.count_nonzero(gaps > alpha)) / gaps.size


def accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.size == 0:
        raise DegenerateInput("no predictions")
    return float(np.mean(pred == truth))


def r_squared(pred, truth) -> float:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    if ss_tot == 0:
        raise DegenerateInput("constant targets have no R^2")
    return 1.0 - float(np.sum((truth - pred) ** 2)) / ss_tot


# -- monitoring ---------------------------------------------------------------


@dataclass(frozen=True)
class MonitorReading:
    tilde_acc_dis: float
    tilde_acc_err: float
    tilde_speedup: float | None
    breach_acc_dis: bool = False
    breach_acc_err: bool = False

    @property
    def breach(self) -> bool:
        return self.breach_acc_dis or self.breach_acc_err


def monitor_proxies(
    current_metric: float,
    baseline_metric: float | None,
    c: float = 1.0,
    e: float = 1.0,
    retrain_time: float | None = None,
    unlearn_time: float | None = None,
    tol_acc_dis: float = math.inf,
    tol_acc_err: float = math.inf,
) -> MonitorReading:
    """Cheap stand-ins for the certifiability and effectiveness gaps.

    Both compare the current model's test metric with the metric of the last
    full retrain, scaled by calibration constants ``c`` and ``e``.  A
    proxy at or above its tolerance is a breach, so a zero tolerance asks
    for a retrain after every deletion.
    """
    if baseline_metric is None:
        raise NoBaseline("no full retrain has been recorded yet")
    tad = c * sape(current_metric, baseline_metric)
    tae = e * abs(current_metric - baseline_metric)
    tsp = None
    if retrain_time is not None and unlearn_time is not None and unlearn_time > 0:
        tsp = retrain_time / unlearn_time
    return MonitorReading(tad, tae, tsp, tad >= tol_acc_dis, tae >= tol_acc_err)


def calibrate(true_values, proxy_values) -> float:
    """``max(1, max true/proxy)`` over a window; steps with a zero proxy are skipped."""
    ratios = [t / p for t, p in zip(true_values, proxy_values) if p > 0]
    return max([1.0] + ratios)


# -- reports -----------------------------------------------------------------------


@dataclass
class EvalReport:
    method: str
    dataset: str
    deletion: dict
    speedup: float | None = None
    speedup_cost: float | None = None  # deterministic cost-model ratio
    acc_err: float | None = None
    param_diff: float | None = None
    disagree_pct: float | None = None
    kl: float | None = None
    acc_dis: float | None = None
    wall_time_naive: float | None = None
    wall_time_unlearn: float | None = None
    cost_naive: int | None = None
    cost_unlearn: int | None = None
    sigma: float | None = None
    epsilon: float | None = None
    delta: float | None = None
    notes: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def validate(self):
        for name in ("speedup", "speedup_cost", "acc_err", "param_diff", "disagree_pct", "kl", "acc_dis"):
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise InvalidMeasurement(f"{name} is not finite")
        for name in ("acc_dis", "disagree_pct"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 100.0:
                raise InvalidMeasurement(f"{name} must lie in [0, 100]")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.validate().to_dict(), sort_keys=True, indent=2, default=_jsonable) + "\n"

    CSV_FIELDS = (
        "method", "dataset", "speedup", "speedup_cost", "acc_err", "param_diff", "disagree_pct", "kl",
        "acc_dis", "wall_time_naive", "wall_time_unlearn", "cost_naive", "cost_unlearn", "sigma", "epsilon", "delta",
    )

    def to_csv_row(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_FIELDS)
        w.writerow(["" if getattr(self, f) is None else _csv_cell(getattr(self, f)) for f in self.CSV_FIELDS])
        return buf.getvalue()


def _csv_cell(v):
    return repr(v) if isinstance(v, float) else v


def _jsonable(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def write_predictions(path, ids, truth, pred, probs) -> Path:
    probs = np.atleast_2d(probs)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "true", "predicted"] + [f"prob{k}" for k in range(probs.shape[1])])
        for row in zip(ids, truth, pred, probs):
            w.writerow([int(row[0]), int(row[1]), int(row[2])] + [repr(float(v)) for v in row[3]])
    return Path(path)


def read_predictions(path):
    """Returns ``(ids, truth, pred, probs)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    ids = np.array([int(r[0]) for r in body], np.int64)
    truth = np.array([int(r[1]) for r in body], np.int64)
    pred = np.array([int(r[2]) for r in body], np.int64)
    probs = np.array([[float(v) for v in r[3:]] for r in body])
    return ids, truth, pred, probs


# -- backdoor verification ------------------------------------------------------------


@dataclass(frozen=True)
class BackdoorSpec:
    indices: tuple = (7, 8, 9)
    offsets: tuple = (6.0, 6.0, 6.0)
    target_label: int = 1
    source_label: int = 0
    poison_count: int = 100

    def __post_init__(self):
        if len(self.indices) != len(self.offsets):
            raise ValueError("one offset per trigger index")

    def apply(self, X) -> np.ndarray:
        X = np.array(X, dtype=np.float64, copy=True)
        if max(self.indices) >= X.shape[1]:
            raise ShapeError("trigger index outside the feature range")
        X[:, list(self.indices)] += np.asarray(self.offsets)
        return X


@dataclass(frozen=True)
class BackdoorResult:
    acc_dis: float
    trigger_acc_original: float
    trigger_acc_unlearned: float
    trigger_acc_naive: float
    clean_acc_unlearned: float


def poison(data: DatasetTable, spec: BackdoorSpec, rng: RngStream):
    """Stamp the trigger on ``poison_count`` source-class rows and relabel them.

    Returns ``(poisoned_table, poisoned_ids)``.
    """
    if spec.target_label >= data.class_count:
        raise ValueError("target label outside the label range")
    pool = np.flatnonzero(data.labels == spec.source_label)
    if pool.size < spec.poison_count:
        raise DegenerateInput(f"only {pool.size} source-class rows for {spec.poison_count} poisons")
    pick = np.sort(rng.generator().choice(pool, size=spec.poison_count, replace=False))
    X = np.array(data.features)
    y = np.array(data.labels)
    X[pick] = spec.apply(X[pick])
    y[pick] = spec.target_label
    return DatasetTable(X, y, data.ids, data.class_count), data.ids[pick]


def backdoor_experiment(data: DatasetTable, test: DatasetTable, spec: BackdoorSpec, method, rng: RngStream):
    """Poison, train, unlearn the poisons, and compare trigger accuracy with a naive retrain.

    ``method`` is a mechanism adapter (see :mod:`unlearnkit.methods`).
    Trigger accuracy is the fraction of triggered source-class test rows
    classified as the target label.
    """
    poisoned, du = poison(data, spec, rng.derive(1))
    src = test.features[test.labels == spec.source_label]
    triggered = spec.apply(src)
    state = method.train(poisoned)
    orig = float(np.mean(method.predict(state, triggered) == spec.target_label))
    unlearned = method.unlearn(state, poisoned, du)
    naive = method.naive(poisoned, du)
    acc_u = float(np.mean(method.predict(unlearned, triggered) == spec.target_label))
    acc_n = float(np.mean(method.predict(naive, triggered) == spec.target_label))
    clean = accuracy(method.predict(unlearned, test.features), test.labels)
    return BackdoorResult(sape(acc_u, acc_n), orig, acc_u, acc_n, clean)
