"""Forests of deletion-friendly decision trees.

Nodes above depth ``d_rmax`` split on a uniformly random attribute at a
uniformly random threshold.  Deeper nodes keep, for up to ``p_tilde``
attributes, up to ``k`` sampled valid thresholds together with enough
statistics to recompute their Gini index without touching the data.
Deleting a sample updates those statistics along its path and retrains a
subtree only when the chosen split stops being the best (or stops being
valid).

Per-threshold statistics: left count and left positives (right side follows
from the node totals) plus, for the two attribute values adjacent to the
threshold, their counts and positives.  A threshold is valid while both
adjacent values are present and they are not both pure with the same label.

All trees share one "database": the feature matrix, labels and an alive mask.
Leaves point into it by row position.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .core import DatasetTable, RngStream
from .errors import DegenerateInput, MissingSample, ShapeError

MAGIC = b"UKF1"


@dataclass(frozen=True)
class DareParams:
    trees: int = 10
    d_max: int = 10
    k: int = 5
    p_tilde: int | None = None  # None: all attributes
    d_rmax: int = 0

    def __post_init__(self):
        if self.trees < 1 or self.d_max < 0 or self.k < 1 or self.d_rmax < 0:
            raise ValueError("need trees >= 1, d_max >= 0, k >= 1, d_rmax >= 0")
        if self.p_tilde is not None and self.p_tilde < 1:
            raise ValueError("p_tilde must be >= 1")


class Leaf:
    __slots__ = ("depth", "rows", "n", "n_pos", "value")

    def __init__(self, depth, rows, y):
        self.depth = depth
        self.rows = np.asarray(rows, dtype=np.int64)
        self.n = int(self.rows.size)
        self.n_pos = int(y[self.rows].sum())
        self.value = _leaf_value(self.n, self.n_pos)


def _leaf_value(n, n_pos):
    # an emptied root leaf has no data; predict the uninformed midpoint
    return n_pos / n if n else 0.5


class RandomNode:
    __slots__ = ("depth", "n", "n_pos", "attr", "thr", "a_min", "a_max", "c_min", "c_max", "left", "right")


class ThresholdSet:
    """Cached statistics for the sampled thresholds of one attribute."""

    __slots__ = ("v", "nl", "pl", "vlo", "clo", "plo", "vhi", "chi", "phi")

    FIELDS = ("v", "nl", "pl", "vlo", "clo", "plo", "vhi", "chi", "phi")

    def valid(self):
        both = (self.clo > 0) & (self.chi > 0)
        same_pure = ((self.plo == 0) & (self.phi == 0)) | ((self.plo == self.clo) & (self.phi == self.chi))
        return both & ~same_pure

    def take(self, idx):
        out = ThresholdSet()
        for f in self.FIELDS:
            setattr(out, f, getattr(self, f)[idx].copy())
        return out

    @staticmethod
    def concat(a, b):
        out = ThresholdSet()
        for f in ThresholdSet.FIELDS:
            setattr(out, f, np.concatenate([getattr(a, f), getattr(b, f)]))
        return out

    def __len__(self):
        return self.v.size


class GreedyNode:
    __slots__ = ("depth", "n", "n_pos", "attr", "thr", "cands", "left", "right")


# -- statistics --------------------------------------------------------------


def _gini_weighted(n, n_pos, nl, pl):
    """Size-weighted Gini impurity of a split, per threshold."""
    nl = nl.astype(np.float64)
    pl = pl.astype(np.float64)
    nr = n - nl
    pr = n_pos - pl
    with np.errstate(divide="ignore", invalid="ignore"):
        gl = np.where(nl > 0, 1.0 - (pl / nl) ** 2 - ((nl - pl) / nl) ** 2, 0.0)
        gr = np.where(nr > 0, 1.0 - (pr / nr) ** 2 - ((nr - pr) / nr) ** 2, 0.0)
    return (nl * gl + nr * gr) / n


def _midpoint(lo, hi):
    v = lo + (hi - lo) / 2.0
    return np.where(v < hi, v, lo)


def all_valid_thresholds(col, labels) -> ThresholdSet:
    """Every valid threshold of one attribute, with its statistics."""
    order = np.argsort(col, kind="stable")
    values, counts, pos = _kernels.scan_groups(np.ascontiguousarray(col[order]), np.ascontiguousarray(labels[order]))
    ts = ThresholdSet()
    if values.size < 2:
        for f in ThresholdSet.FIELDS:
            setattr(ts, f, np.zeros(0, np.float64 if f in ("v", "vlo", "vhi") else np.int64))
        return ts
    cum_c = np.cumsum(counts)[:-1]
    cum_p = np.cumsum(pos)[:-1]
    ts.vlo, ts.vhi = values[:-1].copy(), values[1:].copy()
    ts.clo, ts.chi = counts[:-1].copy(), counts[1:].copy()
    ts.plo, ts.phi = pos[:-1].copy(), pos[1:].copy()
    ts.nl, ts.pl = cum_c.astype(np.int64), cum_p.astype(np.int64)
    ts.v = _midpoint(ts.vlo, ts.vhi)
    return ts.take(np.flatnonzero(ts.valid()))


def _best(node):
    """``(gini, attr, v)`` minimising Gini over valid cached thresholds, or None."""
    best = None
    for a in sorted(node.cands):
        ts = node.cands[a]
        ok = np.flatnonzero(ts.valid())
        if ok.size == 0:
            continue
        g = _gini_weighted(node.n, node.n_pos, ts.nl[ok], ts.pl[ok])
        # lexicographic tie-break on (gini, attribute, threshold)
        i = np.lexsort((ts.v[ok], g))[0]
        cand = (float(g[i]), a, float(ts.v[ok][i]))
        if best is None or cand < best:
            best = cand
    return best


# -- the forest ---------------------------------------------------------------


class DareForest:
    """Trees plus the shared sample database.

    Deletions mutate the forest in place.
    """

    def __init__(self, X, y, ids, params: DareParams, rng: RngStream):
        self.X = np.ascontiguousarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        self.ids = np.asarray(ids, dtype=np.int64)
        self.alive = np.ones(self.y.size, bool)
        self.params = params
        self.rng = rng
        self.generators = [rng.derive(t).generator() for t in range(params.trees)]
        self.roots = []
        self.train_cost = 0
        self._pos = {int(i): k for k, i in enumerate(self.ids)}
        self._flat = None

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def p_tilde(self):
        return self.p if self.params.p_tilde is None else min(self.params.p_tilde, self.p)

    @property
    def n_alive(self):
        return int(self.alive.sum())

    # building

    def _build(self, rows, depth, gen, work):
        y = self.y
        n = rows.size
        n_pos = int(y[rows].sum())
        if n == 0 or n_pos == 0 or n_pos == n or depth >= self.params.d_max:
            work[0] += n
            return Leaf(depth, rows, y)
        if depth < self.params.d_rmax:
            return self._build_random(rows, depth, gen, work, n, n_pos)
        return self._build_greedy(rows, depth, gen, work, n, n_pos)

    def _build_random(self, rows, depth, gen, work, n, n_pos):
        Xn = self.X[rows]
        work[0] += n * self.p
        mins, maxs = Xn.min(axis=0), Xn.max(axis=0)
        usable = np.flatnonzero(mins < maxs)
        if usable.size == 0:
            return Leaf(depth, rows, self.y)
        a = int(usable[gen.integers(usable.size)])
        v = float(gen.uniform(mins[a], maxs[a]))
        if not v < maxs[a]:
            v = float(mins[a])
        node = RandomNode()
        node.depth, node.n, node.n_pos, node.attr, node.thr = depth, n, n_pos, a, v
        node.a_min, node.a_max = float(mins[a]), float(maxs[a])
        node.c_min = int(np.sum(Xn[:, a] == mins[a]))
        node.c_max = int(np.sum(Xn[:, a] == maxs[a]))
        go_left = Xn[:, a] <= v
        node.left = self._build(rows[go_left], depth + 1, gen, work)
        node.right = self._build(rows[~go_left], depth + 1, gen, work)
        return node

    def _sample_attr(self, rows, a, gen, work, k, exclude=None):
        work[0] += rows.size
        ts = all_valid_thresholds(self.X[rows, a], self.y[rows])
        if exclude is not None and len(ts):
            ts = ts.take(np.flatnonzero(~np.isin(ts.v, exclude)))
        if len(ts) > k:
            ts = ts.take(np.sort(gen.choice(len(ts), size=k, replace=False)))
        return ts

    def _fill_attributes(self, node, rows, gen, work):
        """Add attributes in random order until ``p_tilde`` have valid thresholds."""
        for a in gen.permutation(self.p):
            if len(node.cands) >= self.p_tilde:
                break
            a = int(a)
            if a in node.cands:
                continue
            ts = self._sample_attr(rows, a, gen, work, self.params.k)
            if len(ts):
                node.cands[a] = ts

    def _build_greedy(self, rows, depth, gen, work, n, n_pos):
        node = GreedyNode()
        node.depth, node.n, node.n_pos, node.cands = depth, n, n_pos, {}
        self._fill_attributes(node, rows, gen, work)
        best = _best(node)
        if best is None:
            return Leaf(depth, rows, self.y)
        _, node.attr, node.thr = best
        go_left = self.X[rows, node.attr] <= node.thr
        node.left = self._build(rows[go_left], depth + 1, gen, work)
        node.right = self._build(rows[~go_left], depth + 1, gen, work)
        return node

    # helpers

    def _rows_below(self, node):
        if isinstance(node, Leaf):
            return node.rows
        return np.concatenate([self._rows_below(node.left), self._rows_below(node.right)])

    def _alive_rows_below(self, node):
        rows = np.sort(self._rows_below(node))
        return rows[self.alive[rows]]

    def position(self, sample_id) -> int:
        try:
            return self._pos[int(sample_id)]
        except KeyError:
            raise MissingSample(f"sample {int(sample_id)} is not in the forest") from None

    # deletion

    def _retrain(self, node, gen, cost):
        rows = self._alive_rows_below(node)
        work = [0]
        new = self._build(rows, node.depth, gen, work)
        cost.retrain_work += work[0]
        cost.subtrees_retrained += 1
        return new

    def _delete(self, node, r, gen, cost):
        x, yz = self.X[r], int(self.y[r])
        if isinstance(node, Leaf):
            node.rows = node.rows[node.rows != r]
            node.n -= 1
            node.n_pos -= yz
            node.value = _leaf_value(node.n, node.n_pos)
            cost.stats_touched += 1
            return node
        node.n -= 1
        node.n_pos -= yz
        cost.stats_touched += 1
        if node.n_pos == 0 or node.n_pos == node.n:
            return self._retrain(node, gen, cost)
        if isinstance(node, RandomNode):
            return self._delete_random(node, r, x, gen, cost)
        return self._delete_greedy(node, r, x, yz, gen, cost)

    def _delete_random(self, node, r, x, gen, cost):
        xa = x[node.attr]
        rows = None
        if xa == node.a_min:
            node.c_min -= 1
            if node.c_min == 0:
                rows = self._alive_rows_below(node)
                col = self.X[rows, node.attr]
                cost.retrain_work += rows.size
                node.a_min = float(col.min())
                node.c_min = int(np.sum(col == node.a_min))
        if xa == node.a_max:
            node.c_max -= 1
            if node.c_max == 0:
                rows = self._alive_rows_below(node) if rows is None else rows
                col = self.X[rows, node.attr]
                cost.retrain_work += rows.size
                node.a_max = float(col.max())
                node.c_max = int(np.sum(col == node.a_max))
        if not (node.a_min <= node.thr < node.a_max):
            return self._retrain(node, gen, cost)
        if xa <= node.thr:
            node.left = self._delete(node.left, r, gen, cost)
        else:
            node.right = self._delete(node.right, r, gen, cost)
        return node

    def _delete_greedy(self, node, r, x, yz, gen, cost):
        broken = []
        for a, ts in node.cands.items():
            xa = x[a]
            ts.nl -= ts.v >= xa
            ts.pl -= (ts.v >= xa) * yz
            lo, hi = ts.vlo == xa, ts.vhi == xa
            ts.clo -= lo
            ts.plo -= lo * yz
            ts.chi -= hi
            ts.phi -= hi * yz
            cost.stats_touched += len(ts)
            if not ts.valid().all():
                broken.append(a)
        if broken:
            rows = self._alive_rows_below(node)
            for a in broken:
                ts = node.cands[a]
                kept = ts.take(np.flatnonzero(ts.valid()))
                work = [0]
                extra = self._sample_attr(rows, a, gen, work, self.params.k - len(kept), exclude=kept.v)
                cost.retrain_work += work[0]
                merged = ThresholdSet.concat(kept, extra) if len(extra) else kept
                if len(merged):
                    node.cands[a] = merged.take(np.argsort(merged.v, kind="stable"))
                else:
                    del node.cands[a]
            if len(node.cands) < self.p_tilde:
                work = [0]
                self._fill_attributes(node, rows, gen, work)
                cost.retrain_work += work[0]
        best = _best(node)
        if best is None or (best[1], best[2]) != (node.attr, node.thr):
            return self._retrain(node, gen, cost)
        if x[node.attr] <= node.thr:
            node.left = self._delete(node.left, r, gen, cost)
        else:
            node.right = self._delete(node.right, r, gen, cost)
        return node

    # prediction

    def _flatten(self):
        if self._flat is None:
            self._flat = [_flatten_tree(root) for root in self.roots]
        return self._flat

    def invalidate(self):
        self._flat = None


@dataclass
class DeleteCost:
    stats_touched: int = 0
    retrain_work: int = 0  # sample x attribute scans spent rebuilding or rescanning
    subtrees_retrained: int = 0

    @property
    def total(self) -> int:
        return self.stats_touched + self.retrain_work


def _flatten_tree(root):
    feature, threshold, left, right, value = [], [], [], [], []
    stack = [(root, -1, False)]
    while stack:
        node, parent, is_right = stack.pop()
        idx = len(feature)
        if parent >= 0:
            (right if is_right else left)[parent] = idx
        if isinstance(node, Leaf):
            feature.append(-1)
            threshold.append(0.0)
            value.append(node.value)
        else:
            feature.append(node.attr)
            threshold.append(node.thr)
            value.append(0.0)
        left.append(-1)
        right.append(-1)
        if not isinstance(node, Leaf):
            stack.append((node.right, idx, True))
            stack.append((node.left, idx, False))
    return (
        np.array(feature, np.int64),
        np.array(threshold, np.float64),
        np.array(left, np.int64),
        np.array(right, np.int64),
        np.array(value, np.float64),
    )


# -- public operations ----------------------------------------------------------


def dare_train(data: DatasetTable, params: DareParams = DareParams(), rng: RngStream = RngStream(0)) -> DareForest:
    """Grow ``params.trees`` trees, each on the full table."""
    if data.n == 0:
        raise DegenerateInput("cannot grow a forest on an empty dataset")
    if data.n and data.labels.max() > 1:
        raise ValueError("forests support binary labels only")
    forest = DareForest(data.features, data.labels, data.ids, params, rng)
    rows = np.arange(data.n, dtype=np.int64)
    for gen in forest.generators:
        work = [0]
        forest.roots.append(forest._build(rows, 0, gen, work))
        forest.train_cost += work[0]
    return forest


def dare_unlearn(forest: DareForest, sample_id):
    """Delete one sample from every tree, in place; returns ``(forest, DeleteCost)``."""
    r = forest.position(sample_id)
    if not forest.alive[r]:
        raise MissingSample(f"sample {int(sample_id)} was already deleted")
    forest.alive[r] = False
    cost = DeleteCost()
    for t, root in enumerate(forest.roots):
        forest.roots[t] = forest._delete(root, r, forest.generators[t], cost)
    forest.invalidate()
    return forest, cost


def dare_predict_many(forest: DareForest, X) -> np.ndarray:
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    if X.shape[1] != forest.p:
        raise ShapeError(f"expected {forest.p} features, got {X.shape[1]}")
    total = np.zeros(X.shape[0])
    for arrays in forest._flatten():
        total += _kernels.traverse(X, *arrays)
    return total / len(forest.roots)


def dare_predict(forest: DareForest, x) -> float:
    return float(dare_predict_many(forest, np.asarray(x, dtype=np.float64).reshape(1, -1))[0])


def forest_from_roots(data: DatasetTable, roots, params: DareParams | None = None) -> DareForest:
    """Wrap hand-built trees (tests, fixtures) into a forest."""
    params = params or DareParams(trees=len(roots))
    forest = DareForest(data.features, data.labels, data.ids, params, RngStream(0))
    forest.roots = list(roots)
    return forest


# -- audit ----------------------------------------------------------------------


@dataclass(frozen=True)
class AuditEntry:
    tree: int
    path: str
    field: str
    expected: object
    found: object


def audit_forest(forest: DareForest, data: DatasetTable | None = None) -> list[AuditEntry]:
    """Recompute every cached quantity from the routed data and list mismatches.

    ``data`` defaults to the forest's live rows; passing a table audits the
    forest against exactly those samples.
    """
    if data is None:
        rows = np.flatnonzero(forest.alive)
    else:
        rows = np.sort(np.array([forest.position(i) for i in data.ids], dtype=np.int64))
    out = []
    for t, root in enumerate(forest.roots):
        _audit_node(forest, root, rows, t, "", out)
    return out


def _audit_node(forest, node, rows, t, path, out):
    path_name = path or "root"

    def check(name, expected, found):
        if isinstance(expected, float) or isinstance(found, float):
            same = expected == found or (np.isnan(expected) and np.isnan(found))
        else:
            same = expected == found
        if not same:
            out.append(AuditEntry(t, path_name, name, expected, found))

    y = forest.y[rows]
    n, n_pos = int(rows.size), int(y.sum())
    check("n", n, node.n)
    check("n_pos", n_pos, node.n_pos)
    if isinstance(node, Leaf):
        check("rows", sorted(rows.tolist()), sorted(node.rows.tolist()))
        check("value", _leaf_value(n, n_pos), node.value)
        return
    col = forest.X[rows, node.attr]
    if isinstance(node, RandomNode):
        if n:
            check("a_min", float(col.min()), node.a_min)
            check("a_max", float(col.max()), node.a_max)
            check("c_min", int(np.sum(col == col.min())), node.c_min)
            check("c_max", int(np.sum(col == col.max())), node.c_max)
        check("threshold_in_range", True, bool(node.a_min <= node.thr < node.a_max))
    else:
        for a in sorted(node.cands):
            ts = node.cands[a]
            full = all_valid_thresholds(forest.X[rows, a], y)
            x = forest.X[rows, a]
            for i in range(len(ts)):
                v = ts.v[i]
                tag = f"cand[{a}][{v!r}]"
                check(tag + ".nl", int(np.sum(x <= v)), int(ts.nl[i]))
                check(tag + ".pl", int(y[x <= v].sum()), int(ts.pl[i]))
                for side, val, c, pp in (("lo", ts.vlo[i], ts.clo[i], ts.plo[i]), ("hi", ts.vhi[i], ts.chi[i], ts.phi[i])):
                    hit = x == val
                    check(tag + ".c" + side, int(hit.sum()), int(c))
                    check(tag + ".p" + side, int(y[hit].sum()), int(pp))
                check(tag + ".valid", True, bool(np.isin(v, full.v)))
        best = _best(node)
        check("best_split", None if best is None else (best[1], best[2]), (node.attr, node.thr))
    go_left = col <= node.thr
    _audit_node(forest, node.left, rows[go_left], t, path + "L", out)
    _audit_node(forest, node.right, rows[~go_left], t, path + "R", out)


def write_audit_csv(entries, path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tree", "node_path", "field", "expected", "found"])
        for e in entries:
            w.writerow([e.tree, e.path, e.field, e.expected, e.found])
    return Path(path)


# -- serialisation ----------------------------------------------------------------


def _node_to_obj(node):
    if isinstance(node, Leaf):
        return {"t": "leaf", "d": node.depth, "rows": node.rows.tolist(), "n": node.n, "np": node.n_pos, "val": node.value}
    base = {"d": node.depth, "n": node.n, "np": node.n_pos, "a": node.attr, "v": node.thr,
            "L": _node_to_obj(node.left), "R": _node_to_obj(node.right)}
    if isinstance(node, RandomNode):
        base.update(t="random", amin=node.a_min, amax=node.a_max, cmin=node.c_min, cmax=node.c_max)
    else:
        base.update(t="greedy", cands={str(a): {f: getattr(ts, f).tolist() for f in ThresholdSet.FIELDS}
                                        for a, ts in node.cands.items()})
    return base


def _node_from_obj(o):
    if o["t"] == "leaf":
        leaf = Leaf.__new__(Leaf)
        leaf.depth, leaf.rows, leaf.n, leaf.n_pos, leaf.value = o["d"], np.array(o["rows"], np.int64), o["n"], o["np"], o["val"]
        return leaf
    node = RandomNode() if o["t"] == "random" else GreedyNode()
    node.depth, node.n, node.n_pos, node.attr, node.thr = o["d"], o["n"], o["np"], o["a"], o["v"]
    node.left, node.right = _node_from_obj(o["L"]), _node_from_obj(o["R"])
    if o["t"] == "random":
        node.a_min, node.a_max, node.c_min, node.c_max = o["amin"], o["amax"], o["cmin"], o["cmax"]
    else:
        node.cands = {}
        for a, fields in o["cands"].items():
            ts = ThresholdSet()
            for f in ThresholdSet.FIELDS:
                setattr(ts, f, np.array(fields[f], np.float64 if f in ("v", "vlo", "vhi") else np.int64))
            node.cands[int(a)] = ts
    return node


def save_forest(forest: DareForest, path) -> Path:
    """``UKF1`` magic followed by zlib-compressed JSON (data, trees, generator states)."""
    p = forest.params
    obj = {
        "version": 1,
        "params": [p.trees, p.d_max, p.k, p.p_tilde, p.d_rmax],
        "rng": [forest.rng.seed, forest.rng.stream_id],
        "X": forest.X.tolist(),
        "y": forest.y.tolist(),
        "ids": forest.ids.tolist(),
        "alive": forest.alive.tolist(),
        "train_cost": forest.train_cost,
        "generators": [g.bit_generator.state for g in forest.generators],
        "trees": [_node_to_obj(r) for r in forest.roots],
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(zlib.compress(json.dumps(obj).encode()))
    return Path(path)


def load_forest(path) -> DareForest:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a UKF1 file")
        obj = json.loads(zlib.decompress(fh.read()).decode())
    params = DareParams(*obj["params"])
    forest = DareForest(np.array(obj["X"], np.float64).reshape(len(obj["y"]), -1), obj["y"], obj["ids"],
                        params, RngStream(*obj["rng"]))
    forest.alive = np.array(obj["alive"], bool)
    forest.train_cost = obj["train_cost"]
    for g, state in zip(forest.generators, obj["generators"]):
        g.bit_generator.state = state
    forest.roots = [_node_from_obj(o) for o in obj["trees"]]
    return forest
