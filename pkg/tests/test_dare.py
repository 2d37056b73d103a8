import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearnkit.core import DatasetTable, RngStream, remove_rows
from unlearnkit.dare import (
    DareParams,
    GreedyNode,
    Leaf,
    RandomNode,
    all_valid_thresholds,
    audit_forest,
    dare_predict,
    dare_predict_many,
    dare_train,
    dare_unlearn,
    forest_from_roots,
    load_forest,
    save_forest,
    write_audit_csv,
)
from unlearnkit.data import make_blobs
from unlearnkit.errors import DegenerateInput, MissingSample, ShapeError


def grid_table(n, p, levels, seed):
    """Features on a small integer grid so thresholds repeat and ties occur."""
    rng = np.random.default_rng(seed)
    X = rng.integers(0, levels, (n, p)).astype(float)
    y = ((X[:, 0] + X[:, 1] + rng.integers(0, 3, n)) > levels).astype(int)
    return DatasetTable.from_arrays(X, y)


def shape(node):
    if isinstance(node, Leaf):
        return ("leaf", node.n, node.n_pos)
    return (type(node).__name__, node.n, node.n_pos, node.attr, node.thr, shape(node.left), shape(node.right))


def brute_thresholds(col, y):
    vals = np.unique(col)
    out = []
    for lo, hi in zip(vals[:-1], vals[1:]):
        ylo, yhi = y[col == lo], y[col == hi]
        same_pure = (ylo.min() == ylo.max() == yhi.min() == yhi.max())
        if not same_pure:
            out.append(((lo + hi) / 2, int(np.sum(col <= lo)), int(y[col <= lo].sum())))
    return out


class TestThresholds:
    def test_hand_example(self):
        col = np.array([1.0, 1.0, 2.0, 3.0, 3.0, 4.0])
        y = np.array([0, 0, 0, 1, 0, 1])
        ts = all_valid_thresholds(col, y)
        # 1|2 is pure-zero on both sides, so only 2|3 and 3|4 remain
        np.testing.assert_array_equal(ts.v, [2.5, 3.5])
        np.testing.assert_array_equal(ts.nl, [3, 5])
        np.testing.assert_array_equal(ts.pl, [0, 1])
        np.testing.assert_array_equal(ts.clo, [1, 2])
        np.testing.assert_array_equal(ts.phi, [1, 1])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=1, max_size=40))
    def test_matches_brute_force(self, pairs):
        col = np.array([float(a) for a, _ in pairs])
        y = np.array([b for _, b in pairs])
        ts = all_valid_thresholds(col, y)
        got = list(zip(ts.v.tolist(), ts.nl.tolist(), ts.pl.tolist()))
        assert got == brute_thresholds(col, y)

    def test_constant_column(self):
        assert len(all_valid_thresholds(np.ones(5), np.array([0, 1, 0, 1, 0]))) == 0


class TestTraining:
    def test_audit_clean_after_training(self):
        data = grid_table(300, 4, 6, seed=1)
        forest = dare_train(data, DareParams(trees=3, d_max=5, k=3, d_rmax=1), RngStream(0))
        assert audit_forest(forest) == []

    def test_pure_data_is_a_leaf(self):
        data = DatasetTable.from_arrays(np.arange(6.0).reshape(6, 1), np.ones(6, int))
        forest = dare_train(data, DareParams(trees=1), RngStream(0))
        assert isinstance(forest.roots[0], Leaf) and forest.roots[0].value == 1.0

    def test_depth_limit(self):
        data = grid_table(200, 3, 8, seed=2)
        forest = dare_train(data, DareParams(trees=1, d_max=2), RngStream(0))

        def depth(node):
            return 0 if isinstance(node, Leaf) else 1 + max(depth(node.left), depth(node.right))

        assert depth(forest.roots[0]) <= 2

    def test_random_nodes_on_top(self):
        data = grid_table(200, 3, 8, seed=2)
        root = dare_train(data, DareParams(trees=1, d_rmax=1), RngStream(0)).roots[0]
        assert isinstance(root, RandomNode)
        assert isinstance(root.left, (GreedyNode, Leaf))

    def test_keyed(self):
        data = grid_table(150, 3, 5, seed=3)
        a = dare_train(data, DareParams(trees=2, d_rmax=1), RngStream(4))
        b = dare_train(data, DareParams(trees=2, d_rmax=1), RngStream(4))
        assert [shape(r) for r in a.roots] == [shape(r) for r in b.roots]

    def test_empty(self):
        data = grid_table(5, 2, 3, seed=0)
        with pytest.raises(DegenerateInput):
            dare_train(remove_rows(data, data.ids))


class TestDeletion:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_deterministic_regime_equals_retrain(self, seed):
        # k covers every threshold and no random nodes: the tree is a
        # function of the data, so deletion must reproduce a fresh build
        data = grid_table(120, 3, 5, seed=seed)
        params = DareParams(trees=1, d_max=6, k=1000, d_rmax=0)
        forest = dare_train(data, params, RngStream(seed))
        gone = [int(i) for i in np.random.default_rng(seed).choice(data.ids, 25, replace=False)]
        for z in gone:
            dare_unlearn(forest, z)
        fresh = dare_train(remove_rows(data, gone), params, RngStream(seed))
        assert shape(forest.roots[0]) == shape(fresh.roots[0])
        np.testing.assert_array_equal(dare_predict_many(forest, data.features),
                                      dare_predict_many(fresh, data.features))

    def test_audit_after_many_deletions(self):
        data = grid_table(400, 5, 7, seed=5)
        forest = dare_train(data, DareParams(trees=4, d_max=6, k=3, d_rmax=2), RngStream(1))
        order = np.random.default_rng(0).permutation(data.ids)[:150]
        for z in order:
            dare_unlearn(forest, int(z))
        assert audit_forest(forest) == []
        assert forest.n_alive == 250
        assert audit_forest(forest, remove_rows(data, order)) == []

    def test_delete_down_to_nothing(self):
        data = grid_table(30, 2, 4, seed=6)
        forest = dare_train(data, DareParams(trees=2, d_rmax=1, k=2), RngStream(0))
        for z in data.ids:
            dare_unlearn(forest, int(z))
        assert audit_forest(forest) == []
        np.testing.assert_array_equal(dare_predict_many(forest, data.features[:3]), 0.5)

    def test_cost_below_retrain(self):
        data = make_blobs(2000, 5, 2.0, seed=0)
        forest = dare_train(data, DareParams(trees=3, d_max=8, k=5), RngStream(0))
        total = 0
        for z in data.ids[:20]:
            _, cost = dare_unlearn(forest, int(z))
            total += cost.total
        assert forest.train_cost / (total / 20) >= 10

    def test_double_delete(self):
        data = grid_table(30, 2, 4, seed=6)
        forest = dare_train(data, DareParams(trees=1), RngStream(0))
        dare_unlearn(forest, 3)
        with pytest.raises(MissingSample):
            dare_unlearn(forest, 3)
        with pytest.raises(MissingSample):
            dare_unlearn(forest, 999)


class TestAudit:
    def test_detects_corruption(self, tmp_path):
        data = grid_table(200, 3, 6, seed=7)
        forest = dare_train(data, DareParams(trees=1, d_max=4, k=3), RngStream(0))
        forest.roots[0].n_pos += 1
        entries = audit_forest(forest)
        assert any(e.path == "root" and e.field == "n_pos" for e in entries)
        lines = write_audit_csv(entries, tmp_path / "a.csv").read_text().splitlines()
        assert lines[0] == "tree,node_path,field,expected,found" and len(lines) == len(entries) + 1

    def test_detects_stale_threshold_stats(self):
        data = grid_table(200, 3, 6, seed=7)
        forest = dare_train(data, DareParams(trees=1, d_max=4, k=3), RngStream(0))
        root = forest.roots[0]
        a = sorted(root.cands)[0]
        root.cands[a].nl[0] += 1
        assert any(e.field.endswith(".nl") for e in audit_forest(forest))


class TestPrediction:
    def test_hand_tree(self):
        data = DatasetTable.from_arrays(np.array([[0.0], [1.0], [2.0], [3.0]]), np.array([0, 0, 1, 1]))
        left, right = Leaf(1, [0, 1], data.labels), Leaf(1, [2, 3], data.labels)
        root = GreedyNode()
        root.depth, root.n, root.n_pos, root.attr, root.thr = 0, 4, 2, 0, 1.5
        root.left, root.right, root.cands = left, right, {}
        forest = forest_from_roots(data, [root, Leaf(0, [0, 1, 2, 3], data.labels)])
        np.testing.assert_allclose(dare_predict_many(forest, [[0.0], [3.0]]), [0.25, 0.75])
        assert dare_predict(forest, [1.5]) == 0.25

    def test_shape_error(self):
        data = grid_table(30, 2, 4, seed=0)
        forest = dare_train(data, DareParams(trees=1), RngStream(0))
        with pytest.raises(ShapeError):
            dare_predict_many(forest, np.zeros((2, 5)))


class TestStore:
    def test_roundtrip_then_continue(self, tmp_path):
        data = grid_table(200, 3, 6, seed=8)
        a = dare_train(data, DareParams(trees=2, d_rmax=1, k=3), RngStream(2))
        dare_unlearn(a, 5)
        b = load_forest(save_forest(a, tmp_path / "f.ukf"))
        assert [shape(r) for r in a.roots] == [shape(r) for r in b.roots]
        for z in (7, 8, 9, 10, 11):
            dare_unlearn(a, z)
            dare_unlearn(b, z)
        assert [shape(r) for r in a.roots] == [shape(r) for r in b.roots]
        assert audit_forest(b) == []

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ukf").write_bytes(b"nope")
        with pytest.raises(ValueError):
            load_forest(tmp_path / "x.ukf")
