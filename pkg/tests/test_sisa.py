from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from unlearnkit.core import LossSpec, RngStream, predict_proba, remove_rows
from unlearnkit.data import make_blobs
from unlearnkit.errors import MissingSample
from unlearnkit.sisa import (
    expected_speedup,
    load_sisa,
    random_assignment,
    save_sisa,
    sisa_predict,
    sisa_predict_many,
    sisa_train,
    sisa_unlearn,
    theoretical_max_speedup,
)
from unlearnkit.trainer import TrainConfig

SPEC = LossSpec("logistic", 1e-3)
CFG = TrainConfig(steps=20, learning_rate=0.5)
EPOCHS = (20,) * 5


@pytest.fixture(scope="module")
def blobs():
    return make_blobs(400, 6, 2.0, seed=3)


@pytest.fixture(scope="module")
def model(blobs):
    return sisa_train(blobs, SPEC, 4, 5, EPOCHS, RngStream(1), CFG)


def retrain_same_keys(model, data, ids):
    a_ids, shard, slice_ = random_assignment(data, 4, 5, RngStream(1))
    keep = ~np.isin(a_ids, ids)
    return sisa_train(remove_rows(data, ids), SPEC, 4, 5, EPOCHS, RngStream(1), CFG,
                      assignment=(a_ids[keep], shard[keep], slice_[keep]))


class TestAssignment:
    def test_balanced(self, blobs):
        _, shard, slice_ = random_assignment(blobs, 4, 5, RngStream(0))
        counts = np.bincount(shard)
        assert counts.max() - counts.min() <= 1
        for i in range(4):
            sl = np.bincount(slice_[shard == i], minlength=5)
            assert sl.max() - sl.min() <= 1

    def test_keyed(self, blobs):
        a = random_assignment(blobs, 4, 5, RngStream(7))
        b = random_assignment(blobs, 4, 5, RngStream(7))
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)


class TestExactness:
    def test_matches_keyed_retrain(self, model, blobs):
        ids = blobs.ids[[3, 50, 77, 200, 399]]
        new, cost = sisa_unlearn(model, blobs, ids)
        ref = retrain_same_keys(model, blobs, ids)
        np.testing.assert_array_equal(new.checkpoints, ref.checkpoints)
        assert cost.sample_grad_evals < ref.train_cost

    def test_untouched_shards_keep_checkpoints(self, model, blobs):
        z = int(blobs.ids[10])
        i = model.index_map()[z][0]
        new, cost = sisa_unlearn(model, blobs, [z])
        assert cost.shards_retrained == (i,)
        others = [s for s in range(4) if s != i]
        np.testing.assert_array_equal(new.checkpoints[others], model.checkpoints[others])

    def test_slice_resume_point(self, model, blobs):
        z = int(blobs.ids[10])
        i, r = model.index_map()[z]
        new, _ = sisa_unlearn(model, blobs, [z])
        np.testing.assert_array_equal(new.checkpoints[i, : r + 1], model.checkpoints[i, : r + 1])
        assert z not in new.index_map()

    def test_sequential_equals_batch(self, model, blobs):
        ids = [int(i) for i in blobs.ids[[5, 6, 300]]]
        batch, _ = sisa_unlearn(model, blobs, ids)
        seq = model
        for z in ids:
            seq, _ = sisa_unlearn(seq, blobs, [z])
        np.testing.assert_array_equal(batch.checkpoints, seq.checkpoints)

    def test_input_not_modified(self, model, blobs):
        before = model.checkpoints.copy()
        sisa_unlearn(model, blobs, [int(blobs.ids[0])])
        np.testing.assert_array_equal(model.checkpoints, before)

    def test_missing(self, model, blobs):
        with pytest.raises(MissingSample):
            sisa_unlearn(model, blobs, [10_000])

    def test_empty_removal(self, model, blobs):
        new, cost = sisa_unlearn(model, blobs, [])
        np.testing.assert_array_equal(new.checkpoints, model.checkpoints)
        assert cost.sample_grad_evals == 0


class TestPrediction:
    def test_vote_fraction(self, model, blobs):
        labels, probs = sisa_predict_many(model, blobs.features[:20])
        votes = sum((predict_proba(th, blobs.features[:20]) > 0.5).astype(int) for th in model.shard_models)
        np.testing.assert_allclose(probs[:, 1], votes / 4)
        np.testing.assert_array_equal(labels, (votes > 2).astype(int))

    def test_tie_goes_to_lower_label(self, blobs):
        m = sisa_train(blobs, SPEC, 2, 1, (0,), RngStream(0), TrainConfig(steps=0))
        ck = m.checkpoints.copy()
        ck[0, -1] = np.r_[np.zeros(6), 5.0]
        ck[1, -1] = np.r_[np.zeros(6), -5.0]
        label, probs = sisa_predict(replace(m, checkpoints=ck), np.zeros(6))
        assert label == 0 and probs[1] == 0.5

    def test_mean_probability(self, blobs):
        m = sisa_train(blobs, SPEC, 3, 2, (10, 10), RngStream(0), CFG, "mean_probability")
        _, probs = sisa_predict_many(m, blobs.features[:5])
        mean = np.mean([predict_proba(th, blobs.features[:5]) for th in m.shard_models], axis=0)
        np.testing.assert_allclose(probs[:, 1], mean)


class TestSpeedup:
    @staticmethod
    def recount(S, R):
        # one shard's data split into R unit slices; slice j costs (j+1) units
        full = S * sum(j + 1 for j in range(R))
        per_slice = [sum(k + 1 for k in range(r, R)) for r in range(R)]
        return full / np.mean(per_slice)

    @given(st.integers(1, 20), st.integers(1, 20))
    def test_expected_matches_recount(self, S, R):
        assert expected_speedup(S, R) == pytest.approx(self.recount(S, R), rel=1e-12)
        assert expected_speedup(S, R) == pytest.approx(3 * S * R / (2 * R + 1), rel=1e-12)

    @given(st.integers(1, 20), st.integers(1, 20))
    def test_bounded_by_max(self, S, R):
        assert expected_speedup(S, R) <= theoretical_max_speedup(S, R) * (1 + 1e-12)

    def test_single_slice(self):
        assert expected_speedup(4, 1) == theoretical_max_speedup(4, 1) == 4.0


class TestStore:
    def test_roundtrip(self, model, tmp_path):
        save_sisa(model, tmp_path / "run")
        back = load_sisa(tmp_path / "run")
        np.testing.assert_array_equal(back.checkpoints, model.checkpoints)
        assert back.index_map() == model.index_map()
        assert back.epochs == model.epochs and back.rng == model.rng
        assert (tmp_path / "run" / "shard003_slice005.ukh").is_file()

    def test_unlearn_after_reload(self, model, blobs, tmp_path):
        save_sisa(model, tmp_path / "run")
        a, _ = sisa_unlearn(load_sisa(tmp_path / "run"), blobs, [7])
        b, _ = sisa_unlearn(model, blobs, [7])
        np.testing.assert_array_equal(a.checkpoints, b.checkpoints)
