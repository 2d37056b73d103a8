import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearnkit.core import LossSpec, RngStream, loss_gradient, loss_hessian, remove_rows
from unlearnkit.errors import DegenerateInput, MissingSample, SingularCurvature
from unlearnkit.secondorder import (
    NoiseSpec,
    RemovalBatchPlan,
    fisher_unlearn,
    influence_unlearn,
    inverse_quarter_root,
)
from unlearnkit.trainer import TrainConfig, train_gd

from conftest import make_table, normal_equations

RIDGE = LossSpec("squared", 0.1)


def ridge_oracle(data, ids, lam=0.1):
    kept = remove_rows(data, ids)
    return normal_equations(kept.features, kept.labels.astype(float), lam)


class TestRemovalBatchPlan:
    def test_single_batch(self):
        assert [b.tolist() for b in RemovalBatchPlan().split([3, 1, 2])] == [[3, 1, 2]]

    def test_minibatches_keep_order(self):
        out = RemovalBatchPlan(2).split([5, 4, 3, 2, 1])
        assert [b.tolist() for b in out] == [[5, 4], [3, 2], [1]]

    def test_empty(self):
        assert RemovalBatchPlan(3).split([]) == []

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            RemovalBatchPlan(0)


class TestQuadraticExactness:
    """On a quadratic objective one Newton step lands on the survivor optimum."""

    def test_fisher_single_batch(self, ridge200):
        theta = normal_equations(ridge200.features, ridge200.labels.astype(float), 0.1)
        ids = ridge200.ids[:10]
        out = fisher_unlearn(theta, ridge200, ids, spec=RIDGE)
        assert np.linalg.norm(out - ridge_oracle(ridge200, ids)) <= 1e-8

    def test_influence_single_batch(self, ridge200):
        theta = normal_equations(ridge200.features, ridge200.labels.astype(float), 0.1)
        ids = ridge200.ids[:10]
        out = influence_unlearn(theta, ridge200, ids, spec=RIDGE)
        assert np.linalg.norm(out - ridge_oracle(ridge200, ids)) <= 1e-8

    @pytest.mark.parametrize("m", [1, 3, 7])
    def test_minibatches_also_exact(self, ridge200, m):
        theta = normal_equations(ridge200.features, ridge200.labels.astype(float), 0.1)
        ids = ridge200.ids[::20]
        oracle = ridge_oracle(ridge200, ids)
        for fn in (fisher_unlearn, influence_unlearn):
            out = fn(theta, ridge200, ids, plan=RemovalBatchPlan(m), spec=RIDGE)
            assert np.linalg.norm(out - oracle) <= 1e-8

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(0, 199), min_size=1, max_size=40, unique=True))
    def test_any_removal_set(self, ids):
        data = make_table(200, 5, seed=7)
        theta = normal_equations(data.features, data.labels.astype(float), 0.1)
        oracle = ridge_oracle(data, ids)
        np.testing.assert_allclose(influence_unlearn(theta, data, ids, spec=RIDGE), oracle, atol=1e-8)
        np.testing.assert_allclose(fisher_unlearn(theta, data, ids, spec=RIDGE), oracle, atol=1e-8)


class TestLogistic:
    def test_newton_step_shrinks_gap(self):
        data = make_table(300, 4, seed=2)
        spec = LossSpec("logistic", 0.05)
        cfg = TrainConfig(steps=3000, learning_rate=1.0)
        theta, _ = train_gd(data, spec, cfg, RngStream(0))
        ids = data.ids[:15]
        star, _ = train_gd(remove_rows(data, ids), spec, cfg, RngStream(0))
        before = np.linalg.norm(theta - star)
        after = np.linalg.norm(fisher_unlearn(theta, data, ids, spec=spec) - star)
        assert after < 0.05 * before

    def test_empty_removal_is_newton_on_full(self):
        data = make_table(100, 3, seed=4)
        spec = LossSpec("logistic", 0.1)
        theta = np.zeros(4)
        step = np.linalg.solve(loss_hessian(theta, data, spec), loss_gradient(theta, data, spec))
        np.testing.assert_allclose(fisher_unlearn(theta, data, [], spec=spec), theta - step, rtol=1e-12)
        np.testing.assert_array_equal(influence_unlearn(theta, data, [], spec=spec), theta)


class TestNoise:
    def test_noise_is_scaled_quarter_root(self, ridge200):
        theta = np.zeros(6)
        log = []
        noise = NoiseSpec(0.3, RngStream(5))
        with_noise = fisher_unlearn(theta, ridge200, [0, 1], noise, spec=RIDGE, noise_log=log)
        plain = fisher_unlearn(theta, ridge200, [0, 1], spec=RIDGE)
        F = loss_hessian(theta, remove_rows(ridge200, [0, 1]), RIDGE)
        b = RngStream(5).derive(0).generator().standard_normal(6)
        expected = 0.3 * inverse_quarter_root(F) @ b
        assert len(log) == 1
        np.testing.assert_allclose(log[0], expected, rtol=1e-12)
        np.testing.assert_allclose(with_noise - plain, expected, atol=1e-12)

    def test_one_draw_per_batch(self, ridge200):
        log = []
        fisher_unlearn(np.zeros(6), ridge200, list(range(9)), NoiseSpec(1.0, RngStream(1)),
                       RemovalBatchPlan(4), RIDGE, log)
        assert len(log) == 3
        assert not np.allclose(log[0], log[1])

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            NoiseSpec(-1.0)


class TestQuarterRoot:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 10_000))
    def test_fourth_power_inverts(self, p, seed):
        A = np.random.default_rng(seed).standard_normal((p, p))
        F = A @ A.T + np.eye(p)
        R = inverse_quarter_root(F)
        np.testing.assert_allclose(np.linalg.matrix_power(R, 4) @ F, np.eye(p), atol=1e-9)
        np.testing.assert_allclose(R, R.T, atol=1e-14)

    def test_singular_rejected(self):
        with pytest.raises(SingularCurvature) as exc:
            inverse_quarter_root(np.diag([1.0, 0.0]))
        assert exc.value.min_eigenvalue == 0.0


class TestErrors:
    def test_singular_curvature(self):
        X = np.zeros((10, 2))
        data = make_table(10, 2)
        data = type(data).from_arrays(X, data.labels)
        with pytest.raises(SingularCurvature):
            fisher_unlearn(np.zeros(3), data, [0], spec=LossSpec("squared", 0.0))

    def test_missing_sample(self, ridge200):
        with pytest.raises(MissingSample):
            influence_unlearn(np.zeros(6), ridge200, [999], spec=RIDGE)

    def test_removing_everything(self, table50):
        with pytest.raises(DegenerateInput):
            fisher_unlearn(np.zeros(6), table50, table50.ids, spec=RIDGE)
