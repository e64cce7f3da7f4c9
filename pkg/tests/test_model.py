import math

import numpy as np
import pytest

from embedlab import ConfigError
from embedlab.feature import HashSpec
from embedlab.model import BCE_EPS, ToyModel, ToyModelConfig, loss, stable_sigmoid

from oracles import finite_difference_check, random_model_case


def small_config(**kw):
    base = dict(tables=(HashSpec("a", 4), HashSpec("b", 3)), tasks=("click", "checkout"),
                dim=4, continuous_dim=2, trunk=(6, 5), seed=0)
    base.update(kw)
    return ToyModelConfig(**base)


def batch(n=8, seed=0):
    rng = np.random.default_rng(seed)
    rows = np.stack([rng.integers(0, 16, n), rng.integers(0, 8, n)], axis=1)
    return rows, rng.normal(size=(n, 2)).astype(np.float32)


class TestForward:
    def test_all_zero_gives_half(self):
        m = ToyModel(small_config())
        for t in m.tables:
            t.weights[:] = 0
        for p in m.params.values():
            p[:] = 0
        rows, x = batch()
        probs, _ = m.forward(rows, np.zeros_like(x))
        assert np.all(probs == 0.5)

    def test_no_cross_example_coupling(self):
        m = ToyModel(small_config())
        rows, x = batch(10)
        full, _ = m.forward(rows, x)
        one, _ = m.forward(rows[3:4], x[3:4])
        assert np.array_equal(one[0], full[3])

    def test_large_inputs_stay_finite(self):
        m = ToyModel(small_config())
        rows, x = batch()
        probs, _ = m.forward(rows, x * 1e3)
        assert np.isfinite(probs).all()

    def test_feature_count_checked(self):
        m = ToyModel(small_config())
        rows, x = batch()
        with pytest.raises(ConfigError, match="categorical features"):
            m.forward(rows[:, :1], x)

    def test_stable_sigmoid_extremes(self):
        out = stable_sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        assert list(out) == [0.0, 0.5, 1.0]

    def test_head_bias_init(self):
        m = ToyModel(small_config(head_bias=(-1.0, -3.0)))
        assert list(m.params["head.b"]) == [-1.0, -3.0]


class TestLoss:
    def test_uniform_prediction(self):
        res = loss(np.full((6, 2), 0.5), np.array([[0, 1]] * 3 + [[1, 0]] * 3))
        assert res.per_task == pytest.approx([math.log(2)] * 2)

    def test_perfect_scores_bounded(self):
        y = np.array([[0], [1]])
        res = loss(y.astype(float), y)
        assert res.total <= -math.log(1 - BCE_EPS) + 1e-15

    def test_weighted_total(self):
        # p chosen so per-task BCE equals 0.1 and 0.3 exactly
        p = np.array([[math.exp(-0.1), math.exp(-0.3)]])
        res = loss(p, np.array([[1, 1]]), loss_weights=(1.0, 2.0))
        assert res.per_task == pytest.approx([0.1, 0.3])
        assert res.total == pytest.approx(0.7)

    def test_undefined_labels_masked(self):
        p = np.array([[0.9, 0.2], [0.1, 0.7]])
        y = np.array([[1, 255], [0, 255]], dtype=np.uint8)
        res = loss(p, y)
        assert res.empty.tolist() == [False, True]
        assert res.per_task[1] == 0.0
        assert np.all(res.grad_logits[:, 1] == 0)


class TestBackward:
    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        assert finite_difference_check(*random_model_case(seed)) < 1e-4

    def test_only_batch_rows_get_gradient(self):
        m = ToyModel(small_config())
        rows, x = batch()
        probs, rec = m.forward(rows, x)
        g = m.backward(rec, loss(probs, np.ones((8, 2), np.uint8)))
        assert set(g.sparse["a"].rows) == set(rows[:, 0])
        assert g.sparse["a"].counts.sum() == 8

    def test_duplicate_rows_sum(self):
        m = ToyModel(small_config(dtype="float64"))
        rows = np.array([[3, 1], [3, 2]])
        x = np.zeros((2, 2))
        probs, rec = m.forward(rows, x)
        res = loss(probs, np.ones((2, 2), np.uint8))
        g = m.backward(rec, res)
        a = g.sparse["a"]
        assert a.rows.tolist() == [3] and a.counts.tolist() == [2]
        one = [m.backward(*self._single(m, rows[i:i + 1], x[i:i + 1], 2)) for i in range(2)]
        assert np.allclose(a.values[0], one[0].sparse["a"].values[0] + one[1].sparse["a"].values[0])

    @staticmethod
    def _single(m, rows, x, n_total):
        probs, rec = m.forward(rows, x)
        res = loss(probs, np.ones((1, 2), np.uint8))
        res.grad_logits /= n_total   # same per-example scale as the 2-row batch
        return rec, res

    def test_task_weight_linearity(self):
        m = ToyModel(small_config(dtype="float64"))
        rows, x = batch()
        y = np.random.default_rng(1).integers(0, 2, (8, 2)).astype(np.uint8)
        probs, rec = m.forward(rows, x)
        g = {w: m.backward(rec, loss(probs, y, (1.0, w))).dense["head.W"] for w in (0.0, 1.0, 2.0)}
        assert np.allclose(g[2.0] - g[0.0], 2 * (g[1.0] - g[0.0]))


class TestConfig:
    def test_loss_weight_count(self):
        with pytest.raises(ConfigError):
            small_config(loss_weights=(1.0,))

    def test_duplicate_tasks(self):
        with pytest.raises(ConfigError):
            small_config(tasks=("a", "a"))
