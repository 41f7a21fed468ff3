import numpy as np
import pytest

from diffensemble.data import synthetic_splits
from diffensemble.frontend import PoolCounts, sample_pool_specs
from diffensemble.network import build_model
from diffensemble.optics import GridSpec
from diffensemble.trainer import (
    AdamState,
    NonFiniteGradientError,
    TrainHyperparams,
    adam_step,
    evaluate_accuracy,
    lr_schedule,
    member_seed,
    train_network,
    train_pool,
)

GRID = GridSpec(64)


class TestLrSchedule:
    def test_paper_values(self):
        assert lr_schedule(0) == 0.001
        assert lr_schedule(8) == pytest.approx(0.0007)
        assert lr_schedule(16) == pytest.approx(0.00049)

    def test_constant_within_interval(self):
        for e in range(8):
            assert lr_schedule(e) == 0.001

    def test_monotone_nonincreasing(self):
        lrs = [lr_schedule(e) for e in range(50)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError):
            lr_schedule(-1)


def reference_adam_scalar(grad_fn, x0, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Independent scalar-by-scalar Adam reference (pure python floats)."""
    x = list(x0)
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    for t in range(1, steps + 1):
        g = grad_fn(x)
        for i in range(len(x)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            x[i] = x[i] - lr * mh / (vh**0.5 + eps)
    return x


class TestAdam:
    def test_zero_gradients_fresh_state_no_move(self):
        params = {"w": np.array([1.0, -2.0])}
        state = AdamState.for_params(params)
        out = adam_step(params, {"w": np.zeros(2)}, state, lr=0.1)
        assert np.array_equal(out["w"], params["w"])

    def test_first_step_magnitude(self):
        params = {"w": np.zeros(3)}
        state = AdamState.for_params(params)
        out = adam_step(params, {"w": np.ones(3)}, state, lr=0.05)
        assert np.allclose(out["w"], -0.05 / (1 + 1e-8), atol=1e-12)

    def test_ten_step_quadratic_matches_scalar_reference(self):
        # f(x) = 0.5 * (3 x0^2 + 0.7 x1^2), grad = (3 x0, 0.7 x1)
        def grad_fn(x):
            return [3.0 * x[0], 0.7 * x[1]]

        expected = reference_adam_scalar(grad_fn, [1.5, -2.0], lr=0.1, steps=10)
        params = {"x": np.array([1.5, -2.0])}
        state = AdamState.for_params(params)
        for _ in range(10):
            g = {"x": np.array([3.0 * params["x"][0], 0.7 * params["x"][1]])}
            params = adam_step(params, g, state, lr=0.1)
        assert np.max(np.abs(params["x"] - np.array(expected))) <= 1e-12

    def test_nonfinite_gradient_aborts(self):
        params = {"w": np.zeros(2)}
        state = AdamState.for_params(params)
        with pytest.raises(NonFiniteGradientError):
            adam_step(params, {"w": np.array([1.0, np.nan])}, state, lr=0.1)


def desk_hp(**kw):
    defaults = dict(batch_size=8, epochs=2, seed=42)
    defaults.update(kw)
    return TrainHyperparams(**defaults)


@pytest.fixture(scope="module")
def tiny_data():
    return synthetic_splits(160, 60, 60, seed=1)


@pytest.fixture(scope="module")
def tiny_specs():
    return sample_pool_specs(5, PoolCounts(1, 1, 1, 0), grid=GRID)


class TestTrainNetwork:
    def test_best_checkpoint_dominates_final_epoch(self, tiny_data, tiny_specs):
        r = train_network(
            tiny_specs[0], tiny_data.train, tiny_data.validation, desk_hp(), GRID, n_layers=3
        )
        assert r.best_val_accuracy >= r.log[-1]["val_accuracy"]
        assert r.best_epoch <= len(r.log) - 1

    def test_deterministic_log(self, tiny_data, tiny_specs):
        runs = [
            train_network(
                tiny_specs[0], tiny_data.train, tiny_data.validation, desk_hp(), GRID, n_layers=3
            )
            for _ in range(2)
        ]
        for a, b in zip(runs[0].log, runs[1].log):
            assert a["mean_loss"] == b["mean_loss"]
            assert a["val_accuracy"] == b["val_accuracy"]
        for k in runs[0].best_params:
            assert np.array_equal(runs[0].best_params[k], runs[1].best_params[k])

    def test_loss_decreases(self, tiny_data, tiny_specs):
        r = train_network(
            tiny_specs[2],
            tiny_data.train,
            tiny_data.validation,
            desk_hp(epochs=3),
            GRID,
            n_layers=3,
        )
        assert r.log[-1]["mean_loss"] < r.log[0]["mean_loss"]

    def test_empty_split_rejected(self, tiny_data, tiny_specs):
        empty = tiny_data.train.subset(0)
        with pytest.raises(ValueError):
            train_network(tiny_specs[0], empty, tiny_data.validation, desk_hp(), GRID)

    def test_best_model_reproduces_logged_accuracy(self, tiny_data, tiny_specs):
        r = train_network(
            tiny_specs[0], tiny_data.train, tiny_data.validation, desk_hp(), GRID, n_layers=3
        )
        template = build_model(tiny_specs[0], GRID, seed=0, n_layers=3)
        acc = evaluate_accuracy(r.best_model(template), tiny_data.validation)
        assert acc == pytest.approx(r.best_val_accuracy)


class TestTrainPool:
    def test_empty_pool(self, tiny_data):
        out = train_pool([], tiny_data.train, tiny_data.validation, desk_hp(), GRID)
        assert out.results == {} and out.failures == {}

    def test_duplicate_specs_rejected(self, tiny_data, tiny_specs):
        with pytest.raises(ValueError):
            train_pool(
                [tiny_specs[0], tiny_specs[0]],
                tiny_data.train,
                tiny_data.validation,
                desk_hp(),
                GRID,
            )

    def test_worker_count_invariance(self, tiny_data, tiny_specs):
        small = tiny_data.train.subset(40)
        val = tiny_data.validation.subset(20)
        hp = desk_hp(epochs=1)
        seq = train_pool(tiny_specs, small, val, hp, GRID, n_layers=3, worker_count=1)
        par = train_pool(tiny_specs, small, val, hp, GRID, n_layers=3, worker_count=2)
        assert seq.failures == par.failures == {}
        assert set(seq.results) == set(par.results)
        for k in seq.results:
            for name in seq.results[k].best_params:
                assert np.array_equal(
                    seq.results[k].best_params[name], par.results[k].best_params[name]
                )

    def test_member_seed_stability(self):
        assert member_seed(7, 3) == member_seed(7, 3)
        assert member_seed(7, 3) != member_seed(7, 4)
        assert member_seed(8, 3) != member_seed(7, 3)

    def test_seed_isolation_retrain_single_member(self, tiny_data, tiny_specs):
        from dataclasses import replace

        small = tiny_data.train.subset(40)
        val = tiny_data.validation.subset(20)
        hp = desk_hp(epochs=1)
        pool = train_pool(tiny_specs, small, val, hp, GRID, n_layers=3)
        solo = train_network(
            tiny_specs[1], small, val, replace(hp, seed=member_seed(hp.seed, 1)), GRID, n_layers=3
        )
        for name in solo.best_params:
            assert np.array_equal(solo.best_params[name], pool.results[1].best_params[name])
