"""Pretraining, split/freeze, adaptation, evaluation, and their contracts."""

import numpy as np
import pytest

from bnadapt.adaptation import (
    AdaptConfig,
    PretrainConfig,
    adapt,
    evaluate,
    mean_std,
    moving_average_monotone,
    pretrain,
    split_and_freeze,
)
from bnadapt.data import LabeledDataset, ShiftSpec, apply_shift, make_blobs, split_train_test
from bnadapt.errors import ConfigError, ContractError, StateError
from bnadapt.nn import build_mlp, checkpoint_text
from bnadapt.numerics import make_rng


def _two_blob_data(seed=0):
    full = make_blobs(make_rng(seed), 2, 2, 200, 0.3)
    return split_train_test(full, make_rng(seed + 100), 0.5)


def _benchmark_target(seed=0):
    base = make_blobs(make_rng([seed, 5]), 3, 2, 100, 0.35)
    spec = ShiftSpec(
        angle=np.deg2rad(50.0), translation=(1.5, -0.5), scale=(1.2, 0.8), noise_std=0.05
    )
    shifted = apply_shift(base, spec, make_rng([seed, 6]))
    return split_train_test(shifted, make_rng([seed, 7]), 0.5)


def _pretrained_model(train, seed=0, iterations=400):
    model = build_mlp(train.dim, [16, 16], train.n_classes, make_rng([seed, 0]))
    pretrain(model, train, PretrainConfig(iterations=iterations, seed=seed))
    return model


class TestPretrain:
    def test_separable_blobs_high_accuracy(self):
        """200 linearly separable 2-class samples, 500 iterations."""
        train, test = _two_blob_data()
        assert train.n == 200
        model = build_mlp(2, [16, 16], 2, make_rng([0, 0]))
        pretrain(model, train, PretrainConfig(iterations=500, batch_size=64, seed=0))
        assert evaluate(model, test) >= 0.98

    def test_zero_iterations_noop(self):
        train, _ = _two_blob_data()
        model = build_mlp(2, [8], 2, make_rng([1, 0]))
        before = checkpoint_text(model, 1)
        records = pretrain(model, train, PretrainConfig(iterations=0, seed=1))
        assert records == []
        assert checkpoint_text(model, 1) == before

    def test_same_seed_bit_identical(self):
        train, _ = _two_blob_data()

        def run():
            model = build_mlp(2, [8], 2, make_rng([2, 0]))
            pretrain(model, train, PretrainConfig(iterations=120, seed=2))
            return checkpoint_text(model, 2)

        assert run() == run()

    def test_too_few_samples_for_batch(self):
        train, _ = _two_blob_data()
        idx = np.concatenate([np.flatnonzero(train.labels == k)[:10] for k in (0, 1)])
        small = train.subset(idx)
        model = build_mlp(2, [8], 2, make_rng([3, 0]))
        with pytest.raises(ConfigError):
            pretrain(model, small, PretrainConfig(iterations=10, batch_size=64))

    def test_running_stats_move_during_training(self):
        train, _ = _two_blob_data()
        model = build_mlp(2, [8], 2, make_rng([4, 0]))
        before = model.split_bn().running_mean.copy()
        pretrain(model, train, PretrainConfig(iterations=50, seed=4))
        assert not np.array_equal(model.split_bn().running_mean, before)


class TestSplitAndFreeze:
    def test_snapshot_and_flags(self):
        train, _ = _two_blob_data()
        model = _pretrained_model(train, seed=5, iterations=100)
        stored_mean, stored_var = split_and_freeze(model)
        bn = model.split_bn()
        np.testing.assert_array_equal(stored_mean, bn.running_mean)
        np.testing.assert_array_equal(stored_var, bn.running_var)
        for i, layer in enumerate(model.layers):
            if i >= model.split_index:
                assert not layer.trainable
            elif layer.params_and_grads():
                assert layer.trainable
        assert bn.frozen

    def test_rejects_non_batchnorm_split(self):
        train, _ = _two_blob_data()
        model = _pretrained_model(train, seed=6, iterations=50)
        with pytest.raises(ConfigError):
            split_and_freeze(model, split_index=0)

    def test_classifier_bytes_unchanged_by_adaptation(self):
        train, test = _two_blob_data(seed=7)
        model = _pretrained_model(train, seed=7, iterations=200)
        stored = split_and_freeze(model)
        before = model.parameter_bytes(model.split_index)
        adapt(
            model,
            test.features,
            AdaptConfig(iterations=100, batch_size=32, seed=7),
            stored_stats=stored,
        )
        assert model.parameter_bytes(model.split_index) == before


class TestAdapt:
    def test_requires_freeze(self):
        train, _ = _two_blob_data(seed=8)
        model = _pretrained_model(train, seed=8, iterations=50)
        with pytest.raises(StateError):
            adapt(model, train.features, AdaptConfig(iterations=10, seed=8))

    def test_bnm_decreases_on_shifted_target(self):
        src_full = make_blobs(make_rng([9, 3]), 3, 2, 100, 0.35)
        src_train, _ = split_train_test(src_full, make_rng([9, 4]), 0.5)
        tgt_train, tgt_test = _benchmark_target(seed=9)
        model = _pretrained_model(src_train, seed=9, iterations=500)
        stored = split_and_freeze(model)
        result = adapt(
            model, tgt_train, AdaptConfig(iterations=600, seed=9), eval_data=tgt_test
        )
        assert (
            result.final_loss.components["bnm"]
            < result.initial_loss.components["bnm"]
        )

    def test_no_shift_control_keeps_accuracy(self):
        """Adapting on data identical to the source must not destroy an
        already-aligned model (within 2 points)."""
        train, test = _two_blob_data(seed=10)
        model = _pretrained_model(train, seed=10, iterations=400)
        source_acc = evaluate(model, test)
        stored = split_and_freeze(model)
        result = adapt(
            model, train, AdaptConfig(iterations=600, seed=10), eval_data=test
        )
        assert abs(result.final_acc - source_acc) <= 0.02

    def test_labels_never_read(self):
        """Adapting on the dataset and on its bare feature matrix produces
        bit-identical models."""
        train, test = _two_blob_data(seed=11)
        tgt_train, _ = _benchmark_target(seed=11)

        def run(target):
            model = _pretrained_model(train, seed=11, iterations=100)
            # 3-class target features through a 2-class model is fine: labels
            # are never touched.
            stored = split_and_freeze(model)
            adapt(model, target, AdaptConfig(iterations=80, seed=11), stored_stats=stored)
            return checkpoint_text(model, 11)

        assert run(tgt_train) == run(tgt_train.features)

    def test_seed_determinism(self):
        train, _ = _two_blob_data(seed=12)
        tgt_train, _ = _benchmark_target(seed=12)

        def run():
            model = _pretrained_model(train, seed=12, iterations=100)
            stored = split_and_freeze(model)
            adapt(model, tgt_train, AdaptConfig(iterations=120, seed=12), stored_stats=stored)
            return checkpoint_text(model, 12)

        assert run() == run()

    def test_batch_size_clamped_to_small_targets(self):
        train, _ = _two_blob_data(seed=13)
        model = _pretrained_model(train, seed=13, iterations=100)
        stored = split_and_freeze(model)
        result = adapt(
            model,
            train.features[:10],
            AdaptConfig(iterations=20, batch_size=64, seed=13, log_interval=10),
            stored_stats=stored,
        )
        assert len(result.records) == 2

    def test_metrics_log_shape(self):
        train, test = _two_blob_data(seed=14)
        model = _pretrained_model(train, seed=14, iterations=100)
        stored = split_and_freeze(model)
        result = adapt(
            model,
            train,
            AdaptConfig(iterations=200, log_interval=50, seed=14),
            eval_data=test,
            stored_stats=stored,
        )
        assert [r.iteration for r in result.records] == [50, 100, 150, 200]
        for r in result.records:
            assert r.loss_total == pytest.approx(
                r.loss_im + 10.0 * r.loss_bnm, rel=1e-12
            )

    def test_frozen_batch_mode_runs(self):
        train, test = _two_blob_data(seed=15)
        model = _pretrained_model(train, seed=15, iterations=100)
        stored = split_and_freeze(model)
        result = adapt(
            model,
            train,
            AdaptConfig(iterations=60, seed=15, bn_frozen_mode="batch"),
            eval_data=test,
            stored_stats=stored,
        )
        assert np.isfinite(result.final_loss.total)

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            AdaptConfig(batch_size=1)
        with pytest.raises(ConfigError):
            AdaptConfig(lam=-1.0)
        with pytest.raises(ConfigError):
            AdaptConfig(bn_frozen_mode="sometimes")


class TestEvaluate:
    def test_perfect_model_scores_one(self):
        train, test = _two_blob_data(seed=16)
        model = _pretrained_model(train, seed=16, iterations=500)
        assert evaluate(model, test) == 1.0

    def test_chance_level_for_uniform_model(self):
        rng = make_rng(17)
        features = rng.standard_normal((2000, 2))
        labels = rng.integers(0, 4, 2000)
        labels[:4] = [0, 1, 2, 3]
        ds = LabeledDataset(features, labels, 4)
        model = build_mlp(2, [4], 4, make_rng([17, 0]))
        model.layers[-2].weights[...] = 0.0
        model.layers[-2].bias[...] = 0.0
        acc = evaluate(model, ds)
        # Uniform probabilities tie-break to class 0, so accuracy is the
        # class-0 frequency: chance level 1/K within 3*sqrt(1/(4n)).
        assert abs(acc - 0.25) <= 3 * np.sqrt(0.25 / 2000) + 0.01

    def test_row_order_invariance(self):
        train, test = _two_blob_data(seed=18)
        model = _pretrained_model(train, seed=18, iterations=100)
        perm = make_rng(18).permutation(test.n)
        assert evaluate(model, test) == evaluate(model, test.subset(perm))

    def test_empty_test_set(self):
        train, _ = _two_blob_data(seed=19)
        model = _pretrained_model(train, seed=19, iterations=50)
        with pytest.raises(ContractError):
            evaluate(model, None)


class TestHelpers:
    def test_moving_average_monotone_accepts_plateau(self):
        assert moving_average_monotone([0.5, 0.7, 0.9, 1.0, 1.0, 1.0, 1.0])

    def test_moving_average_monotone_rejects_late_drop(self):
        values = [0.5] * 10 + [0.9] * 30 + [0.2] * 10
        assert not moving_average_monotone(values)

    def test_moving_average_ignores_early_noise(self):
        values = [0.9, 0.2, 0.8, 0.3] + list(np.linspace(0.5, 1.0, 46))
        assert moving_average_monotone(values, tail_fraction=0.8)

    def test_mean_std(self):
        mean, std = mean_std([1.0, 2.0, 3.0])
        assert mean == 2.0
        assert std == pytest.approx(1.0, abs=1e-12)
        assert mean_std([4.0]) == (4.0, 0.0)
