"""Dataset generation, covariate shift, subsampling, CSV round trips."""

import numpy as np
import pytest

from bnadapt.data import (
    LabeledDataset,
    ShiftSpec,
    apply_shift,
    load_csv,
    make_blobs,
    save_csv,
    split_train_test,
    subsample_preserving_prior,
)
from bnadapt.errors import ContractError, ParameterError, ParseError
from bnadapt.numerics import make_rng


class TestMakeBlobs:
    def test_counts_and_histogram(self):
        ds = make_blobs(make_rng(0), 3, 2, 100, 0.35)
        assert ds.n == 300
        np.testing.assert_array_equal(ds.class_counts(), [100, 100, 100])

    def test_zero_spread_nearest_centroid_perfect(self):
        ds = make_blobs(make_rng(1), 4, 2, 25, 0.0, ring_radius=2.0)
        angles = 2 * np.pi * np.arange(4) / 4
        centroids = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        distances = np.linalg.norm(ds.features[:, None, :] - centroids[None], axis=2)
        predictions = distances.argmin(axis=1)
        assert np.mean(predictions == ds.labels) == 1.0

    def test_same_seed_identical(self):
        a = make_blobs(make_rng(7), 3, 2, 50, 0.3)
        b = make_blobs(make_rng(7), 3, 2, 50, 0.3)
        assert a.features.tobytes() == b.features.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_mean_separation_exceeds_spread(self):
        """Default benchmark geometry: minimum centroid distance > 4*spread."""
        ds = make_blobs(make_rng(2), 3, 2, 100, 0.35, ring_radius=2.0)
        centroids = np.stack(
            [ds.features[ds.labels == k].mean(axis=0) for k in range(3)]
        )
        dists = [
            np.linalg.norm(centroids[i] - centroids[j])
            for i in range(3)
            for j in range(i + 1, 3)
        ]
        assert min(dists) > 4 * 0.35

    def test_invalid_sizes(self):
        with pytest.raises(ParameterError):
            make_blobs(make_rng(0), 1, 2, 10, 0.3)
        with pytest.raises(ParameterError):
            make_blobs(make_rng(0), 3, 1, 10, 0.3)
        with pytest.raises(ParameterError):
            make_blobs(make_rng(0), 3, 2, 0, 0.3)


class TestApplyShift:
    def test_identity_spec(self):
        ds = make_blobs(make_rng(3), 3, 2, 20, 0.3)
        out = apply_shift(ds, ShiftSpec(), make_rng(0))
        np.testing.assert_array_equal(out.features, ds.features)
        np.testing.assert_array_equal(out.labels, ds.labels)
        assert out.domain == "target"

    def test_pi_rotation_negates(self):
        ds = make_blobs(make_rng(4), 3, 2, 20, 0.3)
        out = apply_shift(ds, ShiftSpec(angle=np.pi), make_rng(0))
        np.testing.assert_allclose(out.features, -ds.features, atol=1e-12)

    def test_translation_moves_mean(self):
        ds = make_blobs(make_rng(5), 3, 2, 100, 0.3)
        out = apply_shift(ds, ShiftSpec(translation=(5.0, 0.0)), make_rng(1))
        delta = out.features.mean(axis=0) - ds.features.mean(axis=0)
        np.testing.assert_allclose(delta, [5.0, 0.0], atol=1e-9)

    def test_noise_uses_rng_deterministically(self):
        ds = make_blobs(make_rng(6), 3, 2, 30, 0.3)
        spec = ShiftSpec(noise_std=0.1)
        a = apply_shift(ds, spec, make_rng(9))
        b = apply_shift(ds, spec, make_rng(9))
        assert a.features.tobytes() == b.features.tobytes()

    def test_label_multiset_preserved(self):
        ds = make_blobs(make_rng(7), 4, 3, 25, 0.5)
        spec = ShiftSpec(
            angle=0.7, translation=(1.0, -1.0, 0.5), scale=(1.1, 0.9, 1.0), noise_std=0.2
        )
        out = apply_shift(ds, spec, make_rng(2))
        np.testing.assert_array_equal(
            np.sort(out.labels), np.sort(ds.labels)
        )

    def test_dimension_mismatch(self):
        ds = make_blobs(make_rng(8), 3, 2, 10, 0.3)
        with pytest.raises(ParameterError):
            apply_shift(ds, ShiftSpec(translation=(1.0, 2.0, 3.0), scale=(1, 1, 1)), make_rng(0))

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ParameterError):
            ShiftSpec(scale=(1.0, 0.0))


class TestSubsample:
    def test_full_fraction_is_permutation(self):
        ds = make_blobs(make_rng(10), 3, 2, 40, 0.3)
        out = subsample_preserving_prior(ds, 1.0, make_rng(0))
        assert out.n == ds.n
        a = ds.features[np.lexsort(ds.features.T)]
        b = out.features[np.lexsort(out.features.T)]
        np.testing.assert_array_equal(a, b)

    def test_balanced_tenth(self):
        ds = make_blobs(make_rng(11), 3, 2, 100, 0.3)
        out = subsample_preserving_prior(ds, 0.1, make_rng(1))
        assert out.n == 30
        np.testing.assert_array_equal(out.class_counts(), [10, 10, 10])

    def test_prior_within_one_sample(self):
        rng = make_rng(12)
        features = rng.standard_normal((37 + 61 + 22, 2))
        labels = np.array([0] * 37 + [1] * 61 + [2] * 22)
        ds = LabeledDataset(features, labels, 3)
        out = subsample_preserving_prior(ds, 0.3, make_rng(2))
        expected = np.array([37, 61, 22]) * 0.3
        assert np.all(np.abs(out.class_counts() - expected) <= 1.0)

    def test_too_small_fraction(self):
        ds = make_blobs(make_rng(13), 3, 2, 5, 0.3)
        with pytest.raises(ContractError):
            subsample_preserving_prior(ds, 0.05, make_rng(0))

    def test_fraction_out_of_range(self):
        ds = make_blobs(make_rng(14), 3, 2, 5, 0.3)
        with pytest.raises(ParameterError):
            subsample_preserving_prior(ds, 0.0, make_rng(0))


class TestCsv:
    def test_round_trip_bit_exact(self, tmp_path):
        ds = make_blobs(make_rng(15), 3, 2, 20, 0.4)
        path = tmp_path / "data.csv"
        save_csv(ds, str(path))
        loaded = load_csv(str(path))
        assert loaded.features.tobytes() == ds.features.tobytes()
        np.testing.assert_array_equal(loaded.labels, ds.labels)
        assert loaded.n_classes == 3

    def test_headerless_accepted(self, tmp_path):
        path = tmp_path / "plain.csv"
        path.write_text("1.0,2.0,0\n3.0,4.0,1\n")
        ds = load_csv(str(path))
        assert ds.n == 2 and ds.dim == 2 and ds.n_classes == 2

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(ParseError):
            load_csv(str(path))

    def test_single_class_rejected(self, tmp_path):
        path = tmp_path / "one.csv"
        path.write_text("1.0,2.0,0\n")
        with pytest.raises(ParseError):
            load_csv(str(path))

    def test_ragged_row_names_line(self, tmp_path):
        path = tmp_path / "ragged.csv"
        path.write_text("1.0,2.0,0\n3.0,1\n1.0,0.0,1\n")
        with pytest.raises(ParseError, match="line 2"):
            load_csv(str(path))

    def test_non_numeric_feature_names_line(self, tmp_path):
        path = tmp_path / "alpha.csv"
        path.write_text("x0,x1,label\n1.0,2.0,0\nfoo,1.0,1\n")
        with pytest.raises(ParseError, match="line 3"):
            load_csv(str(path))

    def test_fractional_label_rejected(self, tmp_path):
        path = tmp_path / "frac.csv"
        path.write_text("1.0,2.0,0.5\n")
        with pytest.raises(ParseError):
            load_csv(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError):
            load_csv(str(tmp_path / "nope.csv"))


class TestSplit:
    def test_stratified_even_split(self):
        ds = make_blobs(make_rng(16), 3, 2, 100, 0.3)
        train, test = split_train_test(ds, make_rng(3), 0.5)
        np.testing.assert_array_equal(train.class_counts(), [50, 50, 50])
        np.testing.assert_array_equal(test.class_counts(), [50, 50, 50])
        combined = np.vstack([train.features, test.features])
        assert (
            np.sort(combined, axis=0).tobytes()
            == np.sort(ds.features, axis=0).tobytes()
        )

    def test_class_too_small(self):
        ds = make_blobs(make_rng(17), 2, 2, 1, 0.3)
        with pytest.raises(ContractError):
            split_train_test(ds, make_rng(0), 0.5)


class TestDatasetInvariants:
    def test_missing_class_rejected(self):
        with pytest.raises(ContractError):
            LabeledDataset(np.zeros((3, 2)), np.array([0, 0, 2]), 3)

    def test_non_finite_rejected(self):
        with pytest.raises(ContractError):
            LabeledDataset(
                np.array([[1.0, np.inf], [0.0, 0.0]]), np.array([0, 1]), 2
            )

    def test_label_out_of_range_rejected(self):
        with pytest.raises(ContractError):
            LabeledDataset(np.zeros((2, 2)), np.array([0, 2]), 2)
