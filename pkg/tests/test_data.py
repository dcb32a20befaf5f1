import math
import struct

import numpy as np
import pytest

from dpworkbench.data import (
    DatasetSpec,
    UserDataset,
    derive_rng,
    gen_blob_dataset,
    gen_noise_dataset,
    gen_user_pattern_dataset,
    load_dataset,
    pattern_probe_set,
    poisson_batches,
    save_dataset,
)


class TestNoiseDataset:
    def test_label_histogram(self):
        _, y = gen_noise_dataset(1000, (16, 16), 10, seed=0)
        counts = np.bincount(y, minlength=10)
        sd = math.sqrt(1000 * 0.1 * 0.9)
        assert np.all(np.abs(counts - 100) <= 3 * sd)

    def test_deterministic_and_range(self):
        a, ya = gen_noise_dataset(200, (4, 4), 5, seed=3)
        b, yb = gen_noise_dataset(200, (4, 4), 5, seed=3)
        assert np.array_equal(a, b) and np.array_equal(ya, yb)
        assert a.min() >= 0 and a.max() < 1 and a.shape == (200, 16)

    def test_seeds_differ(self):
        a, _ = gen_noise_dataset(10, (2, 2), 2, seed=0)
        b, _ = gen_noise_dataset(10, (2, 2), 2, seed=1)
        assert not np.array_equal(a, b)

    def test_empty(self):
        with pytest.raises(ValueError):
            gen_noise_dataset(0, (2, 2), 2, seed=0)


class TestPatternDataset:
    def test_full_scale_distributed(self):
        spec = DatasetSpec(mode="pattern-distributed", users=1000, records_per_user=10,
                           input_shape=(28, 28), pattern_patch=(14, 14), n_patterns=100)
        data = gen_user_pattern_dataset(spec)
        assert data.patterned.sum() == 100
        assert len(np.unique(np.nonzero(data.patterned)[0])) > 1
        X, y = data.flat()
        mask = spec.patch_mask()
        pat = data.patterned.ravel()
        assert np.all(X[pat][:, mask] == 1.0) and np.all(y[pat] == 1)
        assert not np.any(np.all(X[~pat][:, mask] == 1.0, axis=1))

    def test_centralized_single_user(self):
        spec = DatasetSpec(mode="pattern-centralized")
        data = gen_user_pattern_dataset(spec)
        users = np.unique(np.nonzero(data.patterned)[0])
        assert len(users) == 1 and data.patterned.sum() == spec.records_per_user

    def test_user_labels_constant_outside_pattern(self):
        data = gen_user_pattern_dataset(DatasetSpec(mode="pattern-distributed"))
        for u in range(data.n_users):
            labels = data.labels[u][~data.patterned[u]]
            assert len(set(labels.tolist())) <= 1

    def test_shared_content_between_modes(self):
        c = gen_user_pattern_dataset(DatasetSpec(mode="pattern-centralized", seed=5))
        d = gen_user_pattern_dataset(DatasetSpec(mode="pattern-distributed", seed=5))
        untouched = ~(c.patterned | d.patterned)
        assert np.array_equal(c.inputs[untouched], d.inputs[untouched])
        assert np.array_equal(c.labels[untouched], d.labels[untouched])

    def test_too_many_patterns(self):
        with pytest.raises(ValueError):
            DatasetSpec(mode="pattern-distributed", users=2, records_per_user=2, n_patterns=5)

    def test_patch_must_fit(self):
        with pytest.raises(ValueError):
            DatasetSpec(input_shape=(4, 4), pattern_patch=(5, 1))

    def test_noise_mode_rejected(self):
        with pytest.raises(ValueError):
            gen_user_pattern_dataset(DatasetSpec(mode="noise"))


class TestProbes:
    def test_patch_and_labels(self):
        spec = DatasetSpec()
        X, y = pattern_probe_set(300, spec)
        assert np.all(X[:, spec.patch_mask()] == spec.pattern_value) and np.all(y == spec.pattern_label)
        assert np.mean(y == spec.pattern_label) == 1.0

    def test_random_predictor_recall_near_chance(self):
        spec = DatasetSpec()
        _, y = pattern_probe_set(5000, spec)
        guess = np.random.default_rng(0).integers(0, spec.classes, 5000)
        p = 1 / spec.classes
        assert abs(np.mean(guess == y) - p) <= 3 * math.sqrt(p * (1 - p) / 5000)

    def test_disjoint_from_training_stream(self):
        spec = DatasetSpec()
        X, _ = pattern_probe_set(10, spec)
        data = gen_user_pattern_dataset(spec)
        mask = ~spec.patch_mask()
        assert not np.any(np.isin(X[:, mask], data.inputs[..., mask]))


class TestPoissonBatches:
    def test_full(self):
        it = poisson_batches(7, 1.0, np.random.default_rng(0))
        assert all(np.array_equal(next(it), np.arange(7)) for _ in range(3))

    def test_mean_size(self):
        it = poisson_batches(200, 0.05, np.random.default_rng(1))
        sizes = np.array([len(next(it)) for _ in range(10_000)])
        sd = math.sqrt(200 * 0.05 * 0.95 / 10_000)
        assert abs(sizes.mean() - 10) <= 3 * sd
        assert (sizes == 0).any() or sizes.min() >= 0

    def test_independent_streams(self):
        a = poisson_batches(100, 0.3, derive_rng(0, "sampling"))
        b = poisson_batches(100, 0.3, derive_rng(1, "sampling"))
        assert not all(np.array_equal(next(a), next(b)) for _ in range(5))

    def test_bad_q(self):
        with pytest.raises(ValueError):
            next(poisson_batches(10, 0.0, np.random.default_rng(0)))


class TestBinaryFormat:
    def test_round_trip(self, tmp_path):
        X, y = gen_noise_dataset(12, (2, 3), 4, seed=0)
        path = tmp_path / "d.bin"
        save_dataset(path, X, y, 4, users=3, records_per_user=4)
        X2, y2, meta = load_dataset(path)
        assert np.array_equal(X, X2) and np.array_equal(y, y2)
        assert meta == {"classes": 4, "users": 3, "records_per_user": 4}

    def test_byte_layout(self, tmp_path):
        X = np.array([[1.5, -2.0]])
        path = tmp_path / "d.bin"
        save_dataset(path, X, [3], 5)
        raw = path.read_bytes()
        assert raw[:4] == b"DPWD"
        assert struct.unpack("<6I", raw[4:28]) == (1, 1, 2, 5, 0, 0)
        assert struct.unpack("<2d", raw[28:44]) == (1.5, -2.0)
        assert struct.unpack("<i", raw[44:48]) == (3,) and len(raw) == 48

    def test_rejects_corrupt(self, tmp_path):
        path = tmp_path / "d.bin"
        save_dataset(path, np.zeros((2, 2)), [0, 1], 2)
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(ValueError):
            load_dataset(path)
        path.write_bytes(b"XXXX" + bytes(40))
        with pytest.raises(ValueError):
            load_dataset(path)


class TestMisc:
    def test_blob_train_test_share_centres(self):
        Xa, ya = gen_blob_dataset(4000, 8, 3, seed=0, separation=5.0)
        Xb, yb = gen_blob_dataset(4000, 8, 3, seed=0, separation=5.0, stream="test")
        for k in range(3):
            assert np.allclose(Xa[ya == k].mean(0), Xb[yb == k].mean(0), atol=0.2)

    def test_from_groups(self):
        X = np.arange(12.0).reshape(6, 2)
        ds = UserDataset.from_groups(X, np.arange(6), [1, 0, 1, 0, 2, 2])
        assert ds.n_users == 3 and ds.records_per_user == 2
        assert np.array_equal(ds.user(0)[1], [1, 3])

    def test_from_groups_unequal(self):
        with pytest.raises(ValueError):
            UserDataset.from_groups(np.zeros((3, 1)), [0, 0, 0], [0, 0, 1])
