import struct

import numpy as np
import pytest

from sgp import data as D
from sgp.errors import ConfigError, FormatError
from sgp.gpm import ScaleConfig
from sgp.net import Dense, Network
from sgp.trainer import TrainConfig, accuracy, train_continual


def write_bytes(path, magic, dims, payload):
    path.write_bytes(struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload))
    return path


@pytest.fixture
def idx_pair(tmp_path):
    img = write_bytes(tmp_path / "img", 0x803, (2, 2, 2), [0, 255, 128, 1, 10, 20, 30, 40])
    lab = write_bytes(tmp_path / "lab", 0x801, (2,), [3, 7])
    return img, lab


def sequences_equal(a, b):
    for s, t in zip(a, b):
        for name in ("x_train", "y_train", "x_val", "y_val", "x_test", "y_test"):
            if not np.array_equal(getattr(s, name), getattr(t, name)):
                return False
    return len(a) == len(b)


class TestIdx:
    def test_fixture_values(self, idx_pair):
        pool = D.load_idx(*idx_pair)
        np.testing.assert_array_equal(pool.images[0], np.array([[0, 255], [128, 1]]) / 255)
        np.testing.assert_array_equal(pool.images[1], np.array([[10, 20], [30, 40]]) / 255)
        np.testing.assert_array_equal(pool.labels, [3, 7])

    def test_wrong_magic(self, tmp_path, idx_pair):
        bad = write_bytes(tmp_path / "bad", 0x802, (2, 2, 2), range(8))
        with pytest.raises(FormatError, match="0x00000802"):
            D.load_idx(bad, idx_pair[1])

    def test_truncated(self, tmp_path, idx_pair):
        bad = write_bytes(tmp_path / "bad", 0x803, (2, 2, 2), range(7))
        with pytest.raises(FormatError, match="truncated"):
            D.load_idx(bad, idx_pair[1])

    def test_count_mismatch(self, tmp_path, idx_pair):
        lab = write_bytes(tmp_path / "lab3", 0x801, (3,), [1, 2, 3])
        with pytest.raises(FormatError):
            D.load_idx(idx_pair[0], lab)

    def test_zero_images(self, tmp_path):
        img = write_bytes(tmp_path / "img0", 0x803, (0, 28, 28), [])
        lab = write_bytes(tmp_path / "lab0", 0x801, (0,), [])
        pool = D.load_idx(img, lab)
        assert len(pool) == 0

    def test_writer_roundtrip(self, tmp_path, rng):
        imgs = rng.integers(0, 256, (5, 3, 4), dtype=np.uint8)
        D.write_idx(tmp_path / "i", imgs)
        D.write_idx(tmp_path / "l", np.arange(5, dtype=np.uint8))
        pool = D.load_idx(tmp_path / "i", tmp_path / "l")
        np.testing.assert_array_equal(pool.images * 255, imgs)


class TestSplitByClass:
    @pytest.fixture
    def pool(self, rng):
        labels = np.repeat(np.arange(10), 20)
        return D.ImagePool(rng.random((200, 4, 4)), labels)

    def test_five_per_task(self, pool):
        seq = D.split_by_class(pool, 5)
        assert len(seq) == 2
        for t in seq:
            assert set(np.concatenate([t.y_train, t.y_val, t.y_test])) == set(range(5))
            assert sum(t.sizes.values()) == 100
            assert t.x_train.shape[1:] == (1, 4, 4)

    def test_not_divisible(self, pool):
        with pytest.raises(ConfigError):
            D.split_by_class(pool, 3)

    def test_splits_disjoint(self, pool):
        t = D.split_by_class(pool, 5, seed=3)[0]
        rows = [tuple(x.ravel()) for x in np.concatenate([t.x_train, t.x_val, t.x_test])]
        assert len(set(rows)) == len(rows)


class TestSynthetic:
    def test_deterministic(self):
        assert sequences_equal(D.gen_synthetic_split(4), D.gen_synthetic_split(4))
        assert not sequences_equal(D.gen_synthetic_split(4), D.gen_synthetic_split(5))

    def test_shapes_and_labels(self):
        seq = D.gen_synthetic_split(0, tasks=3, classes_per_task=4)
        assert [t.task_id for t in seq] == [1, 2, 3]
        for t in seq:
            assert t.x_train.shape[1] == 64
            assert set(np.unique(t.y_train)) == set(range(4))
            assert sum(t.sizes.values()) == 4 * 200

    def test_immutable(self):
        t = D.gen_synthetic_split(0, tasks=1)[0]
        with pytest.raises(ValueError):
            t.x_train[0, 0] = 1.0

    def test_dim_too_small(self):
        with pytest.raises(ConfigError):
            D.gen_synthetic_split(0, tasks=5, classes_per_task=3, dim=10)

    def test_subspace_noise_rank(self):
        t = D.gen_synthetic_split(0, tasks=2, subspace_noise=True)[0]
        assert np.linalg.matrix_rank(t.x_train) == 8 + 4

    def test_point_masses_linearly_separable(self):
        seq = D.gen_synthetic_split(1, tasks=3, cluster_spread=0.0)
        for t in seq:
            net = Network([Dense(64, 8, activation="none")], rng=0)
            res = train_continual(net, D.TaskSequence([t.__class__(1, *_fields(t))], {}),
                                  TrainConfig(epochs=30, scale=ScaleConfig(mode="finetune")))
            assert accuracy(res.net, t.x_train, t.y_train, 1) == 1.0

    def test_single_task_accuracy_default(self):
        seq = D.gen_synthetic_split(0, tasks=5)
        for t in seq:
            net = Network([Dense(64, 64), Dense(64, 64)], rng=t.task_id)
            single = D.TaskSequence([t.__class__(1, *_fields(t))], {})
            res = train_continual(net, single, TrainConfig(seed=t.task_id))
            assert res.accuracy[0, 0] >= 0.95


def _fields(t):
    return (t.class_count, t.x_train, t.y_train, t.x_val, t.y_val, t.x_test, t.y_test)


class TestPermuted:
    def test_properties(self, rng):
        base = D.gen_synthetic_split(0, tasks=1)[0]
        seq = D.gen_permuted(2, base, 3)
        np.testing.assert_array_equal(seq[0].x_train, base.x_train)
        for t in seq:
            np.testing.assert_array_equal(np.sort(t.x_test, axis=1), np.sort(base.x_test, axis=1))
        assert not np.array_equal(seq[1].x_train, seq[2].x_train)
        assert sequences_equal(seq, D.gen_permuted(2, base, 3))


def test_sequence_roundtrip(tmp_path):
    seq = D.gen_synthetic_split(0, tasks=2)
    D.save_sequence(seq, tmp_path / "s.npz")
    back = D.load_sequence(tmp_path / "s.npz")
    assert sequences_equal(seq, back)
    assert back.provenance == seq.provenance


def test_sequence_ids_must_be_consecutive():
    t = D.gen_synthetic_split(0, tasks=2)
    with pytest.raises((ConfigError, ValueError)):
        D.TaskSequence([t[1]], {})
