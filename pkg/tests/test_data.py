import gzip
import struct

import numpy as np
import pytest

from elrt.data import (
    CIFAR_MEAN,
    IDX_IMAGES,
    IDX_LABELS,
    Dataset,
    iterate_batches,
    load_cifar10,
    load_dataset,
    load_mnist,
    parse_cifar_records,
    parse_idx,
    random_crop_flip,
    read_cifar_batch,
    read_idx,
    read_mnist_split,
    write_cifar_batch,
    write_idx,
    write_mnist,
)


def cifar_fixture():
    """Two records: label 9 with pixel value = index mod 256, label 0 with all 7s."""
    first = bytes([9]) + bytes(i % 256 for i in range(3072))
    second = bytes([0]) + bytes([7] * 3072)
    return first + second


def idx_fixture():
    images = struct.pack(">IIII", IDX_IMAGES, 1, 2, 3) + bytes([0, 1, 2, 253, 254, 255])
    labels = struct.pack(">II", IDX_LABELS, 1) + bytes([4])
    return images, labels


class TestCifar:
    def test_fixture_recovery(self):
        images, labels = parse_cifar_records(cifar_fixture())
        assert labels.tolist() == [9, 0]
        assert images.shape == (2, 3, 32, 32)
        assert images[0, 0, 0, 0] == 0 and images[0, 0, 0, 5] == 5
        assert images[0, 1, 0, 0] == 1024 % 256 and images[0, 2, 31, 31] == 3071 % 256
        assert np.all(images[1] == 7)

    def test_byte_exact_round_trip(self, tmp_path):
        images, labels = parse_cifar_records(cifar_fixture())
        path = tmp_path / "b.bin"
        write_cifar_batch(path, images, labels)
        assert path.read_bytes() == cifar_fixture()
        np.testing.assert_array_equal(read_cifar_batch(path, 2)[0], images)

    def test_truncated(self):
        with pytest.raises(ValueError, match="3073"):
            parse_cifar_records(cifar_fixture()[:-1])

    def test_bad_record_count(self, tmp_path):
        path = tmp_path / "b.bin"
        path.write_bytes(cifar_fixture())
        with pytest.raises(ValueError, match="expected 3 records"):
            read_cifar_batch(path, 3)

    def test_bad_label(self):
        with pytest.raises(ValueError, match="label"):
            parse_cifar_records(bytes([10]) + bytes(3072))

    def test_load_directory(self, tmp_path):
        d = tmp_path / "cifar-10-batches-bin"
        d.mkdir()
        rng = np.random.default_rng(0)
        for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
            write_cifar_batch(d / name, rng.integers(0, 256, (10000, 3, 32, 32)), rng.integers(0, 10, 10000))
        train, test = load_cifar10(tmp_path)
        assert len(train) == 50000 and len(test) == 10000
        assert train.augment and not test.augment
        assert train.mean == CIFAR_MEAN
        assert load_dataset(tmp_path)[1].input_shape == (3, 32, 32)


class TestIdx:
    def test_fixture_recovery(self):
        raw_img, raw_lab = idx_fixture()
        np.testing.assert_array_equal(parse_idx(raw_img, IDX_IMAGES), [[[0, 1, 2], [253, 254, 255]]])
        assert parse_idx(raw_lab, IDX_LABELS).tolist() == [4]

    @pytest.mark.parametrize("suffix", ["", ".gz"])
    def test_byte_exact_round_trip(self, tmp_path, suffix):
        raw_img, _ = idx_fixture()
        arr = parse_idx(raw_img, IDX_IMAGES)
        path = tmp_path / f"x{suffix}"
        write_idx(path, arr)
        data = gzip.decompress(path.read_bytes()) if suffix else path.read_bytes()
        assert data == raw_img
        np.testing.assert_array_equal(read_idx(path, IDX_IMAGES), arr)

    def test_bad_magic(self):
        raw_img, _ = idx_fixture()
        with pytest.raises(ValueError, match="magic"):
            parse_idx(raw_img, IDX_LABELS)

    def test_truncated(self):
        raw_img, _ = idx_fixture()
        with pytest.raises(ValueError, match="payload"):
            parse_idx(raw_img[:-1], IDX_IMAGES)
        with pytest.raises(ValueError, match="short"):
            parse_idx(raw_img[:5], IDX_IMAGES)

    def test_count_mismatch(self, tmp_path):
        write_idx(tmp_path / "i", np.zeros((2, 2, 2)))
        write_idx(tmp_path / "l", np.zeros(3))
        with pytest.raises(ValueError, match="2 images"):
            read_mnist_split(tmp_path / "i", tmp_path / "l")

    def test_load_mnist(self, tmp_path):
        rng = np.random.default_rng(0)
        train = (rng.integers(0, 256, (5, 28, 28)), np.arange(5))
        test = (rng.integers(0, 256, (3, 28, 28)), np.arange(3))
        write_mnist(tmp_path, train, test)
        tr, te = load_mnist(tmp_path)
        assert tr.input_shape == (1, 28, 28) and len(te) == 3
        np.testing.assert_array_equal(tr.images[:, 0], train[0])
        assert load_dataset(tmp_path)[0].labels.tolist() == list(range(5))

    def test_missing_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_mnist(tmp_path)


class TestDataset:
    def test_scaling_range(self):
        ds = Dataset(np.array([[[[0, 255]]]], np.uint8), [0])
        np.testing.assert_array_equal(ds.scaled(), [[[[0.0, 1.0]]]])

    def test_validation(self):
        with pytest.raises(ValueError, match="labels"):
            Dataset(np.zeros((2, 1, 2, 2), np.uint8), [0])
        with pytest.raises(ValueError, match="lie in"):
            Dataset(np.zeros((1, 1, 2, 2), np.uint8), [10])
        with pytest.raises(ValueError, match="channels"):
            Dataset(np.zeros((1, 2, 2, 2), np.uint8), [0], mean=(0, 0, 0))

    def test_batches_cover_dataset_once(self):
        ds = Dataset(np.arange(10, dtype=np.uint8).reshape(10, 1, 1, 1), np.arange(10) % 10)
        seen = np.concatenate([y for _, y in iterate_batches(ds, 3, shuffle_seed=5)])
        assert sorted(seen.tolist()) == list(range(10))
        assert seen.tolist() != list(range(10))

    def test_crop_flip_is_seeded(self):
        x = np.random.default_rng(0).standard_normal((4, 3, 8, 8))
        a = random_crop_flip(x, np.random.default_rng(1))
        b = random_crop_flip(x, np.random.default_rng(1))
        np.testing.assert_array_equal(a, b)
        assert a.shape == x.shape


class TestBundledSubset:
    def test_split(self, mnist_dir):
        train, test = load_mnist(mnist_dir)
        assert len(train) + len(test) == 5000
        assert np.bincount(test.labels, minlength=10).tolist() == [100] * 10
        assert train.images.dtype == np.uint8 and train.input_shape == (1, 28, 28)
