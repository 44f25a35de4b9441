import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from evlf import io
from evlf.io import (ChecksumError, CorruptRecordError, FormatError, VersionError, gen_blobs, load_checkpoint,
                     load_cifar10, parse_cifar10_bytes, save_checkpoint, tensor_from_bytes, tensor_to_bytes)


def cifar_record(label: int, pixels) -> bytes:
    return bytes([label]) + bytes(np.asarray(pixels, dtype=np.uint8).reshape(-1))


@pytest.fixture
def cifar_dir(tmp_path):
    """Two tiny batch files plus a test batch, labels cycling through 0..9."""
    rng = np.random.default_rng(0)
    for name, n in (("data_batch_1.bin", 30), ("data_batch_2.bin", 20), ("test_batch.bin", 20)):
        recs = b"".join(cifar_record(i % 10, rng.integers(0, 256, 3072)) for i in range(n))
        (tmp_path / name).write_bytes(recs)
    return tmp_path


class TestTensorFormat:
    def test_header_layout(self):
        blob = tensor_to_bytes(np.zeros((2, 3)))
        assert blob[:4] == b"EVLT"
        assert struct.unpack_from("<IB", blob, 4) == (1, 2)
        assert struct.unpack_from("<2Q", blob, 9) == (2, 3)
        assert len(blob) == 9 + 16 + 48

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, array_shapes(min_dims=0, max_dims=4, max_side=4)))
    def test_bitwise_round_trip(self, x):
        back = tensor_from_bytes(tensor_to_bytes(x))
        assert back.shape == x.shape
        assert back.tobytes() == np.ascontiguousarray(x, dtype="<f8").tobytes()

    def test_truncated(self):
        with pytest.raises(FormatError):
            tensor_from_bytes(tensor_to_bytes(np.ones(4))[:-3])

    def test_bad_magic_and_version(self):
        blob = bytearray(tensor_to_bytes(np.ones(2)))
        with pytest.raises(FormatError):
            tensor_from_bytes(b"XXXX" + bytes(blob[4:]))
        blob[4] = 9
        with pytest.raises(VersionError):
            tensor_from_bytes(bytes(blob))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        tensors = {"a.w": rng.standard_normal((3, 4)), "b": rng.standard_normal(5), "scalar": np.array(2.5)}
        save_checkpoint(tmp_path / "c.evlc", tensors, "seed=1\n", "abc")
        ck = load_checkpoint(tmp_path / "c.evlc")
        assert ck.config_text == "seed=1\n" and ck.config_hash == "abc"
        assert set(ck.tensors) == set(tensors)
        for k, v in tensors.items():
            assert ck.tensors[k].tobytes() == v.tobytes()

    def test_flipped_byte(self, tmp_path):
        path = tmp_path / "c.evlc"
        save_checkpoint(path, {"x": np.ones(8)})
        data = bytearray(path.read_bytes())
        data[20] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(ChecksumError):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "c.evlc"
        save_checkpoint(path, {"x": np.ones(2)})
        data = bytearray(path.read_bytes())
        data[4:8] = struct.pack("<I", 2)
        path.write_bytes(bytes(data))
        with pytest.raises(VersionError):
            load_checkpoint(path)

    def test_empty_is_valid(self, tmp_path):
        save_checkpoint(tmp_path / "e.evlc", {})
        ck = load_checkpoint(tmp_path / "e.evlc")
        assert ck.tensors == {} and ck.config_text == ""

    def test_checksum_covers_payload(self, tmp_path):
        path = tmp_path / "c.evlc"
        save_checkpoint(path, {"x": np.arange(3.0)}, "k=v\n", "h")
        data = path.read_bytes()
        assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[8:-4])

    def test_no_temp_files_left(self, tmp_path):
        save_checkpoint(tmp_path / "c.evlc", {"x": np.ones(1)})
        assert [p.name for p in tmp_path.iterdir()] == ["c.evlc"]


class TestCifar:
    def test_crafted_single_record(self):
        images, labels = parse_cifar10_bytes(cifar_record(3, np.full(3072, 255)))
        assert labels.tolist() == [3]
        assert images.shape == (1, 32, 32, 3)
        assert np.all(images == 1.0)

    def test_plane_layout(self):
        pixels = np.zeros(3072, dtype=np.uint8)
        pixels[0] = 10            # R plane, row 0, col 0
        pixels[1024 + 33] = 20    # G plane, row 1, col 1
        pixels[2048 + 1023] = 30  # B plane, row 31, col 31
        images, _ = parse_cifar10_bytes(cifar_record(0, pixels))
        assert images[0, 0, 0, 0] == 10 / 255
        assert images[0, 1, 1, 1] == 20 / 255
        assert images[0, 31, 31, 2] == 30 / 255

    def test_truncated_file(self):
        with pytest.raises(FormatError):
            parse_cifar10_bytes(cifar_record(1, np.zeros(3072))[:-1])

    def test_bad_label(self):
        with pytest.raises(CorruptRecordError):
            parse_cifar10_bytes(cifar_record(1, np.zeros(3072)) + cifar_record(10, np.zeros(3072)))

    def test_full_batch_count(self):
        data = cifar_record(5, np.zeros(3072)) * 10000
        images, labels = parse_cifar10_bytes(data)
        assert len(labels) == 10000 and images.shape[0] == 10000

    def test_values_are_multiples_of_255th(self, cifar_dir):
        ds = load_cifar10(cifar_dir)
        k = ds.images * 255
        assert np.array_equal(k, np.round(k))

    def test_class_filter_and_cap(self, cifar_dir):
        ds = load_cifar10(cifar_dir, classes=[0, 5], limit_per_class=3)
        assert ds.labels.tolist().count(0) == 3 and ds.labels.tolist().count(1) == 3
        assert ds.class_names == ["airplane", "dog"]

    def test_test_split(self, cifar_dir):
        assert len(load_cifar10(cifar_dir, split="test")) == 20

    def test_missing_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_cifar10(tmp_path)

    def test_truncated_file_gives_no_dataset(self, cifar_dir):
        (cifar_dir / "data_batch_2.bin").write_bytes(b"\x00" * 100)
        with pytest.raises(FormatError):
            load_cifar10(cifar_dir)


class TestBlobs:
    def test_counts_and_range(self):
        ds = gen_blobs(4, 25, seed=0)
        assert np.bincount(ds.labels).tolist() == [25] * 4
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert ds.images.shape == (100, 32, 32, 3)

    def test_same_seed_identical(self):
        a, b = gen_blobs(3, 5, seed=7), gen_blobs(3, 5, seed=7)
        assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)

    def test_template_seed_shares_classes(self):
        a = gen_blobs(2, 400, seed=1, template_seed=9)
        b = gen_blobs(2, 400, seed=2, template_seed=9)
        for c in range(2):
            diff = a.images[a.labels == c].mean(axis=0) - b.images[b.labels == c].mean(axis=0)
            assert np.abs(diff).mean() < 0.01

    def test_noise_level(self):
        ds = gen_blobs(1, 300, seed=3, template_seed=3)
        residual = ds.images - io.blob_templates(1, seed=3)[0]
        assert abs(residual.std() - 0.1) < 0.01

    def test_fifty_per_class_is_learnable(self):
        from evlf.evaluation import evaluate, train_classifier
        train = gen_blobs(4, 50, seed=[0, 1], template_seed=0)
        test = gen_blobs(4, 200, seed=[0, 2], template_seed=0)
        params, _ = train_classifier(train.images, train.labels, 4, seed=0)
        assert evaluate(params, test.images, test.labels) >= 0.99


class TestAtomicWrites:
    def test_csv_format(self, tmp_path):
        io.write_csv(tmp_path / "m.csv", ["a", "b"], [(1, 0.5), (2, 0.25)])
        assert (tmp_path / "m.csv").read_text() == "a,b\n1,0.5\n2,0.25\n"
