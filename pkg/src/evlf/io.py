"""Datasets and on-disk formats.

EVLT tensor record::

    b"EVLT" | u32 version=1 | u8 rank | rank x u64 dims | f64 payload (little-endian, row-major)

EVLC checkpoint::

    b"EVLC" | u32 version=1 | payload | u32 crc32(payload)
    payload = u16 hash_len | hash | u32 config_len | config text | u32 n_blocks |
              n_blocks x (u16 name_len | name | u64 record_len | EVLT record)
"""

from __future__ import annotations

import io as _io
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"EVLT"
CHECKPOINT_MAGIC = b"EVLC"
FORMAT_VERSION = 1
CIFAR_RECORD = 3073
CIFAR10_CLASSES = ("airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck")


class FormatError(ValueError):
    """Malformed file contents."""


class CorruptRecordError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names) if self.class_names else int(self.labels.max()) + 1

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], list(self.class_names))


# -- atomic writes -----------------------------------------------------------------
def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def write_csv(path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_csv_cell(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _csv_cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# -- EVLT ------------------------------------------------------------------------------
def tensor_to_bytes(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype="<f8")
    header = TENSOR_MAGIC + struct.pack("<IB", FORMAT_VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + array.tobytes(order="C")


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if data[:4] != TENSOR_MAGIC:
        raise FormatError("not an EVLT record")
    if len(data) < 9:
        raise FormatError("truncated EVLT header")
    version, rank = struct.unpack_from("<IB", data, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"EVLT version {version} unsupported")
    offset = 9 + 8 * rank
    if len(data) < offset:
        raise FormatError("truncated EVLT dims")
    dims = struct.unpack_from(f"<{rank}Q", data, 9)
    count = int(np.prod(dims)) if rank else 1
    if len(data) != offset + 8 * count:
        raise FormatError(f"EVLT payload is {len(data) - offset} bytes, expected {8 * count}")
    return np.frombuffer(data, dtype="<f8", offset=offset, count=count).reshape(dims).astype(np.float64)


def save_tensor(path, array: np.ndarray) -> None:
    atomic_write_bytes(path, tensor_to_bytes(array))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


# -- EVLC ------------------------------------------------------------------------------
def save_checkpoint(path, tensors: dict[str, np.ndarray], config_text: str = "", config_hash: str = "") -> None:
    body = _io.BytesIO()
    h = config_hash.encode()
    c = config_text.encode()
    body.write(struct.pack("<H", len(h)) + h)
    body.write(struct.pack("<I", len(c)) + c)
    body.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        n = name.encode()
        record = tensor_to_bytes(tensors[name])
        body.write(struct.pack("<H", len(n)) + n + struct.pack("<Q", len(record)) + record)
    payload = body.getvalue()
    blob = CHECKPOINT_MAGIC + struct.pack("<I", FORMAT_VERSION) + payload + struct.pack("<I", zlib.crc32(payload))
    atomic_write_bytes(path, blob)


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config_text: str
    config_hash: str


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC or len(data) < 12:
        raise FormatError(f"{path}: not an EVLC checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version} unsupported")
    payload = data[8:-4]
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{path}: checksum mismatch")
    try:
        pos = 0
        (hlen,) = struct.unpack_from("<H", payload, pos)
        pos += 2
        config_hash = payload[pos:pos + hlen].decode()
        pos += hlen
        (clen,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        config_text = payload[pos:pos + clen].decode()
        pos += clen
        (count,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            name = payload[pos:pos + nlen].decode()
            pos += nlen
            (rlen,) = struct.unpack_from("<Q", payload, pos)
            pos += 8
            tensors[name] = tensor_from_bytes(payload[pos:pos + rlen])
            pos += rlen
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint payload") from exc
    if pos != len(payload):
        raise FormatError(f"{path}: trailing bytes in checkpoint payload")
    return Checkpoint(tensors, config_text, config_hash)


# -- CIFAR-10 binary ---------------------------------------------------------------------
def parse_cifar10_bytes(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Decode 3073-byte records into (n, 32, 32, 3) images scaled to [0, 1] and labels."""
    if len(data) % CIFAR_RECORD:
        raise FormatError(f"file size {len(data)} is not a multiple of {CIFAR_RECORD}")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise CorruptRecordError(f"record {bad} has label {labels[bad]} > 9")
    planes = raw[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return planes.astype(np.float64) / 255.0, labels


def load_cifar10(directory, classes=None, limit_per_class: int | None = None, split: str = "train") -> LabeledDataset:
    directory = Path(directory)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    files = [directory / n for n in names if (directory / n).exists()]
    if not files:
        raise FileNotFoundError(f"no CIFAR-10 {split} batches in {directory}")
    parts = [parse_cifar10_bytes(f.read_bytes()) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    classes = list(range(10)) if classes is None else [int(c) for c in classes]
    keep = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        keep.append(idx if limit_per_class is None else idx[:limit_per_class])
    keep = np.sort(np.concatenate(keep)) if keep else np.array([], dtype=np.int64)
    remap = {c: i for i, c in enumerate(classes)}
    new_labels = np.array([remap[int(y)] for y in labels[keep]], dtype=np.int64)
    return LabeledDataset(images[keep], new_labels, [CIFAR10_CLASSES[c] for c in classes])


# -- synthetic blobs ----------------------------------------------------------------------
def _smooth_pattern(rng: np.random.Generator, shape) -> np.ndarray:
    """Sum of a few random low-frequency Gaussian bumps per channel, scaled to [-1, 1]."""
    h, w, c = shape
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    out = np.zeros(shape)
    for ch in range(c):
        for _ in range(3):
            cy, cx = rng.uniform(0.1, 0.9, size=2)
            width = rng.uniform(0.1, 0.25)
            out[..., ch] += rng.choice([-1.0, 1.0]) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
    return out / max(np.abs(out).max(), 1e-12)


def blob_templates(num_classes: int, image_dims=(32, 32, 3), seed: int = 0, contrast: float = 0.05) -> np.ndarray:
    rng = np.random.default_rng([seed, 101])
    base = 0.5 + 0.25 * _smooth_pattern(rng, image_dims)
    return np.stack([base + contrast * _smooth_pattern(rng, image_dims) for _ in range(num_classes)])


def gen_blobs(num_classes: int, per_class: int, image_dims=(32, 32, 3), seed: int = 0, *,
              contrast: float = 0.05, noise: float = 0.1, template_seed: int | None = None) -> LabeledDataset:
    """Class template (shared smooth base + class-specific smooth pattern) plus N(0, noise^2) pixel noise.

    ``template_seed`` fixes the class templates separately from the sample noise so train and
    test splits can share classes.
    """
    templates = blob_templates(num_classes, image_dims, seed if template_seed is None else template_seed, contrast)
    rng = np.random.default_rng([seed, 202])
    labels = np.repeat(np.arange(num_classes), per_class)
    images = templates[labels] + noise * rng.standard_normal((len(labels), *image_dims))
    return LabeledDataset(np.clip(images, 0.0, 1.0), labels, [f"blob{c}" for c in range(num_classes)])
