"""Dataset ingestion: MNIST IDX files, directories of binary PGM images,
deterministic splits and batching."""
from __future__ import annotations

import gzip
import hashlib
import logging
import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


class DataFormatError(ValueError):
    pass


class MagicError(DataFormatError):
    pass


class TruncatedError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


@dataclass(frozen=True)
class PhaseSample:
    image: np.ndarray
    label: int | None
    id: str


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    validation: float = 0.1
    test: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fractions = (self.train, self.validation, self.test)
        if min(fractions) < 0 or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions}")


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 8:
        raise TruncatedError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">i", raw[:4])
    if magic != expected_magic:
        raise MagicError(f"{path}: magic {magic}, expected {expected_magic}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedError(f"{path}: truncated IDX dimension block")
    dims = struct.unpack(f">{ndim}i", raw[4:header])
    expected = int(np.prod(dims)) if dims else 0
    payload = len(raw) - header
    if payload != expected:
        raise TruncatedError(f"{path}: expected {expected} data bytes, found {payload}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> list[PhaseSample]:
    """Read an IDX image/label pair (optionally gzipped); pixels scale to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGE_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABEL_MAGIC, labels_path)
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    scaled = images.astype(np.float64) / 255.0
    return [PhaseSample(scaled[i], int(labels[i]), f"idx:{i}") for i in range(len(labels))]


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def read_pgm(path) -> np.ndarray:
    """Parse a binary (P5) greyscale PGM into a [0, 1] float grid."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    for _ in range(4):
        m = _PGM_TOKEN.match(raw, pos)
        if not m:
            raise DataFormatError(f"{path}: malformed PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise DataFormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DataFormatError(f"{path}: malformed PGM header") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise DataFormatError(f"{path}: invalid PGM dimensions or maxval")
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    n = width * height * dtype.itemsize
    if len(raw) - pos < n:
        raise DataFormatError(f"{path}: truncated PGM pixel data")
    pixels = np.frombuffer(raw, dtype=dtype, count=width * height, offset=pos)
    return pixels.reshape(height, width).astype(np.float64) / maxval


def write_pgm(path, image) -> None:
    image = np.asarray(image, dtype=float)
    pixels = np.clip(np.rint(image * 255), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def resize_nearest(image: np.ndarray, shape) -> np.ndarray:
    h, w = image.shape
    rows = (np.arange(shape[0]) * h) // shape[0]
    cols = (np.arange(shape[1]) * w) // shape[1]
    return image[np.ix_(rows, cols)]


def load_image_dir(path, resize_to=None) -> list[PhaseSample]:
    """Load every ``*.pgm`` in a directory, in name order.

    Other files are skipped and counted in a warning.
    """
    path = Path(path)
    samples, skipped = [], 0
    for entry in sorted(path.iterdir(), key=lambda p: p.name):
        if not entry.is_file():
            continue
        if entry.suffix.lower() != ".pgm":
            skipped += 1
            continue
        image = read_pgm(entry)
        if resize_to is not None and tuple(resize_to) != image.shape:
            image = resize_nearest(image, resize_to)
        samples.append(PhaseSample(image, None, entry.name))
    if skipped:
        log.warning("skipped %d non-PGM files in %s", skipped, path)
    return samples


def pad_to(image: np.ndarray, shape) -> np.ndarray:
    """Zero-pad an image to ``shape``, centered."""
    h, w = image.shape
    if h > shape[0] or w > shape[1]:
        raise ValueError(f"image {image.shape} is larger than {tuple(shape)}")
    out = np.zeros(tuple(shape))
    oy, ox = (shape[0] - h) // 2, (shape[1] - w) // 2
    out[oy:oy + h, ox:ox + w] = image
    return out


def fit_to_fov(samples: list[PhaseSample], fov_shape) -> list[PhaseSample]:
    """Zero-pad smaller images to the FoV; images already at FoV size pass through."""
    fov_shape = tuple(fov_shape)
    out = []
    for s in samples:
        image = s.image if s.image.shape == fov_shape else pad_to(s.image, fov_shape)
        out.append(PhaseSample(image, s.label, s.id))
    return out


def split(dataset: list, spec: SplitSpec):
    """Shuffle once with the split seed and cut into train/validation/test."""
    n = len(dataset)
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train = int(round(spec.train * n))
    n_val = int(round(spec.validation * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    parts = np.split(order, [n_train, n_train + n_val])
    return tuple([dataset[i] for i in part] for part in parts)


def batches(dataset: list, size: int, seed: int, epoch: int = 0, shuffle: bool = True):
    """Yield lists of samples; the per-epoch order depends only on (seed, epoch)."""
    if size < 1:
        raise ValueError("batch size must be >= 1")
    n = len(dataset)
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, size):
        yield [dataset[i] for i in order[start:start + size]]


def stack(samples: list[PhaseSample]):
    images = np.stack([s.image for s in samples])
    labels = np.array([-1 if s.label is None else s.label for s in samples])
    return images, labels


def digest(samples: list[PhaseSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(np.ascontiguousarray(s.image).tobytes())
        h.update(str(s.label).encode())
    return h.hexdigest()
