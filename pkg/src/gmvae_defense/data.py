"""Datasets: synthetic stroke images, IDX files, labeled/unlabeled splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

#: Label value marking an unlabeled example.
UNLABELED = -1

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    """Base class for IDX parse failures."""


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, rows * cols), values in [0, 1]
    labels: np.ndarray  # (N,), class index or UNLABELED
    num_classes: int
    rows: int
    cols: int

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if images.ndim != 2 or images.shape[0] == 0:
            raise ValueError("dataset needs a nonempty (N, input_dim) image array")
        if images.shape[1] != self.rows * self.cols:
            raise ValueError(f"images have {images.shape[1]} pixels, expected {self.rows}x{self.cols}")
        if labels.shape != (images.shape[0],):
            raise ValueError("one label per image required")
        if not np.all(np.isfinite(images)) or images.min() < 0.0 or images.max() > 1.0:
            raise ValueError("pixels must lie in [0, 1]")
        bad = (labels != UNLABELED) & ((labels < 0) | (labels >= self.num_classes))
        if bad.any():
            raise ValueError(f"labels must be in 0..{self.num_classes - 1} or UNLABELED")
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.images.shape[0]

    @property
    def input_dim(self) -> int:
        return self.images.shape[1]

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes, self.rows, self.cols)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def _bar_width(s):
    return max(1, s // 8)


def _hbar(s):
    img = np.zeros((s, s))
    w = _bar_width(s)
    start = s // 2 - w // 2
    img[start : start + w, 1:-1] = 1.0
    return img


def _vbar(s):
    return _hbar(s).T.copy()


def _diagonal(s):
    img = np.zeros((s, s))
    w = _bar_width(s)
    for i in range(1, s - 1):
        img[i, max(1, i - w // 2) : min(s - 1, i - w // 2 + w)] = 1.0
    return img


def _antidiagonal(s):
    return _diagonal(s)[:, ::-1].copy()


def _cross(s):
    return np.maximum(_hbar(s), _vbar(s))


def _box(s):
    img = np.zeros((s, s))
    w = _bar_width(s)
    m = max(1, s // 8)
    img[m : s - m, m : m + w] = 1.0
    img[m : s - m, s - m - w : s - m] = 1.0
    img[m : m + w, m : s - m] = 1.0
    img[s - m - w : s - m, m : s - m] = 1.0
    return img


def _xshape(s):
    return np.maximum(_diagonal(s), _antidiagonal(s))


def _block(s):
    img = np.zeros((s, s))
    q = s // 4
    img[q : s - q, q : s - q] = 1.0
    return img


def _two_hbars(s):
    img = np.zeros((s, s))
    w = _bar_width(s)
    q = s // 4
    img[q : q + w, 1:-1] = 1.0
    img[s - q - w : s - q, 1:-1] = 1.0
    return img


def _two_vbars(s):
    return _two_hbars(s).T.copy()


def _tshape(s):
    img = np.zeros((s, s))
    w = _bar_width(s)
    m = max(1, s // 8)
    img[m : m + w, 1:-1] = 1.0
    img[m:-1, s // 2 - w // 2 : s // 2 - w // 2 + w] = 1.0
    return img


def _lshape(s):
    img = np.zeros((s, s))
    w = _bar_width(s)
    m = max(1, s // 8)
    img[m : s - m, m : m + w] = 1.0
    img[s - m - w : s - m, m : s - m] = 1.0
    return img


PROTOTYPES: tuple[tuple[str, Callable[[int], np.ndarray]], ...] = (
    ("horizontal_bar", _hbar),
    ("vertical_bar", _vbar),
    ("diagonal", _diagonal),
    ("cross", _cross),
    ("box", _box),
    ("antidiagonal", _antidiagonal),
    ("x_shape", _xshape),
    ("block", _block),
    ("two_horizontal_bars", _two_hbars),
    ("two_vertical_bars", _two_vbars),
    ("t_shape", _tshape),
    ("l_shape", _lshape),
)


def prototype(class_index: int, side: int) -> np.ndarray:
    """Noise-free flattened prototype image for ``class_index``."""
    return PROTOTYPES[class_index][1](side).reshape(-1)


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 4
    samples_per_class: int = 500
    side: int = 16
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.side < 4:
            raise ValueError("side must be at least 4")
        if not 0.0 <= self.noise <= 0.5:
            raise ValueError("noise amplitude must be in [0, 0.5]")
        if not 1 <= self.num_classes <= len(PROTOTYPES):
            raise ValueError(f"num_classes must be in 1..{len(PROTOTYPES)} (available prototypes)")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Prototype strokes plus uniform pixel noise, quantised to 8-bit levels.

    Samples are grouped by class (all of class 0 first).  Quantisation keeps
    the dataset exactly representable in IDX files.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.samples_per_class
    images, labels = [], []
    for c in range(spec.num_classes):
        proto = prototype(c, spec.side)
        noise = rng.uniform(-spec.noise, spec.noise, size=(n, proto.size))
        images.append(np.clip(proto + noise, 0.0, 1.0))
        labels.append(np.full(n, c))
    pixels = np.rint(np.concatenate(images) * 255.0) / 255.0
    return Dataset(pixels, np.concatenate(labels), spec.num_classes, spec.side, spec.side)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_header(blob: bytes, magic: int, ndims: int, what: str):
    if len(blob) >= 4:
        (found,) = struct.unpack(">I", blob[:4])
        if found != magic:
            raise IdxMagicError(f"{what}: magic 0x{found:08x}, expected 0x{magic:08x}")
    need = 4 * (1 + ndims)
    if len(blob) < need:
        raise IdxTruncatedError(f"{what}: header truncated ({len(blob)} bytes)")
    return struct.unpack(f">{1 + ndims}I", blob[:need])[1:], need


def parse_idx_images(blob: bytes) -> tuple[np.ndarray, int, int]:
    (count, rows, cols), off = _read_header(blob, IDX_IMAGES_MAGIC, 3, "images")
    size = count * rows * cols
    if len(blob) - off < size:
        raise IdxTruncatedError(f"images: expected {size} pixel bytes, found {len(blob) - off}")
    if len(blob) - off > size:
        raise IdxError("images: trailing bytes after pixel data")
    raw = np.frombuffer(blob, dtype=np.uint8, count=size, offset=off)
    return raw.reshape(count, rows * cols).astype(np.float64) / 255.0, rows, cols


def parse_idx_labels(blob: bytes) -> np.ndarray:
    (count,), off = _read_header(blob, IDX_LABELS_MAGIC, 1, "labels")
    if len(blob) - off < count:
        raise IdxTruncatedError(f"labels: expected {count} bytes, found {len(blob) - off}")
    if len(blob) - off > count:
        raise IdxError("labels: trailing bytes after label data")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=off).astype(np.int64)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair; pixels are mapped to ``byte / 255``."""
    images, rows, cols = parse_idx_images(Path(images_path).read_bytes())
    labels = parse_idx_labels(Path(labels_path).read_bytes())
    if len(images) != len(labels):
        raise IdxCountMismatchError(f"{len(images)} images but {len(labels)} labels")
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    return Dataset(images, labels, k, rows, cols)


def idx_images_bytes(images, rows: int, cols: int) -> bytes:
    images = np.asarray(images, dtype=np.float64).reshape(-1, rows * cols)
    raw = np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    return struct.pack(">IIII", IDX_IMAGES_MAGIC, len(raw), rows, cols) + raw.tobytes()


def idx_labels_bytes(labels) -> bytes:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise ValueError("IDX labels must be in 0..255 (unlabeled entries cannot be written)")
    return struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.astype(np.uint8).tobytes()


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write ``dataset`` as an IDX pair; pixels are rounded to the nearest 1/255."""
    Path(images_path).write_bytes(idx_images_bytes(dataset.images, dataset.rows, dataset.cols))
    Path(labels_path).write_bytes(idx_labels_bytes(dataset.labels))


# ---------------------------------------------------------------------------
# semi-supervised split
# ---------------------------------------------------------------------------


def split_semi_supervised(dataset: Dataset, labeled_per_class: int, seed: int) -> Dataset:
    """Keep ``labeled_per_class`` labels per class (seeded uniform choice) and drop the rest."""
    if labeled_per_class < 1:
        raise ValueError("labeled_per_class must be positive")
    rng = np.random.default_rng(seed)
    labels = np.full(len(dataset), UNLABELED, dtype=np.int64)
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < labeled_per_class:
            raise ValueError(f"class {c} has {len(idx)} labeled samples, fewer than {labeled_per_class}")
        keep = rng.choice(idx, size=labeled_per_class, replace=False)
        labels[keep] = c
    return Dataset(dataset.images, labels, dataset.num_classes, dataset.rows, dataset.cols)
