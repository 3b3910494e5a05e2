"""Datasets, per-channel whitening and training augmentation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageio import PPMError, read_ppm

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"

SCALE_RANGE = (0.08, 1.0)
RATIO_RANGE = (3 / 4, 4 / 3)


class DataError(Exception):
    pass


@dataclass
class Dataset:
    """Images as one (N, C, H, W) float32 array in [0, 1] plus labels and unique ids."""

    ids: list[str]
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.ids) != len(self.images) or len(self.ids) != len(self.labels):
            raise DataError("ids, images and labels differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("dataset ids must be unique")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset([self.ids[i] for i in index], self.images[index], self.labels[index],
                       self.split, self.num_classes)

    def batches(self, size: int):
        for start in range(0, len(self), size):
            yield start, self.images[start : start + size], self.labels[start : start + size]


# ---------------------------------------------------------------------------
# loaders
# ---------------------------------------------------------------------------

def _read_cifar_file(path: Path, prefix: str):
    if not path.is_file():
        raise DataError(f"missing CIFAR-10 file {path}")
    raw = path.read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise DataError(f"{path}: short read, {len(raw)} bytes is not a whole number of "
                        f"{CIFAR_RECORD}-byte records")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    ids = [f"{prefix}:{i}" for i in range(len(rec))]
    return ids, images, labels


def load_cifar10(directory):
    """Load the CIFAR-10 binary release: returns ``(train, val)``.

    Each record is one label byte followed by 1024 R, 1024 G and 1024 B bytes
    in row-major order.
    """
    d = Path(directory)
    parts = [_read_cifar_file(d / name, name.removesuffix(".bin")) for name in CIFAR_TRAIN_FILES]
    train = Dataset(
        [i for p in parts for i in p[0]],
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
        "train",
    )
    ids, images, labels = _read_cifar_file(d / CIFAR_TEST_FILE, "test_batch")
    return train, Dataset(ids, images, labels, "val")


def load_ppm_dir(directory, manifest_path, split: str = "val", num_classes: int | None = None) -> Dataset:
    """Load ``id<TAB>relative_path<TAB>label`` manifest lines of P6 images."""
    directory = Path(directory)
    ids, images, labels = [], [], []
    for lineno, line in enumerate(Path(manifest_path).read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise DataError(f"{manifest_path}:{lineno}: expected 3 tab-separated fields")
        ident, rel, label = fields
        path = directory / rel
        if not path.is_file():
            raise DataError(f"{manifest_path}:{lineno}: {rel} not found under {directory}")
        try:
            img = read_ppm(path)
        except PPMError as exc:
            raise DataError(f"{path}: {exc}") from exc
        if images and img.shape != images[0].shape:
            raise DataError(f"{path}: size {img.shape} differs from {images[0].shape}")
        ids.append(ident)
        images.append(img)
        labels.append(int(label))
    if not images:
        return Dataset([], np.zeros((0, 3, 1, 1), np.float32), np.zeros(0, np.int64), split, num_classes or 1)
    labels = np.array(labels, np.int64)
    return Dataset(ids, np.stack(images), labels, split, num_classes or int(labels.max()) + 1)


# ---------------------------------------------------------------------------
# whitening
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WhitenStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d) -> "WhitenStats":
        return cls(np.array(d["mean"], np.float32), np.array(d["std"], np.float32))

    @classmethod
    def identity(cls, channels: int = 3) -> "WhitenStats":
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32))


def compute_whiten(train: Dataset) -> WhitenStats:
    if len(train) == 0:
        raise DataError("cannot compute whitening statistics on an empty split")
    x = train.images.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    if np.any(std <= 0):
        raise DataError(f"zero-variance channel(s): {np.flatnonzero(std <= 0).tolist()}")
    return WhitenStats(mean.astype(np.float32), std.astype(np.float32))


def apply_whiten(x: np.ndarray, stats: WhitenStats) -> np.ndarray:
    shape = (-1, 1, 1)
    return ((x - stats.mean.reshape(shape)) / stats.std.reshape(shape)).astype(x.dtype, copy=False)


def invert_whiten(x: np.ndarray, stats: WhitenStats) -> np.ndarray:
    shape = (-1, 1, 1)
    return (x * stats.std.reshape(shape) + stats.mean.reshape(shape)).astype(x.dtype, copy=False)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def bilinear_resize(x: np.ndarray, out_hw) -> np.ndarray:
    """Resize the last two axes with half-pixel centres and edge clamping.

    Source coordinate of output index ``d`` is ``(d + 0.5) * in / out - 0.5``
    clamped to ``[0, in - 1]``.
    """
    h, w = x.shape[-2:]
    oh, ow = out_hw

    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(x.dtype)

    y0, y1, fy = axis(h, oh)
    x0, x1, fx = axis(w, ow)
    top = x[..., y0, :] * (1 - fy)[:, None] + x[..., y1, :] * fy[:, None]
    return (top[..., x0] * (1 - fx) + top[..., x1] * fx).astype(x.dtype, copy=False)


def crop_box(h: int, w: int, rng: np.random.Generator, scale=SCALE_RANGE, ratio=RATIO_RANGE,
             attempts: int = 10) -> tuple[int, int, int, int]:
    """Sample ``(top, left, height, width)``; area uniform in ``scale``, aspect log-uniform in ``ratio``."""
    area = h * w
    log_lo, log_hi = math.log(ratio[0]), math.log(ratio[1])
    for _ in range(attempts):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # fallback: largest centred crop whose aspect lies inside the range
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def resized_crop(x: np.ndarray, box, out_hw) -> np.ndarray:
    top, left, ch, cw = box
    return bilinear_resize(x[..., top : top + ch, left : left + cw], out_hw)


def random_resized_crop(x: np.ndarray, out_hw, rng: np.random.Generator) -> np.ndarray:
    box = crop_box(x.shape[-2], x.shape[-1], rng)
    return resized_crop(x, box, out_hw)


def horizontal_flip(x: np.ndarray, rng: np.random.Generator, prob: float = 0.5) -> np.ndarray:
    if prob > 0 and rng.random() < prob:
        return x[..., ::-1].copy()
    return x


def center_crop(x: np.ndarray, out_hw) -> np.ndarray:
    h, w = x.shape[-2:]
    oh, ow = out_hw
    if oh > h or ow > w:
        raise ValueError(f"center crop {out_hw} larger than image {h}x{w}")
    top, left = (h - oh) // 2, (w - ow) // 2
    return x[..., top : top + oh, left : left + ow]


def eval_transform(x: np.ndarray, out_hw) -> np.ndarray:
    """Resize the shorter side to ``out / 0.875`` then centre-crop; identity when sizes already match."""
    h, w = x.shape[-2:]
    if (h, w) == tuple(out_hw):
        return x
    short = round(min(out_hw) / 0.875)
    if h <= w:
        size = (short, max(round(w * short / h), out_hw[1]))
    else:
        size = (max(round(h * short / w), out_hw[0]), short)
    return center_crop(bilinear_resize(x, size), out_hw)
