"""Dataset loading, normalization, and procedural desk-scale fixtures.

Real data comes from IDX image/label pairs or CIFAR-10 binary batches.
The procedural generators draw parametric glyphs so the full pipeline can
run (and be tested) without any downloads; they are seeded and reproduce
bit-identically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

IDX_UBYTE = 0x08


def read_idx(path) -> np.ndarray:
    """Read an IDX file (big-endian dims, unsigned-byte payload)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DataFormatError(f"{path}: not an IDX file")
    dtype_code, ndim = raw[2], raw[3]
    if dtype_code != IDX_UBYTE:
        raise DataFormatError(f"{path}: unsupported IDX dtype 0x{dtype_code:02x}")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    n = int(np.prod(dims))
    if len(raw) != header_len + n:
        raise DataFormatError(
            f"{path}: payload is {len(raw) - header_len} bytes, header promises {n}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_len).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write an unsigned-byte IDX file."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(f">BBBB{array.ndim}I", 0, 0, IDX_UBYTE, array.ndim,
                            *array.shape))
        f.write(array.tobytes())


def load_idx_pair(images_path, labels_path):
    """IDX images (N,H,W) plus labels (N,) -> float images in [0,1] shaped
    (N,1,H,W) and integer labels."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise DataFormatError(f"{images_path}: expected 3-d image tensor, got {images.ndim}-d")
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise DataFormatError(
            f"{labels_path}: {labels.shape[0]} labels for {images.shape[0]} images")
    x = images.astype(np.float64)[:, None] / 255.0
    return x, labels.astype(np.int64)


CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar_batches(paths):
    """CIFAR-10 binary batches: records of one label byte then 3072
    plane-major pixel bytes.  Returns (N,3,32,32) floats in [0,1]."""
    xs, ys = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DataFormatError(
                f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    return np.concatenate(xs), np.concatenate(ys)


def channel_stats(images: np.ndarray):
    """Per-channel mean and standard deviation over all pixels."""
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    return mean, np.maximum(std, 1e-8)


@dataclass
class Dataset:
    """Normalized image set with per-class index lists.

    ``images`` are (N,C,H,W) in normalized space; ``mean``/``std`` are the
    per-channel statistics that map back to raw [0,1] intensities.
    """

    images: np.ndarray
    labels: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    num_classes: int
    class_ids: list = field(default_factory=list)

    def __post_init__(self):
        if not self.class_ids:
            self.class_ids = [np.flatnonzero(self.labels == c)
                              for c in range(self.num_classes)]

    @classmethod
    def from_raw(cls, images01, labels, num_classes=None, stats=None):
        images01 = np.asarray(images01, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if num_classes is None:
            num_classes = int(labels.max()) + 1
        mean, std = channel_stats(images01) if stats is None else stats
        x = (images01 - mean[:, None, None]) / std[:, None, None]
        return cls(x, labels, np.asarray(mean, dtype=np.float64),
                   np.asarray(std, dtype=np.float64), num_classes)

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def denormalize(self, images=None) -> np.ndarray:
        x = self.images if images is None else np.asarray(images)
        return x * self.std[:, None, None] + self.mean[:, None, None]

    def sample_class(self, c: int, n: int, rng) -> np.ndarray:
        """n indices of class c, without replacement when possible."""
        ids = self.class_ids[c]
        if len(ids) == 0:
            raise ConfigError(f"class {c} has no examples")
        return rng.choice(ids, size=n, replace=n > len(ids))

    def sample_balanced(self, per_class: int, rng) -> np.ndarray:
        return np.concatenate([self.sample_class(c, per_class, rng)
                               for c in range(self.num_classes)])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.mean, self.std,
                       self.num_classes)


# ---------------------------------------------------------------------------
# procedural fixtures

def _glyph_mask(c: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Indicator of glyph class c on centered coordinates u (x) and v (y)
    in [-1, 1]."""
    r = np.hypot(u, v)
    if c == 0:  # ring
        return (r > 0.45) & (r < 0.78)
    if c == 1:  # vertical bar
        return (np.abs(u) < 0.2) & (np.abs(v) < 0.8)
    if c == 2:  # horizontal bar
        return (np.abs(v) < 0.2) & (np.abs(u) < 0.8)
    if c == 3:  # plus
        return ((np.abs(u) < 0.18) | (np.abs(v) < 0.18)) & (np.maximum(np.abs(u), np.abs(v)) < 0.8)
    if c == 4:  # diagonal cross
        return ((np.abs(u - v) < 0.25) | (np.abs(u + v) < 0.25)) & (r < 0.95)
    if c == 5:  # filled disc
        return r < 0.55
    if c == 6:  # square frame
        m = np.maximum(np.abs(u), np.abs(v))
        return (m > 0.5) & (m < 0.8)
    if c == 7:  # diamond outline
        m = np.abs(u) + np.abs(v)
        return (m > 0.55) & (m < 0.95)
    if c == 8:  # two side-by-side dots
        return (np.hypot(u - 0.45, v) < 0.28) | (np.hypot(u + 0.45, v) < 0.28)
    if c == 9:  # filled triangle, point up
        return (v > -0.75) & (v < 0.55) & (np.abs(u) < 0.55 * (0.55 - v) / 1.3 + 0.12)
    raise ConfigError(f"glyph class {c} does not exist")


def synthetic_glyphs(per_class: int, *, seed: int, size: int = 28,
                     noise: float = 0.25, jitter: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Ten glyph classes with random shift, scale, intensity, and pixel
    noise.  Returns raw images in [0,1] shaped (10*per_class, 1, size, size)
    in class-major order, and labels."""
    rng = np.random.default_rng(seed)
    n = 10 * per_class
    images = np.empty((n, 1, size, size))
    labels = np.repeat(np.arange(10), per_class).astype(np.int64)
    grid = (np.arange(size) - (size - 1) / 2.0) / (size / 2.0)
    for i, c in enumerate(labels):
        dy, dx = rng.integers(-jitter, jitter + 1, size=2)
        scale = rng.uniform(0.8, 1.2)
        amp = rng.uniform(0.7, 1.0)
        v = (grid[:, None] - dy / (size / 2.0)) / scale
        u = (grid[None, :] - dx / (size / 2.0)) / scale
        img = amp * _glyph_mask(int(c), u, v).astype(np.float64)
        img += rng.normal(scale=noise, size=(size, size))
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return images, labels


def make_glyph_splits(train_per_class: int, test_per_class: int, *, seed: int,
                      noise: float = 0.25) -> tuple[Dataset, Dataset]:
    """Train/test glyph datasets; test reuses the train normalization."""
    xtr, ytr = synthetic_glyphs(train_per_class, seed=seed, noise=noise)
    xte, yte = synthetic_glyphs(test_per_class, seed=seed + 1, noise=noise)
    train = Dataset.from_raw(xtr, ytr, num_classes=10)
    test = Dataset.from_raw(xte, yte, num_classes=10, stats=(train.mean, train.std))
    return train, test


def separable_pair(n: int, *, seed: int, size: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Two trivially separable classes (left-bright vs right-bright), raw
    [0,1] images (n,1,size,size)."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 0.2, size=(n, 1, size, size))
    labels = (np.arange(n) % 2).astype(np.int64)
    half = size // 2
    x[labels == 0, :, :, :half] += 0.6
    x[labels == 1, :, :, half:] += 0.6
    return np.clip(x, 0.0, 1.0), labels
