"""Datasets: CIFAR-10 binary files, a synthetic blob generator, batching."""
import os
from dataclasses import dataclass

import numpy as np

CIFAR_RECORD = 3073
CIFAR_DIM = 32
CIFAR_CLASSES = 10
# community per-channel statistics of the CIFAR-10 training set
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Images in [0, 1] as (n, c, h, w) float32 plus integer labels.

    ``mean``/``std`` are applied per channel when batches are drawn; the
    stored images stay unnormalised.
    """

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"
    mean: tuple = None
    std: tuple = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, c, h, w), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.images.shape[2]

    def normalize(self, images):
        if self.mean is None:
            return images
        mean = np.asarray(self.mean, dtype=np.float32).reshape(1, -1, 1, 1)
        std = np.asarray(self.std, dtype=np.float32).reshape(1, -1, 1, 1)
        return (images - mean) / std

    def subset(self, indices):
        idx = np.asarray(indices)
        return Dataset(self.images[idx], self.labels[idx], self.class_count, self.split,
                       self.mean, self.std)


def load_cifar10_binary(paths, split="train", normalize=True):
    """Read CIFAR-10 binary batches (label byte + 3x1024 channel-planar bytes)."""
    paths = list(paths)
    if not paths:
        raise DataFormatError("no CIFAR-10 files given")
    images, labels = [], []
    for path in paths:
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size % CIFAR_RECORD:
            raise DataFormatError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
        records = raw.reshape(-1, CIFAR_RECORD)
        bad = np.flatnonzero(records[:, 0] >= CIFAR_CLASSES)
        if bad.size:
            offset = int(bad[0]) * CIFAR_RECORD
            raise DataFormatError(f"{path}: label {records[bad[0], 0]} >= 10 at byte offset {offset}")
        labels.append(records[:, 0].astype(np.int64))
        images.append(records[:, 1:].reshape(-1, 3, CIFAR_DIM, CIFAR_DIM))
    pixels = np.concatenate(images).astype(np.float32) / 255.0
    mean, std = (CIFAR10_MEAN, CIFAR10_STD) if normalize else (None, None)
    return Dataset(pixels, np.concatenate(labels), CIFAR_CLASSES, split, mean, std)


def write_cifar10_binary(dataset, path):
    """Write ``dataset`` in the CIFAR-10 binary layout (pixels quantised to bytes)."""
    n, c, h, w = dataset.images.shape
    if (c, h, w) != (3, CIFAR_DIM, CIFAR_DIM):
        raise DataFormatError(f"CIFAR layout needs 3x32x32 images, got {c}x{h}x{w}")
    if dataset.class_count > CIFAR_CLASSES:
        raise DataFormatError("CIFAR-10 layout holds at most 10 classes")
    records = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    records[:, 0] = dataset.labels
    records[:, 1:] = np.clip(np.rint(dataset.images * 255), 0, 255).reshape(n, -1)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    records.tofile(path)


def class_templates(classes, dim=32, channels=3, seed=0):
    """One smooth template per class: a Gaussian blob at a class-specific
    position, tinted with a class-specific colour so that classes also
    differ after global pooling."""
    rng = np.random.default_rng([seed, 7919])
    yy, xx = np.mgrid[0:dim, 0:dim].astype(np.float64) + 0.5
    sigma = dim / 6.0
    templates = np.empty((classes, channels, dim, dim))
    for c in range(classes):
        angle = 2 * np.pi * c / classes
        cy = dim / 2 + dim / 4 * np.sin(angle)
        cx = dim / 2 + dim / 4 * np.cos(angle)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        colour = rng.uniform(0.2, 1.0, size=channels)
        colour[c % channels] = 1.0
        templates[c] = 0.1 + 0.8 * colour[:, None, None] * blob
    return templates.astype(np.float32)


def synth_dataset(classes, per_class, dim=32, seed=0, noise=0.1, channels=3, split="train"):
    if classes < 2:
        raise ValueError("need at least two classes")
    templates = class_templates(classes, dim, channels)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    images = templates[labels]
    if noise:
        images = images + rng.normal(0.0, noise, size=images.shape).astype(np.float32)
    return Dataset(np.clip(images, 0.0, 1.0), labels, classes, split)


def batch_iterator(dataset, batch_size, shuffle_seed=0, epoch=0, shuffle=True,
                   flip=False, crop=False):
    """Yield ``(images, labels)`` batches; order is a pure function of
    ``(shuffle_seed, epoch)``. The last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    rng = np.random.default_rng([shuffle_seed, epoch])
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = dataset.images[idx]
        if flip:
            mask = rng.random(len(idx)) < 0.5
            x = np.where(mask[:, None, None, None], x[..., ::-1], x)
        if crop:
            x = _random_crop(x, rng, pad=4)
        yield dataset.normalize(x).astype(np.float32), dataset.labels[idx]


def _random_crop(x, rng, pad):
    n, _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    return np.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])
