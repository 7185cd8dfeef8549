"""Datasets: MNIST-style IDX files and seeded synthetic blob images."""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .tensor_core import DTYPE

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ShapeError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ConfigError("label outside [0, class_count)")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ConfigError("pixels must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, start, stop):
        return Dataset(self.images[start:stop], self.labels[start:stop], self.class_count,
                       {**self.provenance, "slice": [start, stop]})

    def split(self, n_train, n_test=None):
        n_test = len(self) - n_train if n_test is None else n_test
        if n_train + n_test > len(self):
            raise ConfigError(f"cannot split {len(self)} samples into {n_train}+{n_test}")
        return self.subset(0, n_train), self.subset(n_train, n_train + n_test)


def _read_idx(path, magic, what):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8:
        raise FormatError(f"{what} file {path} truncated")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise FormatError(f"bad magic 0x{found:08x} in {what} file {path} (want 0x{magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{what} file {path} truncated in header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims))
    if len(data) - header < count:
        raise FormatError(f"{what} file {path} truncated: {len(data) - header} of {count} bytes")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, class_count=10, limit=None):
    """Read an IDX image/label pair; pixels become ``u8 / 255`` with a channel axis."""
    images = _read_idx(images_path, IDX_IMAGE_MAGIC, "image")
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC, "label")
    if len(images) != len(labels):
        raise ShapeError(f"{len(images)} images but {len(labels)} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    x = (images.astype(DTYPE) / 255.0)[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), class_count,
                   {"kind": "idx", "images": str(images_path), "labels": str(labels_path)})


def write_idx(images_path, labels_path, images_u8, labels_u8):
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGE_MAGIC))
        f.write(struct.pack(">3I", *images_u8.shape))
        f.write(images_u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, len(labels_u8)))
        f.write(labels_u8.tobytes())


@dataclass(frozen=True)
class SynthSpec:
    classes: int = 10
    per_class: int = 300
    size: int = 16
    channels: int = 1
    blobs: int = 3
    contrast: float = 0.5
    noise: float = 0.08
    jitter: int = 1

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError("need at least two classes")
        if self.per_class < 1 or self.size < 4 or self.channels < 1 or self.blobs < 1:
            raise ConfigError("invalid synthetic dataset spec")


def _templates(spec, rng):
    yy, xx = np.mgrid[0:spec.size, 0:spec.size].astype(np.float64)
    width = spec.size / 7.0
    out = np.zeros((spec.classes, spec.channels, spec.size, spec.size))
    for k in range(spec.classes):
        for c in range(spec.channels):
            for _ in range(spec.blobs):
                cy, cx = rng.uniform(2, spec.size - 2, size=2)
                out[k, c] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        out[k] /= out[k].max()
    return out


def synth_dataset(spec=SynthSpec(), seed=0):
    """Class-conditional Gaussian-blob images, shuffled, deterministic per seed.

    Each class owns a fixed template of ``blobs`` Gaussian bumps; samples
    jitter it by up to ``jitter`` pixels, scale it by a random contrast and
    add pixel noise.
    """
    rng = np.random.default_rng([seed, 7])
    templates = _templates(spec, rng)
    n = spec.classes * spec.per_class
    labels = np.repeat(np.arange(spec.classes), spec.per_class)
    rng.shuffle(labels)
    images = np.empty((n, spec.channels, spec.size, spec.size))
    for i, k in enumerate(labels):
        t = templates[k]
        if spec.jitter:
            dy, dx = rng.integers(-spec.jitter, spec.jitter + 1, size=2)
            t = np.roll(t, (dy, dx), axis=(1, 2))
        amp = spec.contrast * rng.uniform(0.7, 1.3)
        images[i] = 0.25 + amp * t + rng.normal(0.0, spec.noise, size=t.shape)
    images = np.clip(images, 0.0, 1.0)
    return Dataset(images, labels, spec.classes,
                   {"kind": "synthetic", "seed": int(seed), "spec": spec.__dict__})
