"""Synthetic image datasets and their on-disk format.

Images are [M,C,H,W] float64 in [0,1]; labels are int64. Pixel payloads are
stored as f32, so generators round through f32 once at creation time to make
the in-memory arrays bit-identical to a save/load round trip.

Two families:

* blobs: one Gaussian bump per image, bump position drawn from one of k
  well-separated position clusters. Linearly separable in pixel space.
* rings: bump positions drawn from k concentric annuli around the image
  center, angle uniform. Same local appearance, curved class boundaries.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    FormatVersionError,
    TruncatedFileError,
)
from .rng import RngStream

_MAGIC = b"DAKD"
_VERSION = 1


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConfigError(f"images must be [M,C,H,W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ConfigError(
                f"labels shape {self.labels.shape} does not match "
                f"{self.images.shape[0]} images"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ConfigError("pixel values must lie in [0, 1]")
        if self.labels.size and self.labels.min() < 0:
            raise ConfigError("labels must be non-negative")

    def __len__(self):
        return self.images.shape[0]

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if len(self) else 0

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.images[idx].copy(), self.labels[idx].copy())


def _render_bumps(cy, cx, amp, h, w, width):
    """Render one Gaussian bump per row of (cy, cx, amp) onto [M,1,h,w]."""
    ii = np.arange(h, dtype=np.float64)[None, :, None]
    jj = np.arange(w, dtype=np.float64)[None, None, :]
    d2 = (ii - cy[:, None, None]) ** 2 + (jj - cx[:, None, None]) ** 2
    img = amp[:, None, None] * np.exp(-d2 / (2.0 * width * width))
    return np.clip(img[:, None], 0.0, 1.0)


def _round_trip_f32(images):
    return images.astype(np.float32).astype(np.float64)


def _check_gen_args(m, h, classes):
    if m < 1:
        raise ConfigError(f"need at least one example, got {m}")
    if h < 8:
        raise ConfigError(f"image side must be >= 8, got {h}")
    if classes < 2:
        raise ConfigError(f"need at least two classes, got {classes}")


def gen_blobs(m, h=16, classes=2, seed=0):
    """Bump-position clusters on a circle; linearly separable in pixel space."""
    _check_gen_args(m, h, classes)
    rng = RngStream(seed)
    labels = np.arange(m, dtype=np.int64) % classes
    order = rng.permutation(m)
    labels = labels[order]
    center = (h - 1) / 2.0
    ring = h / 4.0
    jitter = h / 24.0
    width = h / 8.0
    ang = 2.0 * math.pi * labels / classes
    cy = center + ring * np.sin(ang) + rng.normal(jitter, (m,))
    cx = center + ring * np.cos(ang) + rng.normal(jitter, (m,))
    amp = rng.uniform(0.7, 1.0, (m,))
    images = _round_trip_f32(_render_bumps(cy, cx, amp, h, h, width))
    return Dataset(images, labels)


def gen_rings(m, h=16, classes=3, seed=0):
    """Bump positions on concentric annuli; boundaries are curved.

    Amplitude and radial jitter are tuned so small trained classifiers sit
    close to their decision boundaries: low-contrast bumps (0.2-0.3) keep
    class margins inside a 16/255 L-inf ball without costing much clean
    accuracy, which is what makes transfer trends measurable at desk scale.
    """
    _check_gen_args(m, h, classes)
    rng = RngStream(seed)
    labels = np.arange(m, dtype=np.int64) % classes
    order = rng.permutation(m)
    labels = labels[order]
    center = (h - 1) / 2.0
    gap = 0.42 * h / classes
    radii = gap * (labels + 1)
    jitter = 0.42 * gap
    width = h / 8.0
    theta = rng.uniform(0.0, 2.0 * math.pi, (m,))
    rho = radii + rng.normal(jitter, (m,))
    cy = center + rho * np.sin(theta)
    cx = center + rho * np.cos(theta)
    amp = rng.uniform(0.2, 0.3, (m,))
    images = _round_trip_f32(_render_bumps(cy, cx, amp, h, h, width))
    return Dataset(images, labels)


GENERATORS = {"blobs": gen_blobs, "rings": gen_rings}


def save_dataset(ds, path):
    """Write the DAKD binary: magic, u16 version, u32 M/C/H/W, f32 pixels
    row-major, u16 labels. Little-endian throughout."""
    if ds.labels.size and ds.labels.max() > 0xFFFF:
        raise ConfigError("labels exceed u16 range")
    m, c, h, w = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", _VERSION))
        fh.write(struct.pack("<4I", m, c, h, w))
        fh.write(ds.images.astype("<f4").tobytes())
        fh.write(ds.labels.astype("<u2").tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise BadMagicError(f"{path}: expected magic {_MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 6:
        raise TruncatedFileError(6, len(blob))
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != _VERSION:
        raise FormatVersionError(version, _VERSION)
    if len(blob) < 22:
        raise TruncatedFileError(22, len(blob))
    m, c, h, w = struct.unpack_from("<4I", blob, 6)
    pix_bytes = 4 * m * c * h * w
    expected = 22 + pix_bytes + 2 * m
    if len(blob) < expected:
        raise TruncatedFileError(expected, len(blob))
    images = (
        np.frombuffer(blob, dtype="<f4", count=m * c * h * w, offset=22)
        .reshape(m, c, h, w)
        .astype(np.float64)
    )
    labels = np.frombuffer(blob, dtype="<u2", count=m, offset=22 + pix_bytes).astype(
        np.int64
    )
    return Dataset(images, labels)
