"""Dataset ingestion and spike encoding.

Images travel as [N, C, H, W] float64 arrays normalized to [0,1]. The IDX
loader understands the classic big-endian layout (magic 2051 for images,
2049 for labels) and transparently decompresses gzip files. Encoders are
pure functions of (data, T, seed).
"""

from __future__ import annotations

import gzip
import os
import struct
import urllib.request
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, FormatError

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte.gz",
    "train_labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
}

# Public mirrors tried in order; override with SPIKEKIT_MNIST_MIRROR.
MNIST_MIRRORS = (
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://raw.githubusercontent.com/fgnt/mnist/master/",
)


@dataclass
class Dataset:
    """Images in [0,1] with integer labels."""

    images: np.ndarray  # [N, C, H, W] float64
    labels: np.ndarray  # [N] int64
    class_count: int

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"image count {self.images.shape[0]} != label count "
                f"{self.labels.shape[0]}"
            )
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.class_count
        ):
            raise DataError(
                f"labels must lie in [0,{self.class_count}), "
                f"got range [{self.labels.min()},{self.labels.max()}]"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.class_count)


def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path: str) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(
            f"{path}: expected IDX magic {expected_magic}, observed {magic}"
        )
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    payload = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    expected = int(np.prod(dims))
    if payload.size != expected:
        raise FormatError(
            f"{path}: payload holds {payload.size} bytes, header promises {expected}"
        )
    return payload.reshape(dims)


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Load an IDX image/label pair, scaling pixels by 1/255."""
    images_u8 = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels_u8 = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images_u8.shape[0] != labels_u8.shape[0]:
        raise DataError(
            f"{images_path} holds {images_u8.shape[0]} images but "
            f"{labels_path} holds {labels_u8.shape[0]} labels"
        )
    images = images_u8.astype(np.float64) / 255.0
    images = images[:, None, :, :]  # single channel
    labels = labels_u8.astype(np.int64)
    return Dataset(images=images, labels=labels,
                   class_count=int(labels.max(initial=0)) + 1)


def save_idx(dataset: Dataset, images_path: str, labels_path: str) -> None:
    """Write a Dataset back to raw IDX bytes (inverse of load_idx)."""
    images = np.round(dataset.images[:, 0, :, :] * 255.0).astype(np.uint8)
    n, h, w = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def encode_direct(images: np.ndarray, timesteps: int) -> np.ndarray:
    """Replicate each image as constant input current at every step."""
    if timesteps < 1:
        raise ConfigError(f"timesteps must be >= 1, got {timesteps}")
    return np.repeat(images[None], timesteps, axis=0)


def encode_poisson(images: np.ndarray, timesteps: int, seed: int) -> np.ndarray:
    """Independent Bernoulli(pixel) spike draws per timestep."""
    if timesteps < 1:
        raise ConfigError(f"timesteps must be >= 1, got {timesteps}")
    rng = np.random.default_rng(seed)
    draws = rng.random((timesteps,) + images.shape)
    return (draws < images[None]).astype(np.float64)


def synth_events(pattern: str, n: int, timesteps: int, seed: int,
                 height: int = 8, width: int = 8
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Class-conditional spatiotemporal spike patterns.

    ``two_class_rates``: every pixel fires Bernoulli(0.1) for class 0 and
    Bernoulli(0.4) for class 1. ``moving_bar``: a one-pixel vertical bar
    sweeps rightward (class 0) or leftward (class 1), one column per step,
    wrapping around; 5% of pixels are flipped as noise.

    Returns (events [T, N, 1, H, W] in {0,1}, labels [N]).
    """
    if n < 1 or timesteps < 1:
        raise ConfigError(f"n and timesteps must be >= 1, got {n}, {timesteps}")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    if pattern == "two_class_rates":
        rates = np.where(labels == 0, 0.1, 0.4)[None, :, None, None, None]
        draws = rng.random((timesteps, n, 1, height, width))
        events = (draws < rates).astype(np.float64)
    elif pattern == "moving_bar":
        events = np.zeros((timesteps, n, 1, height, width))
        for t in range(timesteps):
            right = t % width
            left = (width - 1 - t) % width
            events[t, labels == 0, 0, :, right] = 1.0
            events[t, labels == 1, 0, :, left] = 1.0
        flips = rng.random(events.shape) < 0.05
        events = np.abs(events - flips.astype(np.float64))
    else:
        raise ConfigError(f"unknown synthetic pattern {pattern!r}")
    return events, labels


def mnist_paths(directory: str) -> dict[str, str]:
    """Resolve the four MNIST files under ``directory`` (.gz or raw)."""
    paths = {}
    for key, gz_name in MNIST_FILES.items():
        raw_name = gz_name[:-3]
        gz = os.path.join(directory, gz_name)
        raw = os.path.join(directory, raw_name)
        paths[key] = gz if os.path.exists(gz) else raw
    return paths


def fetch_mnist(directory: str, mirror: str | None = None) -> dict[str, str]:
    """Download the four MNIST IDX files if absent; returns their paths.

    Tries SPIKEKIT_MNIST_MIRROR, then the built-in public mirrors.
    """
    os.makedirs(directory, exist_ok=True)
    mirrors = [m for m in (mirror, os.environ.get("SPIKEKIT_MNIST_MIRROR")) if m]
    mirrors += list(MNIST_MIRRORS)
    paths = mnist_paths(directory)
    for key, gz_name in MNIST_FILES.items():
        if os.path.exists(paths[key]):
            continue
        dest = os.path.join(directory, gz_name)
        last_error = None
        for base in mirrors:
            url = base.rstrip("/") + "/" + gz_name
            try:
                with urllib.request.urlopen(url, timeout=60) as response:
                    blob = response.read()
                with open(dest, "wb") as fh:
                    fh.write(blob)
                paths[key] = dest
                break
            except Exception as exc:  # try the next mirror
                last_error = exc
        else:
            raise DataError(
                f"could not download {gz_name} from any mirror "
                f"(last error: {last_error})"
            )
    return paths


def load_mnist(directory: str, fetch: bool = False) -> tuple[Dataset, Dataset]:
    """Load (train, test) MNIST from ``directory``, optionally downloading."""
    paths = fetch_mnist(directory) if fetch else mnist_paths(directory)
    for key, p in paths.items():
        if not os.path.exists(p):
            raise DataError(
                f"MNIST file missing: {p} (run spikekit.data.fetch_mnist "
                f"or `spikekit fetch-data`)"
            )
    train = load_idx(paths["train_images"], paths["train_labels"])
    test = load_idx(paths["test_images"], paths["test_labels"])
    return train, test
