"""Dataset loading.

Three sources: CIFAR-100 binary splits, pairs of saved tensors, and a
self-contained synthetic task for the desk-scale experiments. Paths fall
back to the AXMOE_DATA_DIR environment variable when not given explicitly.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ParameterError
from .tensor_io import load_tensor
from .train import Split

DATA_DIR_ENV = "AXMOE_DATA_DIR"

# CIFAR-100 binary record: coarse label byte, fine label byte, then a
# channel-planar 3x32x32 image.
CIFAR_RECORD_BYTES = 3074
CIFAR_IMAGE_BYTES = 3072

DATASETS = ("synthetic", "cifar100", "axt")


def data_dir(explicit=None) -> Path:
    if explicit:
        return Path(explicit)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    raise ConfigError(f"no dataset path given and {DATA_DIR_ENV} is not set")


def load_cifar100_bin(path) -> tuple[np.ndarray, np.ndarray]:
    """One CIFAR-100 split file to (float32 NCHW in [0, 1], int64 fine labels)."""
    raw = np.fromfile(str(path), dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES:
        raise FormatError(f"{path}: {raw.size} bytes is not a whole number of "
                          f"{CIFAR_RECORD_BYTES}-byte records")
    rec = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = rec[:, 1].astype(np.int64)
    images = rec[:, 2:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_axt_pair(x_path, y_path) -> tuple[np.ndarray, np.ndarray]:
    x = load_tensor(x_path).astype(np.float32)
    y = load_tensor(y_path)
    if y.ndim != 1:
        raise FormatError(f"{y_path}: labels must be rank 1, got rank {y.ndim}")
    if len(y) != len(x):
        raise FormatError(f"{x_path} has {len(x)} samples but {y_path} has {len(y)} labels")
    return x, np.rint(y).astype(np.int64)


# Contrast levels for the fine half of the synthetic label. Close enough
# that distinguishing them needs the low-significance part of the products.
CONTRAST_LO = 0.5
CONTRAST_HI = 0.68


def synthetic_blobs(n: int, classes: int, channels: int = 3, resolution: int = 8,
                    noise: float = 0.25, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Balanced K-class images built from one Gaussian bump each.

    A label encodes a coarse cue and a fine one: bump position on a ring
    (ceil(K/2) angles) and one of two contrast levels. Position survives
    coarse arithmetic; telling the contrast levels apart does not, which is
    what makes the task a useful probe for approximate multipliers."""
    if classes < 2:
        raise ParameterError(f"need at least 2 classes, got {classes}")
    if n < classes:
        raise ParameterError(f"need at least one sample per class, got {n} for {classes}")
    if resolution < 4:
        raise ParameterError(f"resolution must be >= 4, got {resolution}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes).astype(np.int64)
    n_pos = (classes + 1) // 2
    angles = 2.0 * np.pi * (labels % n_pos) / n_pos
    ring = resolution / 3.0
    cy = resolution / 2.0 + ring * np.sin(angles) + rng.normal(0.0, 0.35, size=n)
    cx = resolution / 2.0 + ring * np.cos(angles) + rng.normal(0.0, 0.35, size=n)
    grid = np.arange(resolution, dtype=np.float64)
    d2 = (grid[:, None] - cy[:, None, None]) ** 2 + (grid[None, :] - cx[:, None, None]) ** 2
    sigma = resolution / 8.0
    bumps = np.exp(-d2 / (2.0 * sigma * sigma))
    amp = np.where(labels // n_pos == 0, CONTRAST_LO, CONTRAST_HI)
    x = np.repeat((amp[:, None, None] * bumps)[:, None], channels, axis=1)
    x = x + rng.normal(0.0, noise, size=x.shape)
    return np.clip(x, 0.0, 1.0).astype(np.float32), labels


def load_dataset(kind: str, path=None, *, samples: int, eval_samples: int,
                 classes: int, channels: int = 3, resolution: int = 8,
                 noise: float = 0.25, seed: int = 0) -> Split:
    """Assemble a train/test split from any supported source.

    File-backed sources are truncated to the requested sizes; the synthetic
    source draws train and test from disjoint seeds.
    """
    if samples < 1 or eval_samples < 1:
        raise ParameterError("samples and eval_samples must be positive")
    if kind == "synthetic":
        x_tr, y_tr = synthetic_blobs(samples, classes, channels, resolution, noise, seed)
        x_te, y_te = synthetic_blobs(eval_samples, classes, channels, resolution, noise,
                                     seed + 1)
        return Split(x_tr, y_tr, x_te, y_te)
    if kind == "cifar100":
        root = data_dir(path)
        x_tr, y_tr = load_cifar100_bin(root / "train.bin")
        x_te, y_te = load_cifar100_bin(root / "test.bin")
        return Split(x_tr[:samples], y_tr[:samples], x_te[:eval_samples], y_te[:eval_samples])
    if kind == "axt":
        root = data_dir(path)
        x_tr, y_tr = load_axt_pair(root / "x_train.axt", root / "y_train.axt")
        x_te, y_te = load_axt_pair(root / "x_test.axt", root / "y_test.axt")
        return Split(x_tr[:samples], y_tr[:samples], x_te[:eval_samples], y_te[:eval_samples])
    raise ConfigError(f"unknown dataset kind {kind!r}, expected one of {DATASETS}")
