"""Self-contained synthetic datasets, plus writers for the on-disk formats.

Every builder is a pure function of an Rng, so a config seed pins the full
dataset. These exist so the bundled demo configs and the test suite can
exercise the whole pipeline (files included) without downloading anything;
they are stand-ins with the same shapes and formats as the real corpora,
not attempts to imitate their content.
"""

import os

import numpy as np

from .data import BOSTON_COLUMNS, BOSTON_TARGET, encode_idx
from .errors import InputError
from .ioutil import atomic_write_bytes
from .tensor import DTYPE, Rng


def blobs(rng: Rng, classes=3, dim=16, n_train=512, n_test=128, spread=1.0):
    """Gaussian clusters, one per class; linearly separable at low spread."""
    centers = rng.uniform(-3, 3, (classes, dim))
    total = n_train + n_test
    labels = rng.integers(0, classes, total)
    x = centers[labels] + rng.normal(0.0, spread, (total, dim))
    x = x.astype(DTYPE)
    return (x[:n_train], labels[:n_train].astype(np.int64),
            x[n_train:], labels[n_train:].astype(np.int64))


def rings(rng: Rng, n_train=512, n_test=128, noise=0.1):
    """Two concentric rings in the plane; needs a nonlinear boundary."""
    total = n_train + n_test
    labels = rng.integers(0, 2, total)
    radius = np.where(labels == 0, 1.0, 2.2)
    angle = rng.uniform(0, 2 * np.pi, total)
    x = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    x = (x + rng.normal(0.0, noise, x.shape)).astype(DTYPE)
    return (x[:n_train], labels[:n_train].astype(np.int64),
            x[n_train:], labels[n_train:].astype(np.int64))


def _disk(size, cy, cx, r):
    yy, xx = np.mgrid[0:size, 0:size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def shapes(rng: Rng, size=16, n_train=800, n_test=200):
    """Grayscale squares vs disks at random positions and sizes."""
    total = n_train + n_test
    labels = rng.integers(0, 2, total)
    images = np.zeros((total, size, size), np.uint8)
    for i in range(total):
        half = int(rng.integers(2, size // 4 + 1))
        cy = int(rng.integers(half, size - half))
        cx = int(rng.integers(half, size - half))
        if labels[i] == 0:
            images[i, cy - half:cy + half, cx - half:cx + half] = 200
        else:
            images[i][_disk(size, cy, cx, half)] = 200
    noise = rng.integers(0, 40, images.shape).astype(np.uint8)
    images = np.clip(images.astype(np.int16) + noise, 0, 255).astype(np.uint8)
    return (images[:n_train], labels[:n_train].astype(np.uint8),
            images[n_train:], labels[n_train:].astype(np.uint8))


def stripes(rng: Rng, size=16, n_train=800, n_test=200):
    """Horizontal vs vertical bars with random period and phase."""
    total = n_train + n_test
    labels = rng.integers(0, 2, total)
    images = np.zeros((total, size, size), np.uint8)
    coords = np.arange(size)
    for i in range(total):
        period = int(rng.integers(3, 7))
        phase = int(rng.integers(0, period))
        band = ((coords + phase) // period) % 2 == 0
        if labels[i] == 0:
            images[i, band, :] = 200
        else:
            images[i, :, band] = 200
    noise = rng.integers(0, 40, images.shape).astype(np.uint8)
    images = np.clip(images.astype(np.int16) + noise, 0, 255).astype(np.uint8)
    return (images[:n_train], labels[:n_train].astype(np.uint8),
            images[n_train:], labels[n_train:].astype(np.uint8))


def housing(rng: Rng, n_train=400, n_test=100):
    """A 13-feature linear regression table shaped like the housing CSV."""
    total = n_train + n_test
    x = rng.uniform(0, 10, (total, len(BOSTON_COLUMNS)))
    weights = rng.uniform(-2, 2, len(BOSTON_COLUMNS))
    y = x @ weights + rng.normal(0.0, 1.0, total) + 25.0
    x = x.astype(DTYPE)
    y = y.astype(DTYPE).reshape(-1, 1)
    return x[:n_train], y[:n_train], x[n_train:], y[n_train:]


# Word pools for synthetic reviews. A flavor suffix keeps the vocabularies
# of different text tasks from colliding, so each task must learn its own.
_POSITIVE = ["great", "wonderful", "superb", "delightful", "excellent",
             "charming", "brilliant", "moving"]
_NEGATIVE = ["awful", "dreadful", "boring", "clumsy", "tedious",
             "hollow", "grating", "flat"]
_FILLER = ["the", "plot", "acting", "scene", "pacing", "script", "camera",
           "and", "with", "very", "was", "felt", "overall", "ending"]


def sentiment(rng: Rng, flavor=0, n_train=800, n_test=200, words=20):
    """Two-class synthetic reviews; label follows the dominant word pool."""
    pos = [f"{w}{flavor}" for w in _POSITIVE]
    neg = [f"{w}{flavor}" for w in _NEGATIVE]
    total = n_train + n_test
    labels = rng.integers(0, 2, total)
    texts = []
    for i in range(total):
        pool = pos if labels[i] == 1 else neg
        strong = int(rng.integers(3, 7))
        picks = [pool[int(j)] for j in rng.integers(0, len(pool), strong)]
        picks += [_FILLER[int(j)]
                  for j in rng.integers(0, len(_FILLER), words - strong)]
        order = rng.permutation(len(picks))
        texts.append(" ".join(picks[k] for k in order))
    return (texts[:n_train], labels[:n_train].astype(np.int64),
            texts[n_train:], labels[n_train:].astype(np.int64))


BUILDERS = {
    "blobs": blobs,
    "rings": rings,
    "shapes": shapes,
    "stripes": stripes,
    "housing": housing,
    "sentiment": sentiment,
}


def build_synthetic(name: str, rng: Rng, params: dict | None = None):
    """Dispatch to a builder; returns (train_x, train_y, test_x, test_y)."""
    if name not in BUILDERS:
        raise InputError(
            f"unknown synthetic dataset {name!r}; have {sorted(BUILDERS)}")
    return BUILDERS[name](rng, **(params or {}))


# --- writers, for tests and demos that need real files on disk ---


def write_idx_pair(directory, prefix, images, labels):
    """Write images+labels IDX files; returns their paths."""
    os.makedirs(directory, exist_ok=True)
    image_path = os.path.join(directory, f"{prefix}-images.idx")
    label_path = os.path.join(directory, f"{prefix}-labels.idx")
    atomic_write_bytes(image_path, encode_idx(images))
    atomic_write_bytes(label_path, encode_idx(labels))
    return image_path, label_path


def write_csv_table(path, x, y, feature_names=None, target_name=None):
    feature_names = feature_names or BOSTON_COLUMNS
    target_name = target_name or BOSTON_TARGET
    if x.shape[1] != len(feature_names):
        raise InputError(
            f"{x.shape[1]} features but {len(feature_names)} column names")
    lines = [",".join(list(feature_names) + [target_name])]
    for row, target in zip(x, y.reshape(-1)):
        lines.append(",".join(f"{v:.6g}" for v in row) + f",{target:.6g}")
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())
    return path


def write_text_dataset(root, texts, labels, class_names):
    """One subdirectory per class, one numbered .txt file per example."""
    for name in class_names:
        os.makedirs(os.path.join(root, name), exist_ok=True)
    for i, (text, label) in enumerate(zip(texts, labels)):
        path = os.path.join(root, class_names[int(label)], f"{i:05d}.txt")
        atomic_write_bytes(path, text.encode())
    return root
