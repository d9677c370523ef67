"""Datasets: IDX (MNIST-style) files and seeded Gaussian blobs."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, FormatError

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: int


def _read_idx(path, magic, ndim):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 + 4 * ndim:
        raise OSError(f"{path}: truncated IDX header ({len(raw)} bytes)")
    (found,) = struct.unpack(">i", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad IDX magic {found}, expected {magic}")
    dims = struct.unpack(f">{ndim}i", raw[4:4 + 4 * ndim])
    count = int(np.prod(dims))
    body = raw[4 + 4 * ndim:]
    if len(body) < count:
        raise OSError(f"{path}: truncated IDX body, expected {count} bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=count).reshape(dims)


def read_idx_images(path):
    """Images as float64 in [0, 1] with shape [N, rows, cols]."""
    return _read_idx(path, IMAGE_MAGIC, 3).astype(np.float64) / 255.0


def read_idx_labels(path):
    return _read_idx(path, LABEL_MAGIC, 1).astype(np.int64)


def load_idx(images_path, labels_path):
    """Return ``(images [N,rows,cols] in [0,1], labels [N])``."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise ConsistencyError(f"{len(images)} images but {len(labels)} labels")
    return images, labels


def write_idx(path, array):
    """Write a uint8 array as IDX (images if 3-d, labels if 1-d)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IMAGE_MAGIC, 1: LABEL_MAGIC}[array.ndim]
    with open(path, "wb") as f:
        f.write(struct.pack(f">i{array.ndim}i", magic, *array.shape))
        f.write(array.tobytes())


def idx_dataset(images, labels, test_images=None, test_labels=None, classes=None, seed=0):
    """Flattened IDX dataset; without explicit test files, an 80/20 split."""
    x, y = load_idx(images, labels)
    x = x.reshape(len(x), -1)
    if test_images is not None:
        xt, yt = load_idx(test_images, test_labels)
        xt = xt.reshape(len(xt), -1)
    else:
        x, y, xt, yt = _split(x, y, np.random.default_rng(seed))
    n_classes = classes or int(max(y.max(initial=0), yt.max(initial=0))) + 1
    return Dataset(x, y, xt, yt, n_classes)


def _split(x, y, rng, train_fraction=0.8):
    order = rng.permutation(len(y))
    cut = int(round(train_fraction * len(y)))
    tr, te = order[:cut], order[cut:]
    return x[tr], y[tr], x[te], y[te]


def gen_blobs(classes=10, dim=64, n=500, seed=0, spread=1.0):
    """``n`` points per class around seeded random centres, split 80/20."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 4.0, size=(classes, dim))
    y = np.repeat(np.arange(classes), n)
    x = centers[y] + spread * rng.standard_normal((classes * n, dim))
    x_tr, y_tr, x_te, y_te = _split(x, y, rng)
    return Dataset(x_tr, y_tr, x_te, y_te, classes)
