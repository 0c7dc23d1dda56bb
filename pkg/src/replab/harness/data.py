"""Dataset ingestion: seeded synthetic generators, IDX image files, CSV.

All loaders return ((train_x, train_y), (test_x, test_y)) with image tensors
in NCHW float layout, normalized to zero mean and unit variance per channel
using train-split statistics.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import DatasetConfig

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class DataError(ValueError):
    pass


def _blob_samples(rng, means, labels, noise):
    return means[labels] + noise * rng.normal(size=(len(labels),) + means.shape[1:])


def _texture_samples(rng, labels, classes, shape, noise):
    c, h, w = shape
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    patterns = []
    for k in range(classes):
        freq = 1 + k // 4
        kind = k % 4
        if kind == 0:
            base = np.sin(2 * np.pi * freq * ii / h)
        elif kind == 1:
            base = np.sin(2 * np.pi * freq * jj / w)
        elif kind == 2:
            base = np.sin(2 * np.pi * freq * (ii + jj) / (h + w))
        else:
            base = np.sign(np.sin(2 * np.pi * freq * ii / h)
                           * np.sin(2 * np.pi * freq * jj / w))
        patterns.append(np.broadcast_to(base, shape).copy())
    patterns = np.stack(patterns)
    return patterns[labels] + noise * rng.normal(size=(len(labels),) + shape)


def synthetic_dataset(cfg: DatasetConfig, shape: tuple[int, int, int], seed: int):
    """Deterministic class-conditional images: Gaussian blobs or textures."""
    rng = np.random.default_rng([seed, 9000])
    n = cfg.train_size + cfg.test_size
    labels = rng.integers(0, cfg.classes, size=n)
    if cfg.style == "blobs":
        means = 2.0 * rng.normal(size=(cfg.classes,) + shape)
        x = _blob_samples(rng, means, labels, cfg.noise)
    else:
        x = _texture_samples(rng, labels, cfg.classes, shape, cfg.noise)
    tr = slice(0, cfg.train_size)
    te = slice(cfg.train_size, n)
    return (x[tr], labels[tr]), (x[te], labels[te])


def parse_idx_images(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise DataError(f"idx image file too short: {path}")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise DataError(f"idx image magic mismatch in {path}: {magic:#010x}")
    expected = 16 + n * rows * cols
    if len(raw) != expected:
        raise DataError(f"idx image payload length mismatch in {path}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=16)
    return data.reshape(n, 1, rows, cols).astype(np.float64) / 255.0


def parse_idx_labels(path, classes: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DataError(f"idx label file too short: {path}")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABEL_MAGIC:
        raise DataError(f"idx label magic mismatch in {path}: {magic:#010x}")
    if len(raw) != 8 + n:
        raise DataError(f"idx label payload length mismatch in {path}")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() >= classes:
        raise DataError(f"idx label out of range [0,{classes}) in {path}")
    return labels


def _idx_pair(images_path, labels_path, classes):
    x = parse_idx_images(images_path)
    y = parse_idx_labels(labels_path, classes)
    if len(x) != len(y):
        raise DataError(
            f"idx count mismatch: {len(x)} images vs {len(y)} labels")
    return x, y


def parse_csv(path, shape: tuple[int, int, int], classes: int):
    c, h, w = shape
    feats = c * h * w
    xs, ys = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != feats + 1:
            raise DataError(
                f"csv row {lineno} in {path}: {len(cells) - 1} features, expected {feats}")
        try:
            xs.append([float(v) for v in cells[:-1]])
            label = int(cells[-1])
        except ValueError as e:
            raise DataError(f"csv row {lineno} in {path}: {e}") from e
        if not 0 <= label < classes:
            raise DataError(f"csv row {lineno} in {path}: label {label} out of range")
        ys.append(label)
    if not xs:
        raise DataError(f"csv file {path} has no rows")
    return np.asarray(xs).reshape(-1, c, h, w), np.asarray(ys, dtype=np.int64)


def normalize_splits(train, test):
    """Zero-mean unit-variance per channel, statistics from the train split."""
    x_tr, y_tr = train
    x_te, y_te = test
    mean = x_tr.mean(axis=(0, 2, 3), keepdims=True)
    std = x_tr.std(axis=(0, 2, 3), keepdims=True)
    std = np.where(std < 1e-8, 1.0, std)
    return ((x_tr - mean) / std, y_tr), ((x_te - mean) / std, y_te)


def load_dataset(cfg: DatasetConfig, shape: tuple[int, int, int], seed: int = 0):
    """Dispatch on dataset kind; arrays come back normalized."""
    if cfg.kind == "synthetic":
        train, test = synthetic_dataset(cfg, shape, seed)
    elif cfg.kind == "idx":
        train = _idx_pair(cfg.train_images, cfg.train_labels, cfg.classes)
        test = _idx_pair(cfg.test_images, cfg.test_labels, cfg.classes)
    elif cfg.kind == "csv":
        train = parse_csv(cfg.train_path, shape, cfg.classes)
        test = parse_csv(cfg.test_path, shape, cfg.classes)
    else:
        raise DataError(f"unknown dataset kind {cfg.kind!r}")
    return normalize_splits(train, test)
