"""Dataset loading (numeric CSV, IDX containers) and standardization."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
STD_FLOOR = 1e-8


@dataclass
class Dataset:
    """Sample rows: inputs (N, m0) and targets (N, m_L); both finite."""

    inputs: np.ndarray
    targets: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.ndim != 2 or self.targets.ndim != 2:
            raise DataFormatError("inputs and targets must be 2-dimensional")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise DataFormatError(
                f"{self.inputs.shape[0]} input rows vs "
                f"{self.targets.shape[0]} target rows"
            )
        if self.inputs.shape[0] < 1:
            raise DataFormatError("data set is empty")
        if not np.all(np.isfinite(self.inputs)) or not np.all(
            np.isfinite(self.targets)
        ):
            raise DataFormatError("data set contains NaN or Inf")

    @property
    def num_samples(self) -> int:
        return self.inputs.shape[0]

    def subset(self, k: int, seed: int | None = None) -> "Dataset":
        """First-k rows, or a seeded random k-row sample without replacement."""
        k = min(k, self.num_samples)
        if seed is None:
            idx = np.arange(k)
        else:
            idx = np.random.default_rng(seed).choice(
                self.num_samples, size=k, replace=False
            )
        return Dataset(self.inputs[idx], self.targets[idx], self.name)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise DataFormatError(
            f"class label {bad} out of range [0, {num_classes})"
        )
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels.astype(int)] = 1.0
    return out


def load_csv(
    path,
    num_features: int,
    num_classes: int = 1,
    label_column: int = -1,
    skip_header: bool = False,
    name: str = "",
) -> Dataset:
    """Numeric CSV with one sample per line: features plus a label column.

    num_classes > 1 converts integer labels to one-hot rows; num_classes
    == 1 keeps the label column as a scalar target (binary or regression).
    """
    rows = []
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if skip_header and lineno == 1:
                continue
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != num_features + 1:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {num_features + 1} fields, "
                    f"got {len(fields)}"
                )
            try:
                rows.append([float(f) for f in fields])
            except ValueError as err:
                raise DataFormatError(f"{path}:{lineno}: {err}") from err
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    table = np.array(rows, dtype=np.float64)
    label_column = label_column % table.shape[1]
    labels = table[:, label_column]
    features = np.delete(table, label_column, axis=1)
    if num_classes > 1:
        if np.any(labels != np.rint(labels)):
            raise DataFormatError(f"{path}: class labels must be integers")
        targets = one_hot(labels, num_classes)
    else:
        targets = labels.reshape(-1, 1)
    return Dataset(features, targets, name or path.name)


def save_csv(path, dataset: Dataset) -> None:
    """Write features plus a final label column; inverse of load_csv.

    One-hot targets are collapsed back to integer class labels.
    """
    if dataset.targets.shape[1] > 1:
        labels = np.argmax(dataset.targets, axis=1).astype(np.float64)
    else:
        labels = dataset.targets[:, 0]
    table = np.hstack([dataset.inputs, labels.reshape(-1, 1)])
    with open(path, "w", encoding="utf-8") as fh:
        for row in table:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def _read_exact(fh, count: int, path, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise DataFormatError(f"{path}: truncated file while reading {what}")
    return data


def load_idx(
    images_path, labels_path, num_classes: int = 10, name: str = ""
) -> Dataset:
    """MNIST-style IDX pair: big-endian u8 images scaled to [0, 1], one-hot labels."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(
            ">iiii", _read_exact(fh, 16, images_path, "image header")
        )
        if magic != IDX_IMAGES_MAGIC:
            raise DataFormatError(
                f"{images_path}: bad image magic 0x{magic:08x}"
            )
        raw = _read_exact(fh, count * rows * cols, images_path, "pixel data")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    with open(labels_path, "rb") as fh:
        magic, label_count = struct.unpack(
            ">ii", _read_exact(fh, 8, labels_path, "label header")
        )
        if magic != IDX_LABELS_MAGIC:
            raise DataFormatError(
                f"{labels_path}: bad label magic 0x{magic:08x}"
            )
        raw = _read_exact(fh, label_count, labels_path, "label data")
    if label_count != count:
        raise DataFormatError(
            f"{labels_path}: {label_count} labels for {count} images"
        )
    labels = np.frombuffer(raw, dtype=np.uint8)
    return Dataset(
        pixels.astype(np.float64) / 255.0,
        one_hot(labels, num_classes),
        name or images_path.name,
    )


@dataclass(frozen=True)
class Standardizer:
    """Per-feature mean and population standard deviation of a training split."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, dataset: Dataset) -> Dataset:
        feats = (dataset.inputs - self.mean[None, :]) / self.std[None, :]
        return Dataset(feats, dataset.targets, dataset.name)


def fit_standardizer(train: Dataset) -> Standardizer:
    """Statistics from the training split only; stds floored at STD_FLOOR.

    Constant features end up with std equal to the floor, so they map to
    exactly zero after centering.
    """
    mean = np.mean(train.inputs, axis=0)
    std = np.sqrt(np.mean((train.inputs - mean[None, :]) ** 2, axis=0))
    return Standardizer(mean=mean, std=np.maximum(std, STD_FLOOR))
