"""Heartbeat CSV ingestion, normalization, stratified subsets and batching.

The on-disk format is headerless UTF-8 CSV, 188 numeric fields per row:
187 amplitude samples followed by an integral class label in {0..4}.
Class ids map to the five beat categories N, S, V, F, Q in that order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .errors import DataError

N_FEATURES = 187
CLASS_NAMES = ("N", "S", "V", "F", "Q")
N_CLASSES = len(CLASS_NAMES)

# replaces zero standard deviations (constant columns, e.g. the zero-padded
# tail) so normalization never divides by zero
STD_FLOOR = 1e-8

__all__ = [
    "N_FEATURES",
    "CLASS_NAMES",
    "N_CLASSES",
    "STD_FLOOR",
    "Dataset",
    "NormStats",
    "Batch",
    "load_csv",
    "load_features",
    "fit_normalizer",
    "apply_normalizer",
    "PER_SAMPLE_NORM_ID",
    "per_sample_normalize",
    "apply_per_sample",
    "class_counts",
    "stratified_subset",
    "stratified_split",
    "batches",
]


@dataclass
class Dataset:
    """Labeled beat matrix: (N, 187) features and N integer labels in {0..4}."""

    features: np.ndarray
    labels: np.ndarray
    source: str = ""
    norm_id: Optional[str] = None  # id of the NormStats already applied, if any

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"features {self.features.shape} and labels {self.labels.shape} disagree"
            )
        if self.n == 0:
            raise DataError("dataset must contain at least one sample")
        if self.labels.min() < 0 or self.labels.max() >= N_CLASSES:
            raise DataError("labels must lie in {0..4}")

    @property
    def n(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class NormStats:
    """Per-feature mean and (floored) population std, fit on one training split."""

    mean: np.ndarray
    std: np.ndarray
    fitted_on: str


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    @property
    def n(self) -> int:
        return self.features.shape[0]


def _parse_rows(path: str, n_fields: int):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != n_fields:
                raise DataError(
                    f"{path}: row {lineno} has {len(fields)} fields, expected {n_fields}"
                )
            try:
                rows.append(np.array(fields, dtype=np.float64))
            except ValueError:
                raise DataError(f"{path}: row {lineno} contains a non-numeric field") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    return np.vstack(rows)


def load_csv(path: str) -> Dataset:
    """Read a labeled beat file: 188 fields per row, last field is the label."""
    matrix = _parse_rows(path, N_FEATURES + 1)
    features = matrix[:, :N_FEATURES]
    raw_labels = matrix[:, N_FEATURES]
    labels = np.rint(raw_labels).astype(np.int64)
    bad = np.nonzero((labels < 0) | (labels >= N_CLASSES))[0]
    if bad.size:
        raise DataError(
            f"{path}: row {bad[0] + 1} label {raw_labels[bad[0]]!r} outside {{0..4}}"
        )
    return Dataset(features=features, labels=labels, source=path)


def load_features(path: str) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Read a prediction input: rows of 187 fields, or 188 with the label kept."""
    with open(path, "r", encoding="utf-8") as fh:
        first = None
        for line in fh:
            if line.strip():
                first = line.strip()
                break
    if first is None:
        raise DataError(f"{path}: no data rows")
    n_fields = len(first.split(","))
    if n_fields not in (N_FEATURES, N_FEATURES + 1):
        raise DataError(
            f"{path}: row 1 has {n_fields} fields, expected {N_FEATURES} or {N_FEATURES + 1}"
        )
    matrix = _parse_rows(path, n_fields)
    if n_fields == N_FEATURES:
        return matrix, None
    return matrix[:, :N_FEATURES], np.rint(matrix[:, N_FEATURES]).astype(np.int64)


def fit_normalizer(train: Dataset) -> NormStats:
    """Per-feature mean and population std over the training split only."""
    if train.n < 2:
        raise DataError(f"need at least 2 samples to fit normalization, got {train.n}")
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)  # population (ddof=0)
    std = np.where(std > 0.0, std, STD_FLOOR)
    return NormStats(mean=mean, std=std, fitted_on=train.source or "unnamed")


def apply_normalizer(ds: Dataset, stats: NormStats) -> Dataset:
    """Standardize columns with the given (train-fitted) stats; labels untouched."""
    return Dataset(
        features=(ds.features - stats.mean) / stats.std,
        labels=ds.labels.copy(),
        source=ds.source,
        norm_id=stats.fitted_on,
    )


# sentinel norm id marking per-sample (row-wise) standardization; checkpoints
# carry it so eval/predict reapply the same transform
PER_SAMPLE_NORM_ID = "per-sample"


def per_sample_normalize(features: np.ndarray) -> np.ndarray:
    """Row-wise standardization, the ablation alternative to column stats."""
    features = np.asarray(features, dtype=np.float64)
    mean = features.mean(axis=1, keepdims=True)
    std = features.std(axis=1, keepdims=True)
    std = np.where(std > 0.0, std, STD_FLOOR)
    return (features - mean) / std


def apply_per_sample(ds: Dataset) -> Dataset:
    return Dataset(
        features=per_sample_normalize(ds.features),
        labels=ds.labels.copy(),
        source=ds.source,
        norm_id=PER_SAMPLE_NORM_ID,
    )


def class_counts(ds: Dataset, k: int = N_CLASSES) -> np.ndarray:
    return np.bincount(ds.labels, minlength=k)


def _largest_remainder_allocation(counts: np.ndarray, n: int) -> np.ndarray:
    """Per-class quota of n proportional to counts, within one sample of exact.

    Every class present in counts receives at least one slot.
    """
    total = counts.sum()
    quota = n * counts / total
    alloc = np.floor(quota).astype(np.int64)
    remainder = quota - alloc
    missing = n - alloc.sum()
    # hand the leftover slots to the largest fractional parts (class id breaks ties)
    order = sorted(range(len(counts)), key=lambda c: (-remainder[c], c))
    for c in order[: int(missing)]:
        alloc[c] += 1
    # guarantee one slot per present class, taking from the biggest allocations
    for c in np.nonzero((counts > 0) & (alloc == 0))[0]:
        donor = int(np.argmax(alloc))
        alloc[donor] -= 1
        alloc[c] += 1
    return alloc


def stratified_split(ds: Dataset, n: int, seed: int) -> tuple[Dataset, Dataset]:
    """Draw a seeded stratified sample of n rows; return (picked, rest)."""
    n_present = int((class_counts(ds) > 0).sum())
    if not max(n_present, 5) <= n <= ds.n:
        raise DataError(f"subset size must lie in [{max(n_present, 5)}, {ds.n}], got {n}")
    rng = np.random.default_rng(seed)
    counts = class_counts(ds)
    alloc = _largest_remainder_allocation(counts, n)
    picked = []
    for c in range(len(counts)):
        if alloc[c] == 0:
            continue
        idx = np.nonzero(ds.labels == c)[0]
        picked.append(rng.choice(idx, size=int(alloc[c]), replace=False))
    picked = np.concatenate(picked)
    mask = np.ones(ds.n, dtype=bool)
    mask[picked] = False
    rest_idx = np.nonzero(mask)[0]
    picked_ds = Dataset(ds.features[picked], ds.labels[picked], ds.source, ds.norm_id)
    rest_ds = None
    if rest_idx.size:
        rest_ds = Dataset(ds.features[rest_idx], ds.labels[rest_idx], ds.source, ds.norm_id)
    return picked_ds, rest_ds


def stratified_subset(ds: Dataset, n: int, seed: int) -> Dataset:
    """Seeded stratified sample: per-class share within one sample of exact."""
    if n == ds.n:
        return ds
    picked, _ = stratified_split(ds, n, seed)
    return picked


def batches(ds: Dataset, batch_size: int, shuffle: bool = False, seed: int = 0) -> Iterator[Batch]:
    """Cover all rows exactly once; the final batch may be short.

    With shuffle=True the permutation is drawn from ``seed`` alone, so pass a
    per-epoch seed to reshuffle between epochs.
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(ds.n)
    if shuffle:
        order = np.random.default_rng(seed).permutation(ds.n)
    for start in range(0, ds.n, batch_size):
        idx = order[start : start + batch_size]
        yield Batch(features=ds.features[idx], labels=ds.labels[idx])
