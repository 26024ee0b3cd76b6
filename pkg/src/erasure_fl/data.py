"""Synthetic datasets, partitioning and CSV persistence.

Every generator draws from a caller-owned ``numpy.random.Generator``:
inputs come from ``Generator.uniform`` and Gaussian noise from
``Generator.standard_normal`` (numpy's ziggurat transform of the PCG64 bit
stream) scaled by ``noise_sigma``. Inputs are drawn before noise within each
call. Features always carry a trailing constant-1 bias column.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from erasure_fl.errors import DatasetParseError, DimensionError, InvalidConfigError

REGRESSION = "regression"
CLASSIFICATION = "classification"

PARTITION_KINDS = ("uniform", "non-iid-interval", "per-class", "per-device")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LocalDataset:
    """One device's samples. ``features`` includes the bias column."""

    features: np.ndarray
    targets: np.ndarray
    task: str = REGRESSION

    def __post_init__(self) -> None:
        X = np.array(self.features, dtype=float)
        y = np.array(self.targets, dtype=float).reshape(-1)
        if X.ndim != 2:
            raise DimensionError(f"features must be a 2-D matrix, got shape {X.shape}")
        if X.shape[0] < 1:
            raise InvalidConfigError("a dataset needs at least one sample")
        if X.shape[0] != y.size:
            raise DimensionError(f"{X.shape[0]} feature rows but {y.size} targets")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise InvalidConfigError("dataset contains non-finite values")
        if self.task not in (REGRESSION, CLASSIFICATION):
            raise InvalidConfigError(f"unknown task {self.task!r}")
        if self.task == CLASSIFICATION and (np.any(y < 0) or np.any(y != np.round(y))):
            raise InvalidConfigError("class targets must be non-negative integers")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "targets", _frozen(y))

    @classmethod
    def from_raw(cls, raw_features: np.ndarray, targets: np.ndarray, task: str = REGRESSION) -> "LocalDataset":
        """Build from features without the bias column; appends it."""
        raw = np.asarray(raw_features, dtype=float)
        if raw.ndim == 1:
            raw = raw[:, None]
        X = np.hstack([raw, np.ones((raw.shape[0], 1))])
        return cls(X, targets, task)

    @property
    def size(self) -> int:
        return int(self.features.shape[0])

    @property
    def width(self) -> int:
        return int(self.features.shape[1])

    @property
    def raw_features(self) -> np.ndarray:
        """Features without the bias column."""
        return self.features[:, :-1]

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LocalDataset):
            return NotImplemented
        return (
            self.task == other.task
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.targets, other.targets)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class FederatedDataset:
    parts: tuple[LocalDataset, ...]
    partition_kind: str
    n_classes: int | None = None
    test: LocalDataset | None = field(default=None)

    def __post_init__(self) -> None:
        parts = tuple(self.parts)
        if not parts:
            raise InvalidConfigError("a federated dataset needs at least one device")
        if self.partition_kind not in PARTITION_KINDS:
            raise InvalidConfigError(f"unknown partition kind {self.partition_kind!r}")
        width, task = parts[0].width, parts[0].task
        for p in parts[1:] + ((self.test,) if self.test is not None else ()):
            if p.width != width or p.task != task:
                raise DimensionError("all device datasets must share feature width and task")
        object.__setattr__(self, "parts", parts)
        if task == CLASSIFICATION and self.n_classes is None:
            labels = np.concatenate([p.targets for p in parts])
            object.__setattr__(self, "n_classes", int(labels.max()) + 1)

    @property
    def n_devices(self) -> int:
        return len(self.parts)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([p.size for p in self.parts], dtype=float)

    @property
    def total_size(self) -> int:
        return int(sum(p.size for p in self.parts))

    @property
    def width(self) -> int:
        return self.parts[0].width

    @property
    def task(self) -> str:
        return self.parts[0].task

    def pooled(self) -> LocalDataset:
        return LocalDataset(
            np.vstack([p.features for p in self.parts]),
            np.concatenate([p.targets for p in self.parts]),
            self.task,
        )


def _check_range(x_range: Sequence[float]) -> tuple[float, float]:
    lo, hi = (float(v) for v in x_range)
    if not (math.isfinite(lo) and math.isfinite(hi)) or not lo < hi:
        raise InvalidConfigError(f"x_range must be a finite interval with lo < hi, got {x_range}")
    return lo, hi


def _check_common(n_samples: int, noise_sigma: float) -> None:
    if n_samples < 1:
        raise InvalidConfigError(f"n_samples must be >= 1, got {n_samples}")
    if not noise_sigma >= 0:
        raise InvalidConfigError(f"noise_sigma must be >= 0, got {noise_sigma}")


def gen_linear(
    n_samples: int,
    slope: float,
    intercept: float,
    noise_sigma: float,
    x_range: Sequence[float],
    rng: np.random.Generator,
) -> LocalDataset:
    """``y = slope * x + intercept + z`` with x uniform on ``x_range``."""
    _check_common(n_samples, noise_sigma)
    lo, hi = _check_range(x_range)
    x = rng.uniform(lo, hi, n_samples)
    z = noise_sigma * rng.standard_normal(n_samples)
    return LocalDataset.from_raw(x, slope * x + intercept + z)


def gen_quadratic(
    n_samples: int,
    noise_sigma: float,
    x_range: Sequence[float],
    rng: np.random.Generator,
) -> LocalDataset:
    """``y = x**2 + z`` with x uniform on ``x_range``."""
    _check_common(n_samples, noise_sigma)
    lo, hi = _check_range(x_range)
    x = rng.uniform(lo, hi, n_samples)
    z = noise_sigma * rng.standard_normal(n_samples)
    return LocalDataset.from_raw(x, x**2 + z)


def gen_linear_devices(
    n_devices: int,
    per_device: int,
    slopes: Sequence[float],
    intercepts: Sequence[float],
    noise_sigma: float,
    x_range: Sequence[float],
    rng: np.random.Generator,
) -> FederatedDataset:
    """One linear dataset per device, each with its own line.

    Devices share the input range but not the regression line, so their
    local optima disagree.
    """
    if n_devices < 1:
        raise InvalidConfigError(f"need at least one device, got {n_devices}")
    if len(slopes) != n_devices or len(intercepts) != n_devices:
        raise InvalidConfigError("need one slope and one intercept per device")
    parts = tuple(
        gen_linear(per_device, s, b, noise_sigma, x_range, rng) for s, b in zip(slopes, intercepts)
    )
    return FederatedDataset(parts, "per-device")


def spread(center: float, step: float, n: int) -> list[float]:
    """``n`` values spaced by ``step`` and centred on ``center``."""
    return [center + step * (i - (n - 1) / 2) for i in range(n)]


def partition_noniid_intervals(
    base_range: Sequence[float],
    n_devices: int,
    per_device: int,
    noise_sigma: float,
    rng: np.random.Generator,
) -> FederatedDataset:
    """Quadratic-model data; device i samples x from the i-th of ``n_devices``
    equal-width contiguous sub-intervals of ``base_range``."""
    if n_devices < 1:
        raise InvalidConfigError(f"need at least one device, got {n_devices}")
    lo, hi = _check_range(base_range)
    edges = np.linspace(lo, hi, n_devices + 1)
    edges[0], edges[-1] = lo, hi
    parts = tuple(
        gen_quadratic(per_device, noise_sigma, (edges[i], edges[i + 1]), rng) for i in range(n_devices)
    )
    return FederatedDataset(parts, "non-iid-interval")


def partition_uniform(pool: LocalDataset, n_devices: int, rng: np.random.Generator) -> FederatedDataset:
    """Shuffle ``pool`` and deal it out to ``n_devices`` devices.

    When the pool size is not divisible, the first ``size % n_devices``
    devices get one extra sample.
    """
    if n_devices < 1:
        raise InvalidConfigError(f"need at least one device, got {n_devices}")
    if n_devices > pool.size:
        raise InvalidConfigError(f"cannot split {pool.size} samples over {n_devices} devices")
    perm = rng.permutation(pool.size)
    parts = tuple(
        LocalDataset(pool.features[idx], pool.targets[idx], pool.task)
        for idx in np.array_split(perm, n_devices)
    )
    return FederatedDataset(parts, "uniform")


def blob_centers(n_classes: int, dim: int, separation: float) -> np.ndarray:
    """Class means whose nearest pair is ``separation`` apart.

    Centres sit on a circle in the first two coordinates (on a line when
    ``dim == 1``).
    """
    centers = np.zeros((n_classes, dim))
    if dim == 1:
        centers[:, 0] = separation * (np.arange(n_classes) - (n_classes - 1) / 2)
        return centers
    radius = separation / (2.0 * math.sin(math.pi / n_classes))
    angles = 2.0 * math.pi * np.arange(n_classes) / n_classes
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return centers


def _blob_samples(
    centers: np.ndarray, label: int, count: int, noise_sigma: float, rng: np.random.Generator
) -> LocalDataset:
    dim = centers.shape[1]
    x = centers[label] + noise_sigma * rng.standard_normal((count, dim))
    return LocalDataset.from_raw(x, np.full(count, label), CLASSIFICATION)


def gen_classification_blobs(
    n_classes: int,
    per_class: int,
    dim: int,
    separation: float,
    noise_sigma: float,
    rng: np.random.Generator,
    test_per_class: int = 0,
) -> FederatedDataset:
    """Gaussian blobs, one class per device.

    Device ``c`` holds only class-``c`` samples. With ``test_per_class > 0``
    a balanced held-out set is drawn after all training samples.
    """
    if n_classes < 2:
        raise InvalidConfigError(f"need at least two classes, got {n_classes}")
    if per_class < 1 or dim < 1 or test_per_class < 0:
        raise InvalidConfigError("per_class and dim must be >= 1, test_per_class >= 0")
    if not (separation >= 0 and noise_sigma >= 0):
        raise InvalidConfigError("separation and noise_sigma must be >= 0")
    centers = blob_centers(n_classes, dim, separation)
    parts = tuple(_blob_samples(centers, c, per_class, noise_sigma, rng) for c in range(n_classes))
    test = None
    if test_per_class:
        chunks = [_blob_samples(centers, c, test_per_class, noise_sigma, rng) for c in range(n_classes)]
        test = LocalDataset(
            np.vstack([c.features for c in chunks]),
            np.concatenate([c.targets for c in chunks]),
            CLASSIFICATION,
        )
    return FederatedDataset(parts, "per-class", n_classes=n_classes, test=test)


# -- CSV ---------------------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_csv(dataset: LocalDataset, path: str | os.PathLike) -> None:
    """Write ``x_0,...,x_{d-1},y`` rows; the bias column is not stored."""
    raw = dataset.raw_features
    header = [f"x_{j}" for j in range(raw.shape[1])] + ["y"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row, y in zip(raw, dataset.targets):
            fh.write(",".join([_fmt(v) for v in row] + [_fmt(y)]) + "\n")


def load_csv(path: str | os.PathLike, task: str = REGRESSION) -> LocalDataset:
    """Read a dataset written by :func:`save_csv` and re-append the bias column."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetParseError("missing header row", line=1) from None
        if len(header) < 2 or header[-1].strip() != "y":
            raise DatasetParseError("header must be x_0,...,x_{d-1},y", line=1)
        width = len(header)
        rows: list[list[float]] = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise DatasetParseError(f"expected {width} fields, got {len(row)}", line=line)
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise DatasetParseError(f"data row {len(rows)}: {exc}", line=line) from None
    if not rows:
        raise DatasetParseError("no data rows")
    arr = np.array(rows, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DatasetParseError("non-finite value in data")
    return LocalDataset.from_raw(arr[:, :-1], arr[:, -1], task)
