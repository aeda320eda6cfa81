"""Datasets, batch schedules and removal views."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import FormatError, PreconditionError
from .numkit import Rng, fnv1a64, hex_digest

# Long-jump indices of the sub-streams derived from one experiment seed.
STREAM_DATA = 1
STREAM_SHUFFLE = 2
STREAM_INIT = 3
STREAM_NOISE = 4
STREAM_SELECT = 5


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    label: int
    id: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable labelled dataset; row ``i`` has id ``i``.

    ``source_ids`` maps rows back to the ids of a parent dataset when the
    dataset was produced by :meth:`subset`; it equals ``arange(n)`` otherwise.
    """

    X: np.ndarray
    y: np.ndarray
    classes: int
    source_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise PreconditionError(f"bad dataset shapes X{X.shape} y{y.shape}")
        if not np.all(np.isfinite(X)):
            raise PreconditionError("dataset features must be finite")
        if y.size and (y.min() < 0 or y.max() >= self.classes):
            raise PreconditionError(f"labels must lie in 0..{self.classes - 1}")
        src = np.arange(X.shape[0], dtype=np.int64) if self.source_ids is None else np.asarray(self.source_ids, dtype=np.int64)
        X.setflags(write=False)
        y.setflags(write=False)
        src.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "source_ids", src)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return self.classes

    def __len__(self):
        return self.n

    def example(self, i: int) -> Example:
        return Example(self.X[i], int(self.y[i]), i)

    @property
    def examples(self) -> list[Example]:
        return [self.example(i) for i in range(self.n)]

    def canonical_bytes(self) -> bytes:
        header = struct.pack("<QQQ", self.n, self.p, self.classes)
        return header + self.X.astype("<f8").tobytes() + self.y.astype("<i8").tobytes()

    @property
    def digest(self) -> str:
        return hex_digest(fnv1a64(self.canonical_bytes()))

    def subset(self, ids: Iterable[int]) -> "Dataset":
        idx = np.asarray(sorted(set(int(i) for i in ids)), dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.classes, source_ids=self.source_ids[idx])

    def without(self, ids: Iterable[int]) -> "Dataset":
        drop = set(int(i) for i in ids)
        return self.subset(i for i in range(self.n) if i not in drop)


def make_synthetic(classes: int, per_class: int, dim: int, separation: float, seed: int = 0) -> Dataset:
    """Isotropic unit-variance Gaussian clusters.

    Class means sit on a regular simplex scaled so every pair of means is
    ``separation`` apart (requires ``dim >= classes - 1``; for ``classes == 2``
    the means are ``+-separation/2`` along the first axis).
    """
    if classes < 1 or per_class < 1 or dim < 1:
        raise PreconditionError("counts must be >= 1")
    if separation <= 0:
        raise PreconditionError("separation must be positive")
    if classes > 1 and dim < classes - 1:
        raise PreconditionError("dim must be >= classes - 1")
    rng = Rng(seed).stream(STREAM_DATA)
    means = np.zeros((classes, dim))
    if classes > 1:
        # simplex vertices: centred basis vectors embedded in the first `classes` coords,
        # projected into `classes - 1` dims via QR when dim is too small
        e = np.eye(classes) - 1.0 / classes
        q, _ = np.linalg.qr(e.T)
        coords = e @ q[:, : classes - 1]
        coords *= separation / math.sqrt(2.0)
        means[:, : classes - 1] = coords
    noise = rng.normal(classes * per_class * dim).reshape(classes * per_class, dim)
    y = np.repeat(np.arange(classes), per_class)
    X = means[y] + noise
    return Dataset(X, y, classes)


def save_csv(dataset: Dataset, path: Union[str, Path], header: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow([f"x{j}" for j in range(dataset.p)] + ["label"])
        for row, label in zip(dataset.X, dataset.y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(
    path: Union[str, Path],
    label_column: Union[int, str] = -1,
    feature_columns: Optional[Sequence[Union[int, str]]] = None,
    header: bool = True,
    classes: Optional[int] = None,
) -> Dataset:
    """Load a comma-separated file; ids follow row order.

    ``label_column`` / ``feature_columns`` accept indices or, with a header,
    column names. Features default to every non-label column.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = None
    first_line = 1
    if header:
        if not rows:
            raise FormatError(f"{path}: empty file")
        names = rows[0]
        rows = rows[1:]
        first_line = 2
    rows = [r for r in rows if r]
    if not rows:
        raise FormatError(f"{path}: no data rows")
    width = len(names) if names is not None else len(rows[0])

    def resolve(col):
        if isinstance(col, str):
            if names is None or col not in names:
                raise FormatError(f"{path}: unknown column {col!r}")
            return names.index(col)
        return col % width

    label_idx = resolve(label_column)
    feat_idx = [resolve(c) for c in feature_columns] if feature_columns is not None else [j for j in range(width) if j != label_idx]
    X = np.empty((len(rows), len(feat_idx)))
    labels = np.empty(len(rows), dtype=np.int64)
    for i, row in enumerate(rows):
        line = i + first_line
        if len(row) != width:
            raise FormatError(f"{path}: row {line} has {len(row)} fields, expected {width}")
        try:
            X[i] = [float(row[j]) for j in feat_idx]
            lab = float(row[label_idx])
        except ValueError as exc:
            raise FormatError(f"{path}: row {line}: non-numeric cell ({exc})") from None
        if lab != int(lab):
            raise FormatError(f"{path}: row {line}: label {row[label_idx]!r} is not an integer")
        labels[i] = int(lab)
    K = classes if classes is not None else int(labels.max()) + 1
    bad = np.flatnonzero((labels < 0) | (labels >= K))
    if bad.size:
        raise FormatError(f"{path}: row {int(bad[0]) + first_line}: label {labels[bad[0]]} out of range 0..{K - 1}")
    return Dataset(X, labels, K)


def _read_idx(path, expected_magic):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated IDX header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    dims = [count]
    if ndim > 1:
        if len(raw) < 4 + 4 * ndim:
            raise FormatError(f"{path}: truncated IDX header")
        dims += list(struct.unpack(">" + "I" * (ndim - 1), raw[8 : 4 + 4 * ndim]))
    offset = 4 + 4 * ndim
    size = int(np.prod(dims))
    if len(raw) - offset < size:
        raise FormatError(f"{path}: truncated IDX payload ({len(raw) - offset} of {size} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=offset).reshape(dims)


def load_idx(images_path, labels_path, classes: int = 10) -> Dataset:
    """Load an IDX image/label pair (e.g. MNIST); pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, 0x00000803)
    labels = _read_idx(labels_path, 0x00000801)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"IDX count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    if y.size and y.max() >= classes:
        raise FormatError(f"label {int(y.max())} out of range 0..{classes - 1}")
    return Dataset(X, y, classes)


@dataclass(frozen=True, eq=False)
class BatchSchedule:
    """Per-epoch partition of ``0..n-1`` into batches, with step sizes.

    ``step_sizes[t] = eta0 * q**t`` for the global step ``t = e*B + b``.
    """

    n: int
    batch_size: int
    epochs: int
    eta0: float
    q: float
    seed: int
    batches: tuple  # tuple over epochs of tuples of int64 arrays
    step_sizes: np.ndarray = field(repr=False)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.n / self.batch_size)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def steps(self):
        """Yield ``(e, b, t, eta, batch_ids)`` in training order."""
        B = self.steps_per_epoch
        for e, epoch in enumerate(self.batches):
            for b, batch in enumerate(epoch):
                t = e * B + b
                yield e, b, t, float(self.step_sizes[t]), batch

    def batch_of(self, sample_id: int, epoch: int) -> int:
        for b, batch in enumerate(self.batches[epoch]):
            if sample_id in batch:
                return b
        raise PreconditionError(f"id {sample_id} not scheduled in epoch {epoch}")

    @property
    def digest(self) -> str:
        parts = [struct.pack("<QQQdd Q", self.n, self.batch_size, self.epochs, self.eta0, self.q, self.seed & ((1 << 64) - 1))]
        for epoch in self.batches:
            for batch in epoch:
                parts.append(struct.pack("<Q", len(batch)))
                parts.append(np.asarray(batch, dtype="<i8").tobytes())
        return hex_digest(fnv1a64(b"".join(parts)))


def build_schedule(n: int, batch_size: int, epochs: int, eta0: float, q: float = 1.0, seed: int = 0) -> BatchSchedule:
    """Shuffle ``0..n-1`` once per epoch and chunk it into batches.

    Epoch ``e`` shuffles with the shuffle stream advanced by ``e`` short jumps,
    so any run with the same arguments sees identical batches. The last batch
    of an epoch keeps the remainder (no drop-last).
    """
    if not 1 <= batch_size <= n:
        raise PreconditionError(f"need 1 <= batch_size <= n, got {batch_size}, n={n}")
    if epochs < 0:
        raise PreconditionError("epochs must be >= 0")
    if not eta0 > 0:
        raise PreconditionError("eta0 must be positive")
    if not 0 < q <= 1:
        raise PreconditionError("decay q must lie in (0, 1]")
    base = Rng(seed).stream(STREAM_SHUFFLE)
    epochs_out = []
    for e in range(epochs):
        rng = base.copy()
        rng.jump()
        base = rng
        perm = rng.permutation(n)
        epoch = tuple(perm[i : i + batch_size].copy() for i in range(0, n, batch_size))
        for batch in epoch:
            batch.setflags(write=False)
        epochs_out.append(epoch)
    B = math.ceil(n / batch_size)
    steps = eta0 * np.power(q, np.arange(epochs * B, dtype=np.float64))
    steps.setflags(write=False)
    return BatchSchedule(n, batch_size, epochs, float(eta0), float(q), int(seed), tuple(epochs_out), steps)


@dataclass(frozen=True, eq=False)
class RemovalView:
    """A schedule with some ids dropped from every gradient sum.

    Batch boundaries, step sizes and the per-batch divisor ``|B_{e,b}|`` are
    those of ``base``; only membership changes.
    """

    base: BatchSchedule
    removed: frozenset

    def steps(self):
        """Yield ``(e, b, t, eta, kept_ids, divisor)``."""
        removed = self.removed
        for e, b, t, eta, batch in self.base.steps():
            if removed:
                kept = np.array([i for i in batch if int(i) not in removed], dtype=np.int64)
            else:
                kept = batch
            yield e, b, t, eta, kept, len(batch)


def restrict(schedule: BatchSchedule, removed: Iterable[int]) -> RemovalView:
    removed = frozenset(int(i) for i in removed)
    unknown = [i for i in removed if not 0 <= i < schedule.n]
    if unknown:
        raise PreconditionError(f"unknown ids in removal set: {sorted(unknown)[:5]}")
    return RemovalView(schedule, removed)
