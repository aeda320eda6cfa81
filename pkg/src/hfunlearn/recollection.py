"""Per-sample recollection vectors streamed from the training trajectory.

Each tracked sample ``u`` carries a vector ``a_u`` updated at every SGD step
``t`` with batch Hessian ``H_t`` and step size ``eta_t``:

    a_u <- (I - eta_t * H_t) a_u                      (every step)
    a_u <- a_u + eta_t / |B_t| * g_t(u)               (steps whose batch holds u)

where ``g_t(u)`` is the (clipped) per-sample gradient the learning update used.
The multiply happens before the injection, so a gradient injected at step
``t`` only sees the multipliers of steps ``t+1 .. T-1``. After training,
``w_final + sum(a_u for u in U)`` approximates retraining without ``U``.
"""

from __future__ import annotations

import struct
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from .data import BatchSchedule, Dataset
from .errors import DivergenceError, FormatError, PreconditionError
from .model import ModelSpec, Params, hvp_many, init_params
from .numkit import fnv1a64, hex_digest
from .trainer import StepContext, TrainConfig, Trajectory, clipped_grads, train

DIVERGENCE_LIMIT = 1e6
STORE_MAGIC = b"HFUN"
STORE_VERSION = 1
INJECTIONS = ("full-batch", "leave-one-out")


@dataclass(frozen=True)
class RecollectionConfig:
    """``tracked=None`` tracks every sample.

    ``injection="leave-one-out"`` removes the sample's own Hessian term from
    the multiplier at its injection step. It makes the recursion exact for
    quadratic losses but gives every row its own multiplier, so rows from
    such a store must not be summed into group approximators.
    """

    tracked: Optional[tuple] = None
    injection: str = "full-batch"
    chunk: int = 512

    def __post_init__(self):
        if self.injection not in INJECTIONS:
            raise PreconditionError(f"injection must be one of {INJECTIONS}")
        if self.chunk < 1:
            raise PreconditionError("chunk must be >= 1")
        if self.tracked is not None:
            object.__setattr__(self, "tracked", tuple(sorted(set(int(i) for i in self.tracked))))

    def tracked_ids(self, n: int) -> np.ndarray:
        if self.tracked is None:
            return np.arange(n, dtype=np.int64)
        ids = np.asarray(self.tracked, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise PreconditionError(f"tracked ids must lie in 0..{n - 1}")
        return ids


@dataclass(frozen=True)
class StoreMeta:
    dataset_digest: str
    schedule_digest: str
    config_digest: str
    params_digest: str
    injection: str = "full-batch"
    mode: str = "streaming"


def _store_config_digest(config: TrainConfig, injection: str) -> str:
    return hex_digest(fnv1a64(f"{config.digest}:{injection}".encode()))


@dataclass(eq=False)
class ApproximatorStore:
    """Row ``j`` is the recollection vector of sample ``ids[j]``.

    Consumed ids are tombstoned: their rows stay in place (offsets and
    digests are preserved) but can no longer be used.
    """

    ids: np.ndarray
    vectors: np.ndarray
    meta: StoreMeta
    consumed: set = field(default_factory=set)
    stats: dict = field(default_factory=dict)
    digest_mismatch: bool = False

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != self.ids.shape[0]:
            raise PreconditionError("store needs one row per tracked id")
        self._row = {int(i): j for j, i in enumerate(self.ids)}
        # digests of clean models produced from this store; unlearning may continue from them
        self.lineage = {self.meta.params_digest}

    @property
    def n(self) -> int:
        return self.ids.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def __contains__(self, sample_id) -> bool:
        return int(sample_id) in self._row

    def available(self, sample_id) -> bool:
        return int(sample_id) in self._row and int(sample_id) not in self.consumed

    def row(self, sample_id: int) -> np.ndarray:
        try:
            return self.vectors[self._row[int(sample_id)]]
        except KeyError:
            raise PreconditionError(f"id {sample_id} is not tracked by this store") from None

    def rows_for(self, ids: Iterable[int]) -> np.ndarray:
        idx = []
        for i in ids:
            if int(i) not in self._row:
                raise PreconditionError(f"id {i} is not tracked by this store")
            idx.append(self._row[int(i)])
        return np.asarray(idx, dtype=np.int64)

    def group_sum(self, ids: Iterable[int]) -> np.ndarray:
        """Group approximator: the sum of the rows of ``ids`` (sorted order)."""
        ids = sorted(set(int(i) for i in ids))
        if not ids:
            return np.zeros(self.d)
        return self.vectors[self.rows_for(ids)].sum(axis=0)

    def header_bytes(self) -> int:
        return 4 + 4 + 8 + 8 + 8 * self.n + 4 * 16 + 8 + 8 * len(self.consumed)

    def file_size(self) -> int:
        return self.header_bytes() + 8 * self.n * self.d

    def save(self, path: Union[str, Path]) -> int:
        out = [
            STORE_MAGIC,
            struct.pack("<IQQ", STORE_VERSION, self.n, self.d),
            self.ids.astype("<u8").tobytes(),
            self.vectors.astype("<f8").tobytes(),
        ]
        m = self.meta
        for dg in (m.dataset_digest, m.schedule_digest, m.config_digest, m.params_digest):
            out.append(dg.encode("ascii"))
        tomb = sorted(self.consumed)
        out.append(struct.pack("<Q", len(tomb)) + np.asarray(tomb, dtype="<u8").tobytes())
        data = b"".join(out)
        Path(path).write_bytes(data)
        return len(data)

    @classmethod
    def load(cls, path: Union[str, Path], expect: Optional[dict] = None) -> "ApproximatorStore":
        """Read a store file.

        ``expect`` may map any of ``dataset``, ``schedule``, ``config``,
        ``params`` to digests; a mismatch warns and sets ``digest_mismatch``.
        """
        raw = Path(path).read_bytes()
        if len(raw) < 24 or raw[:4] != STORE_MAGIC:
            raise FormatError(f"{path}: not an approximator store (bad magic)")
        version, n, d = struct.unpack_from("<IQQ", raw, 4)
        if version != STORE_VERSION:
            raise FormatError(f"{path}: unsupported store version {version}")
        off = 24
        body = 8 * n + 8 * n * d + 64 + 8
        if len(raw) < off + body:
            raise FormatError(f"{path}: truncated store ({len(raw)} bytes)")
        ids = np.frombuffer(raw, dtype="<u8", count=n, offset=off).astype(np.int64)
        off += 8 * n
        vectors = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).reshape(n, d).astype(np.float64)
        off += 8 * n * d
        try:
            digests = [raw[off + 16 * i : off + 16 * (i + 1)].decode("ascii") for i in range(4)]
        except UnicodeDecodeError:
            raise FormatError(f"{path}: corrupt digest footer") from None
        off += 64
        (ntomb,) = struct.unpack_from("<Q", raw, off)
        off += 8
        if len(raw) != off + 8 * ntomb:
            raise FormatError(f"{path}: corrupt tombstone footer")
        tomb = set(int(i) for i in np.frombuffer(raw, dtype="<u8", count=ntomb, offset=off))
        meta = StoreMeta(*digests, injection="unknown", mode="file")
        store = cls(ids, vectors, meta, consumed=tomb)
        if expect:
            have = dict(zip(("dataset", "schedule", "config", "params"), digests))
            bad = [k for k, v in expect.items() if have.get(k) != v]
            if bad:
                warnings.warn(f"{path}: digest mismatch for {', '.join(bad)}", stacklevel=2)
                store.digest_mismatch = True
        return store


store_save = ApproximatorStore.save
store_load = ApproximatorStore.load


class _Recollector:
    """Step hook that advances every tracked vector by one recursion step."""

    def __init__(self, spec: ModelSpec, ids: np.ndarray, rc: RecollectionConfig, initial: Optional[np.ndarray] = None):
        self.spec = spec
        self.ids = ids
        self.rc = rc
        self.row = {int(i): j for j, i in enumerate(ids)}
        self.A = np.zeros((len(ids), spec.d)) if initial is None else np.array(initial, dtype=np.float64)
        self.hvp_count = 0
        self.correction_hvp_count = 0

    def __call__(self, ctx: StepContext) -> None:
        rec = ctx.record
        eta, div = rec.eta, rec.divisor
        params = ctx.params
        hits = [(pos, self.row[int(i)]) for pos, i in enumerate(rec.batch_ids) if int(i) in self.row]
        loo = None
        if self.rc.injection == "leave-one-out" and hits:
            # own-Hessian term evaluated on the pre-multiply rows
            loo = []
            for pos, j in hits:
                Hu = hvp_many(params, ctx.X[pos : pos + 1], ctx.y[pos : pos + 1], self.A[j : j + 1])[0]
                loo.append((j, Hu))
                self.correction_hvp_count += 1
        A = self.A
        k = A.shape[0]
        # an empty batch leaves the parameters alone, so its multiplier is the identity
        if len(rec.batch_ids):
            for start in range(0, k, self.rc.chunk):
                stop = min(k, start + self.rc.chunk)
                A[start:stop] -= eta * hvp_many(params, ctx.X, ctx.y, A[start:stop])
            self.hvp_count += k
        if loo:
            for j, Hu in loo:
                A[j] += (eta / div) * Hu
        for pos, j in hits:
            A[j] += (eta / div) * ctx.grads[pos]
        if k:
            if not np.all(np.isfinite(A)):
                raise DivergenceError(f"non-finite recollection vector at step {rec.t}", step=rec.t)
            biggest = float(np.sqrt(np.max(np.einsum("ij,ij->i", A, A))))
            if biggest > DIVERGENCE_LIMIT:
                raise DivergenceError(
                    f"recollection vectors diverged at step {rec.t} (max norm {biggest:.3g} > {DIVERGENCE_LIMIT:g}); "
                    "the multiplier's spectral radius rho is >= 1, use a smaller step size",
                    step=rec.t,
                )


def _make_store(rec: _Recollector, dataset, schedule_digest, config, final: Params, mode, seconds):
    meta = StoreMeta(
        dataset.digest, schedule_digest, _store_config_digest(config, rec.rc.injection), final.digest, rec.rc.injection, mode
    )
    stats = {"hvp_count": rec.hvp_count, "correction_hvp_count": rec.correction_hvp_count, "seconds": seconds}
    return ApproximatorStore(rec.ids.copy(), rec.A, meta, stats=stats)


def recollect_streaming(
    spec: ModelSpec,
    dataset: Dataset,
    schedule: BatchSchedule,
    config: TrainConfig,
    rc: RecollectionConfig = RecollectionConfig(),
    init: Optional[Params] = None,
) -> tuple[Params, ApproximatorStore]:
    """Train and compute recollection vectors in the same pass."""
    if init is None:
        init = init_params(spec, config.seed)
    rec = _Recollector(spec, rc.tracked_ids(dataset.n), rc)
    t0 = time.perf_counter()
    final, traj = train(spec, dataset, schedule, config, init, step_hook=rec)
    seconds = time.perf_counter() - t0
    store = _make_store(rec, dataset, schedule.digest, config, final, "streaming", seconds)
    store.stats.update(
        steps=len(traj.records),
        max_grad_norm=traj.max_grad_norm,
        max_used_grad_norm=traj.max_used_grad_norm,
        clip_count=traj.clip_count,
    )
    store.trajectory = traj
    return final, store


def recollect_from_trajectory(
    spec: ModelSpec,
    dataset: Dataset,
    trajectory: Trajectory,
    rc: RecollectionConfig = RecollectionConfig(),
) -> ApproximatorStore:
    """Replay the recursion offline against recorded per-step parameters."""
    if trajectory.dataset_digest != dataset.digest:
        from .errors import DigestMismatchError

        raise DigestMismatchError("trajectory was recorded on a different dataset")
    cfg = trajectory.config
    expected = cfg.epochs * -(-dataset.n // cfg.batch_size)
    for t in range(expected):
        if t >= len(trajectory.records) or trajectory.records[t].t != t:
            raise PreconditionError(f"trajectory is missing step {t} (has {len(trajectory.records)} of {expected})")
        if trajectory.records[t].params_before is None:
            raise PreconditionError(f"trajectory has no recorded parameters at step {t}")
    rec = _Recollector(spec, rc.tracked_ids(dataset.n), rc)
    t0 = time.perf_counter()
    for r in trajectory.records[:expected]:
        params = Params(r.params_before, spec)
        ids = r.batch_ids
        if len(ids):
            X, y = dataset.X[ids], dataset.y[ids]
            G, _, _ = clipped_grads(params, X, y, cfg.clip)
        else:
            X, y, G = dataset.X[ids], dataset.y[ids], np.zeros((0, spec.d))
        rec(StepContext(r, params, X, y, G))
    seconds = time.perf_counter() - t0
    store = _make_store(rec, dataset, trajectory.schedule_digest, cfg, trajectory.final, "from-trajectory", seconds)
    store.stats["steps"] = expected
    store.stats["max_grad_norm"] = trajectory.max_grad_norm
    store.stats["max_used_grad_norm"] = trajectory.max_used_grad_norm
    return store


@dataclass(frozen=True)
class ComplexityReport:
    n: int
    d: int
    epochs: int
    steps_per_epoch: int
    batch_size: int
    predicted_hvp: int
    predicted_bytes: int
    header_bytes: int
    actual_hvp: Optional[int] = None
    actual_bytes: Optional[int] = None

    @property
    def hvp_matches(self) -> Optional[bool]:
        return None if self.actual_hvp is None else self.actual_hvp == self.predicted_hvp

    @property
    def bytes_match(self) -> Optional[bool]:
        return None if self.actual_bytes is None else self.actual_bytes == self.predicted_bytes + self.header_bytes


def complexity_report(
    n: int,
    d: int,
    epochs: int,
    steps_per_epoch: int,
    batch_size: int,
    actual_hvp: Optional[int] = None,
    actual_bytes: Optional[int] = None,
) -> ComplexityReport:
    """Predicted precompute and storage cost of tracking all ``n`` samples.

    One HVP per tracked vector per step gives ``n*E*B``; the rows take
    ``8*n*d`` bytes on disk plus a header of ``96 + 8*n`` bytes.
    """
    if min(n, d, steps_per_epoch, batch_size) < 1 or epochs < 0:
        raise PreconditionError("counts must be positive")
    header = 4 + 4 + 8 + 8 + 8 * n + 64 + 8
    return ComplexityReport(
        n, d, epochs, steps_per_epoch, batch_size, n * epochs * steps_per_epoch, 8 * n * d, header, actual_hvp, actual_bytes
    )
