"""Deterministic mini-batch SGD for learning and retraining.

Retraining walks the learning schedule with the removed ids dropped from each
gradient sum while the divisor stays the original batch size, so the
step-size-to-batch-size ratio matches the learning run.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .data import BatchSchedule, Dataset, RemovalView, build_schedule
from .errors import DigestMismatchError, DivergenceError, FormatError, PreconditionError
from .model import ModelSpec, Params, per_sample_grads
from .numkit import fnv1a64, hex_digest


@dataclass(frozen=True)
class TrainConfig:
    eta0: float = 0.05
    decay: float = 1.0
    epochs: int = 5
    batch_size: int = 32
    clip: Optional[float] = None
    seed: int = 0
    record_trajectory: bool = False

    def __post_init__(self):
        if not self.eta0 > 0:
            raise PreconditionError("eta0 must be positive")
        if not 0 < self.decay <= 1:
            raise PreconditionError("decay must lie in (0, 1]")
        if self.clip is not None and not self.clip > 0:
            raise PreconditionError("clip threshold must be positive")

    def schedule(self, n: int) -> BatchSchedule:
        return build_schedule(n, self.batch_size, self.epochs, self.eta0, self.decay, self.seed)

    @property
    def digest(self) -> str:
        # record_trajectory does not change the arithmetic
        d = asdict(self)
        d.pop("record_trajectory")
        return hex_digest(fnv1a64(json.dumps(d, sort_keys=True).encode()))


@dataclass(frozen=True, eq=False)
class StepRecord:
    epoch: int
    batch: int
    t: int
    eta: float
    batch_ids: np.ndarray  # ids that entered the gradient sum
    divisor: int
    params_before: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class StepContext:
    """What a step hook sees: state strictly before the parameter write."""

    record: StepRecord
    params: Params
    X: np.ndarray
    y: np.ndarray
    grads: np.ndarray  # clipped per-sample gradients, one row per batch id


@dataclass(eq=False)
class Trajectory:
    records: list
    final: Params
    init_digest: str
    dataset_digest: str
    schedule_digest: str
    schedule_seed: int
    config: TrainConfig
    removed: frozenset = frozenset()
    max_grad_norm: float = 0.0
    max_used_grad_norm: float = 0.0
    clip_count: int = 0

    @property
    def config_digest(self) -> str:
        return self.config.digest

    def params_at(self, t: int) -> np.ndarray:
        """Parameters before step ``t`` (``t == len(records)`` gives the final)."""
        if t == len(self.records):
            return self.final.theta
        rec = self.records[t]
        if rec.params_before is None:
            raise PreconditionError(f"trajectory has no recorded parameters at step {t}")
        return rec.params_before


StepHook = Callable[[StepContext], None]


def clip(g: np.ndarray, threshold: Optional[float]) -> np.ndarray:
    """Rescale ``g`` to norm ``threshold`` if it is longer."""
    if threshold is None:
        return g
    if not threshold > 0:
        raise PreconditionError("clip threshold must be positive")
    norm = float(np.linalg.norm(g))
    if norm <= threshold:
        return g
    return g * (threshold / norm)


def clipped_grads(params: Params, X, y, threshold: Optional[float]):
    """Per-sample gradients clipped row-wise; returns ``(grads, raw_norms, n_clipped)``."""
    G = per_sample_grads(params, X, y)
    with np.errstate(over="ignore", invalid="ignore"):
        norms = np.linalg.norm(G, axis=1)
    if threshold is None:
        return G, norms, 0
    over = norms > threshold
    if over.any():
        G[over] *= (threshold / norms[over])[:, None]
    return G, norms, int(over.sum())


def _run(spec, dataset, steps, config, init, schedule_digest, removed, hook):
    if init.spec != spec:
        raise PreconditionError("init params were built for a different model spec")
    if dataset.p != spec.input_dim:
        raise PreconditionError("dataset feature dimension does not match the model")
    theta = init.theta.copy()
    records = []
    max_raw = max_used = 0.0
    n_clipped = 0
    for e, b, t, eta, ids, divisor in steps:
        before = Params(theta, spec)
        rec = StepRecord(e, b, t, eta, ids, divisor, before.theta if config.record_trajectory else None)
        records.append(rec)
        if len(ids) == 0:
            if hook is not None:
                hook(StepContext(rec, before, dataset.X[ids], dataset.y[ids], np.zeros((0, spec.d))))
            continue
        Xb, yb = dataset.X[ids], dataset.y[ids]
        G, norms, c = clipped_grads(before, Xb, yb, config.clip)
        if not np.all(np.isfinite(G)):
            raise DivergenceError(f"non-finite gradient at step {t}", step=t)
        max_raw = max(max_raw, float(norms.max()))
        max_used = max(max_used, min(float(norms.max()), config.clip) if config.clip else float(norms.max()))
        n_clipped += c
        if hook is not None:
            hook(StepContext(rec, before, Xb, yb, G))
        with np.errstate(over="ignore", invalid="ignore"):
            theta = theta - (eta / divisor) * G.sum(axis=0)
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(f"parameters became non-finite at step {t}", step=t)
    final = Params(theta, spec)
    traj = Trajectory(
        records, final, init.digest, dataset.digest, schedule_digest, 0, config, frozenset(removed),
        max_raw, max_used, n_clipped,
    )
    return final, traj


def train(
    spec: ModelSpec,
    dataset: Dataset,
    schedule: BatchSchedule,
    config: TrainConfig,
    init: Params,
    step_hook: Optional[StepHook] = None,
) -> tuple[Params, Trajectory]:
    """Plain SGD over ``schedule``; the hook runs before every parameter write."""
    if schedule.n != dataset.n:
        raise PreconditionError(f"schedule covers n={schedule.n}, dataset has n={dataset.n}")
    steps = ((e, b, t, eta, batch, len(batch)) for e, b, t, eta, batch in schedule.steps())
    final, traj = _run(spec, dataset, steps, config, init, schedule.digest, (), step_hook)
    traj.schedule_seed = schedule.seed
    return final, traj


def retrain(
    spec: ModelSpec,
    dataset: Dataset,
    view: RemovalView,
    config: TrainConfig,
    init: Params,
    reference: Optional[Trajectory] = None,
    step_hook: Optional[StepHook] = None,
) -> tuple[Params, Trajectory]:
    """Repeat the learning loop without the removed ids.

    With ``reference`` (the learning trajectory) the dataset, schedule,
    configuration and initialisation digests must all match.
    """
    if view.base.n != dataset.n:
        raise PreconditionError(f"schedule covers n={view.base.n}, dataset has n={dataset.n}")
    if reference is not None:
        checks = [
            ("dataset", reference.dataset_digest, dataset.digest),
            ("schedule", reference.schedule_digest, view.base.digest),
            ("config", reference.config_digest, config.digest),
            ("init", reference.init_digest, init.digest),
        ]
        for what, want, got in checks:
            if want != got:
                raise DigestMismatchError(f"{what} digest {got} does not match the learning run ({want})")
    final, traj = _run(spec, dataset, view.steps(), config, init, view.base.digest, view.removed, step_hook)
    traj.schedule_seed = view.base.seed
    return final, traj


def replay(trajectory: Trajectory, dataset: Dataset, init: Params) -> Params:
    """Re-apply the recorded (eta, batch, divisor) sequence from ``init``."""
    steps = ((r.epoch, r.batch, r.t, r.eta, r.batch_ids, r.divisor) for r in trajectory.records)
    cfg = trajectory.config
    final, _ = _run(init.spec, dataset, steps, cfg, init, trajectory.schedule_digest, trajectory.removed, None)
    return final


@dataclass(frozen=True, eq=False)
class Lemma41Report:
    observed: np.ndarray
    bound: np.ndarray
    holds: np.ndarray

    @property
    def max_ratio(self) -> float:
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(self.bound > 0, self.observed / self.bound, np.where(self.observed > 0, np.inf, 0.0))
        return float(r.max()) if r.size else 0.0

    @property
    def all_hold(self) -> bool:
        return bool(self.holds.all())


def lemma41_bound(t, G: float, eta0: float, q: float) -> np.ndarray:
    """``2*eta0*G*(1 - q**t)/(1 - q)``; the ``q == 1`` limit is ``2*eta0*G*t``."""
    t = np.asarray(t, dtype=np.float64)
    if q == 1.0:
        return 2.0 * eta0 * G * t
    return 2.0 * eta0 * G * (1.0 - q**t) / (1.0 - q)


def lemma41_check(learn: Trajectory, retrained: Trajectory, G: float, eta0: float, q: float) -> Lemma41Report:
    """Compare ``||w_t^{-U} - w_t||`` with the trajectory-gap bound at every step."""
    T = len(learn.records)
    if len(retrained.records) != T:
        raise PreconditionError("trajectories have different lengths")
    ts = np.arange(T + 1)
    observed = np.array([np.linalg.norm(retrained.params_at(t) - learn.params_at(t)) for t in ts])
    bound = lemma41_bound(ts, G, eta0, q)
    # a hair of slack for the t=0 / float-rounding cases
    holds = observed <= bound * (1 + 1e-12) + 1e-15
    return Lemma41Report(observed, bound, holds)


_TRAJ_MAGIC = b"HFTR"


def save_trajectory(traj: Trajectory, path: Union[str, Path]) -> None:
    """Write a checkpoint file: header, one record per step, final params."""
    cfg = json.dumps(asdict(traj.config), sort_keys=True).encode()
    out = [_TRAJ_MAGIC, struct.pack("<IQ", 1, len(traj.records))]
    for dg in (traj.init_digest, traj.dataset_digest, traj.schedule_digest):
        out.append(dg.encode("ascii"))
    out.append(struct.pack("<QQ", traj.schedule_seed & ((1 << 64) - 1), len(cfg)))
    out.append(cfg)
    removed = sorted(traj.removed)
    out.append(struct.pack("<Q", len(removed)) + np.asarray(removed, dtype="<u8").tobytes())
    for r in traj.records:
        if r.params_before is None:
            raise PreconditionError(f"step {r.t} has no recorded parameters; train with record_trajectory=True")
        ids = np.asarray(r.batch_ids, dtype="<u8")
        out.append(struct.pack("<QQQdQQ", r.epoch, r.batch, r.t, r.eta, r.divisor, len(ids)) + ids.tobytes())
        out.append(Params(r.params_before, traj.final.spec).to_bytes())
    out.append(traj.final.to_bytes())
    Path(path).write_bytes(b"".join(out))


def load_trajectory(path: Union[str, Path]) -> Trajectory:
    raw = Path(path).read_bytes()
    if raw[:4] != _TRAJ_MAGIC:
        raise FormatError(f"{path}: bad trajectory magic")
    try:
        version, count = struct.unpack_from("<IQ", raw, 4)
        off = 16
        digests = [raw[off + 16 * i : off + 16 * (i + 1)].decode("ascii") for i in range(3)]
        off += 48
        seed, clen = struct.unpack_from("<QQ", raw, off)
        off += 16
        config = TrainConfig(**json.loads(raw[off : off + clen]))
        off += clen
        (nrem,) = struct.unpack_from("<Q", raw, off)
        off += 8
        removed = frozenset(int(i) for i in np.frombuffer(raw, dtype="<u8", count=nrem, offset=off))
        off += 8 * nrem
        hsize = struct.calcsize("<QQQdQQ")
        records = []
        for _ in range(count):
            e, b, t, eta, div, k = struct.unpack_from("<QQQdQQ", raw, off)
            off += hsize
            ids = np.frombuffer(raw, dtype="<u8", count=k, offset=off).astype(np.int64)
            off += 8 * k
            params, off = Params.from_bytes(raw, off)
            records.append(StepRecord(e, b, t, eta, ids, div, params.theta))
        final, off = Params.from_bytes(raw, off)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt trajectory file ({exc})") from None
    if version != 1:
        raise FormatError(f"{path}: unsupported trajectory version {version}")
    traj = Trajectory(records, final, digests[0], digests[1], digests[2], seed, config, removed)
    return traj
