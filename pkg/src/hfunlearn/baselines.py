"""Comparison methods: retraining, Newton step, infinitesimal jackknife,
fine-tuning and gradient ascent."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Iterable, Optional

import numpy as np
from scipy import linalg

from .data import BatchSchedule, Dataset, restrict
from .errors import DivergenceError, PreconditionError
from .model import HESSIAN_CAP, ModelSpec, Params, full_hessian, per_sample_grads
from .trainer import TrainConfig, Trajectory, clipped_grads, retrain, train


@dataclass(frozen=True)
class BaselineConfig:
    damping: float = 0.01
    finetune: TrainConfig = TrainConfig(eta0=0.05, epochs=1, batch_size=32)
    neggrad: TrainConfig = TrainConfig(eta0=0.01, epochs=1, batch_size=32, clip=1.0)
    hessian_cap: int = HESSIAN_CAP

    def __post_init__(self):
        if self.damping < 0:
            raise PreconditionError("damping must be >= 0")


@dataclass(eq=False)
class RetrainResult:
    params: Params
    seconds: float
    trajectory: Trajectory


def retrain_baseline(
    spec: ModelSpec,
    dataset: Dataset,
    schedule: BatchSchedule,
    removed: Iterable[int],
    config: TrainConfig,
    init: Params,
    reference: Optional[Trajectory] = None,
) -> RetrainResult:
    """Exact retraining on the shared schedule, timed with a monotonic clock."""
    view = restrict(schedule, removed)
    t0 = time.perf_counter()
    params, traj = retrain(spec, dataset, view, config, init, reference=reference)
    return RetrainResult(params, time.perf_counter() - t0, traj)


def _spd_solve(A: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    try:
        factor = linalg.cho_factor(A, lower=True, check_finite=True)
    except linalg.LinAlgError:
        ev = np.linalg.eigvalsh(A)
        raise PreconditionError(
            f"{what}: damped Hessian is not positive definite (eigenvalues in [{ev[0]:.3g}, {ev[-1]:.3g}]); "
            "increase the damping"
        ) from None
    return linalg.cho_solve(factor, b)


def _forget_grad_sum(w: Params, dataset: Dataset, ids: list) -> np.ndarray:
    idx = np.asarray(ids, dtype=np.int64)
    return per_sample_grads(w, dataset.X[idx], dataset.y[idx]).sum(axis=0)


def _ids(U) -> list:
    return sorted(set(int(i) for i in U))


def newton_step(
    w_hat: Params,
    dataset: Dataset,
    U: Iterable[int],
    damping: float = 0.01,
    hessian: Optional[np.ndarray] = None,
    cap: int = HESSIAN_CAP,
) -> Params:
    """One damped Newton step on the remaining-data objective.

    ``w_hat + 1/(n-m) * [(sum_S H_i - sum_U H_j)/(n-m) + damping*I]^{-1} sum_U g_j``

    ``hessian`` may supply the precomputed mean full-data Hessian at ``w_hat``.
    """
    ids = _ids(U)
    if not ids:
        return w_hat
    n, m = dataset.n, len(ids)
    if m >= n:
        raise PreconditionError("Newton step needs fewer deletions than samples")
    idx = np.asarray(ids, dtype=np.int64)
    H = full_hessian(w_hat, dataset.X, dataset.y, cap=cap) if hessian is None else hessian
    H_U = full_hessian(w_hat, dataset.X[idx], dataset.y[idx], cap=cap)
    A = (n * H - m * H_U) / (n - m)
    A[np.diag_indices_from(A)] += damping
    step = _spd_solve(A, _forget_grad_sum(w_hat, dataset, ids), "newton step")
    return w_hat.with_theta(w_hat.theta + step / (n - m))


def infinitesimal_jackknife(
    w_hat: Params,
    dataset: Dataset,
    U: Iterable[int],
    damping: float = 0.01,
    hessian: Optional[np.ndarray] = None,
    cap: int = HESSIAN_CAP,
) -> Params:
    """``w_hat + 1/n * [mean_S H_i + damping*I]^{-1} sum_U g_j``."""
    ids = _ids(U)
    if not ids:
        return w_hat
    n = dataset.n
    H = full_hessian(w_hat, dataset.X, dataset.y, cap=cap) if hessian is None else hessian
    A = H.copy()
    A[np.diag_indices_from(A)] += damping
    step = _spd_solve(A, _forget_grad_sum(w_hat, dataset, ids), "infinitesimal jackknife")
    return w_hat.with_theta(w_hat.theta + step / n)


def finetune(w: Params, remaining: Dataset, config: TrainConfig) -> Params:
    """Plain SGD on the remaining data starting from ``w``."""
    if config.epochs < 1:
        raise PreconditionError("finetune needs at least one epoch")
    config = replace(config, batch_size=min(config.batch_size, remaining.n))
    final, _ = train(w.spec, remaining, config.schedule(remaining.n), config, w)
    return final


def neggrad(w: Params, forget: Dataset, config: TrainConfig) -> Params:
    """Gradient ascent on the forget set with per-sample clipping."""
    if config.epochs < 1:
        raise PreconditionError("neggrad needs at least one epoch")
    schedule = replace(config, batch_size=min(config.batch_size, forget.n)).schedule(forget.n)
    theta = w.theta.copy()
    for _, _, t, eta, ids in schedule.steps():
        G, _, _ = clipped_grads(Params(theta, w.spec), forget.X[ids], forget.y[ids], config.clip)
        theta = theta + (eta / len(ids)) * G.sum(axis=0)
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(f"gradient ascent diverged at step {t}", step=t)
    return Params(theta, w.spec)
