"""Deletion by vector addition plus Gaussian noise.

Given the learned model ``w`` and the stored recollection vectors, forgetting
a set ``U`` is ``w + sum(a_u for u in U)`` followed by Gaussian noise whose
scale comes from a sensitivity estimate: either measured against a retrained
model (``oracle``) or the closed-form bound (``bound``).
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .data import Dataset
from .errors import ConfigError, DigestMismatchError, PreconditionError
from .model import ModelSpec, Params, RegularityConstants
from .numkit import Rng, gaussian_vector, l2_norm
from .recollection import ApproximatorStore, RecollectionConfig, _make_store, _Recollector
from .trainer import TrainConfig, train

NO_COMPOSITION = "no composition accounting"
_SUM_BLOCK = 32768  # float64 entries per gathered block


@dataclass(frozen=True)
class PrivacyBudget:
    """``(epsilon, delta)`` for the classical Gaussian mechanism.

    The classical calibration is only valid for ``epsilon <= 1``. Larger
    values need ``allow_large_epsilon=True`` and raise a warning.
    """

    epsilon: float
    delta: float
    allow_large_epsilon: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if self.epsilon > 1:
            if not self.allow_large_epsilon:
                raise ConfigError(
                    f"epsilon={self.epsilon} is outside the classical Gaussian-mechanism regime (epsilon <= 1); "
                    "pass allow_large_epsilon=True to proceed anyway"
                )
            warnings.warn("epsilon > 1: outside the classical Gaussian-mechanism regime", stacklevel=3)

    @property
    def outside_classical(self) -> bool:
        return self.epsilon > 1


def gaussian_sigma(sensitivity: float, budget: PrivacyBudget) -> float:
    """Per-coordinate noise std ``sensitivity * sqrt(2 ln(1.25/delta)) / epsilon``."""
    if sensitivity < 0:
        raise PreconditionError("sensitivity must be >= 0")
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / budget.delta)) / budget.epsilon


@dataclass(frozen=True)
class SensitivityEstimate:
    value: float
    mode: str  # "oracle" or "bound"
    inputs: Optional[dict] = None

    def __post_init__(self):
        if self.mode not in ("oracle", "bound"):
            raise PreconditionError(f"unknown sensitivity mode {self.mode!r}")
        if not (self.value >= 0 and math.isfinite(self.value)):
            raise PreconditionError(f"sensitivity must be finite and >= 0, got {self.value}")
        if self.mode == "bound":
            inp = self.inputs or {}
            q, rho = inp.get("q"), inp.get("rho")
            if q is None or rho is None or not q < rho < 1:
                raise PreconditionError("bound-mode sensitivity needs q < rho < 1")


@dataclass(frozen=True)
class UnlearnRequest:
    ids: frozenset
    arrival: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ids", frozenset(int(i) for i in self.ids))
        if not self.ids:
            raise PreconditionError("an unlearning request must name at least one id")

    @property
    def m(self) -> int:
        return len(self.ids)


def as_request(ids: Union[UnlearnRequest, Iterable[int]], arrival: int = 0) -> UnlearnRequest:
    return ids if isinstance(ids, UnlearnRequest) else UnlearnRequest(frozenset(ids), arrival)


@dataclass(eq=False)
class UnlearnResult:
    clean: Params
    noisy: Params
    sigma: float
    consumed: tuple
    nanoseconds: int
    sensitivity: SensitivityEstimate
    budget: PrivacyBudget
    noise_seed: int = 0
    noise_state: tuple = ()
    notes: tuple = ()

    def to_dict(self) -> dict:
        """Audit record: enough to replay the noise draw from ``clean``."""
        return {
            "consumed": list(self.consumed),
            "sigma": self.sigma,
            "epsilon": self.budget.epsilon,
            "delta": self.budget.delta,
            "sensitivity": self.sensitivity.value,
            "sensitivity_mode": self.sensitivity.mode,
            "noise_seed": self.noise_seed,
            "noise_state": [str(s) for s in self.noise_state],
            "clean_digest": self.clean.digest,
            "noisy_digest": self.noisy.digest,
            "nanoseconds": self.nanoseconds,
            "notes": list(self.notes),
        }


def _check_request(store: ApproximatorStore, request: UnlearnRequest) -> list:
    ids = sorted(request.ids)
    missing = [i for i in ids if i not in store]
    if missing:
        raise PreconditionError(f"ids not tracked by the store: {missing[:5]}")
    reused = [i for i in ids if i in store.consumed]
    if reused:
        raise PreconditionError(f"ids already unlearned: {reused[:5]}")
    if store.meta.injection == "leave-one-out" and len(ids) > 1:
        raise PreconditionError("leave-one-out rows cannot be summed; unlearn one id at a time")
    return ids


def unlearn(
    w: Params,
    store: ApproximatorStore,
    request,
    budget: PrivacyBudget,
    sens: SensitivityEstimate,
    rng: Rng,
    check_provenance: bool = True,
) -> UnlearnResult:
    """Forget ``request`` from ``w``: add the group approximator, then noise.

    ``w`` must be the model the store was built for, or a clean model
    produced from it by an earlier call. Consumed ids are tombstoned.
    """
    request = as_request(request)
    if w.spec.d != store.d:
        raise PreconditionError(f"store rows have d={store.d}, model has d={w.spec.d}")
    if check_provenance and w.digest not in store.lineage:
        raise DigestMismatchError(
            f"model {w.digest} is not the store's learned model ({store.meta.params_digest}) or one derived from it"
        )
    ids = _check_request(store, request)
    rows = store.rows_for(ids)
    theta = w.theta
    vectors = store.vectors
    t0 = time.perf_counter_ns()
    clean_theta = theta + vectors[rows[0]]
    # remaining rows go in cache-sized blocks so the gathered temporary stays small
    step = max(1, _SUM_BLOCK // store.d)
    for i in range(1, len(rows), step):
        clean_theta += vectors[rows[i : i + step]].sum(axis=0)
    elapsed = time.perf_counter_ns() - t0
    clean = Params(clean_theta, w.spec)
    sigma = gaussian_sigma(sens.value, budget)
    state = rng.state
    noisy = Params(clean_theta + gaussian_vector(rng, sigma, w.spec.d), w.spec)
    store.consumed.update(ids)
    store.lineage.add(clean.digest)
    notes = ("outside classical regime",) if budget.outside_classical else ()
    return UnlearnResult(clean, noisy, sigma, tuple(ids), elapsed, sens, budget, rng.seed, state, notes)


def unlearn_sequential(
    w: Params,
    store: ApproximatorStore,
    requests: Sequence,
    budget: PrivacyBudget,
    sens: Union[SensitivityEstimate, Callable[[UnlearnRequest], SensitivityEstimate]],
    rng: Rng,
) -> list:
    """Apply disjoint requests one after another to the running clean model.

    Every request draws fresh noise at the per-request budget; no privacy
    composition across requests is accounted for, and results say so.
    """
    reqs = [as_request(r, k) for k, r in enumerate(requests)]
    seen = set()
    for r in reqs:
        if seen & r.ids:
            raise PreconditionError(f"requests overlap on ids {sorted(seen & r.ids)[:5]}")
        seen |= r.ids
    results = []
    current = w
    for r in reqs:
        s = sens(r) if callable(sens) else sens
        res = unlearn(current, store, r, budget, s, rng)
        if len(reqs) > 1:
            res.notes = res.notes + (NO_COMPOSITION,)
        results.append(res)
        current = res.clean
    return results


def sensitivity_oracle(w_retrained: Params, w: Params, a_sum: np.ndarray) -> SensitivityEstimate:
    """``||w_retrained - w - a_sum||`` measured against an actual retrain."""
    a_sum = np.asarray(a_sum, dtype=np.float64)
    if not (w_retrained.theta.shape == w.theta.shape == a_sum.shape):
        raise PreconditionError("dimension mismatch between retrained, learned and approximator vectors")
    return SensitivityEstimate(l2_norm(w_retrained.theta - w.theta - a_sum), "oracle")


def per_sample_bound(eta0: float, G: float, q: float, rho: float, T: int, batch_size: int) -> float:
    """Closed-form single-sample approximation-error bound.

    ``2*eta*G*(rho**T - q**(2T)) * (eta*q/((rho-q)*(rho-q**2)) + 1/(|B|*(rho-q)))``
    """
    if not q < rho < 1:
        raise PreconditionError(
            f"the bound needs q < rho < 1 (q={q}, rho={rho}); lower the step size or use oracle sensitivity"
        )
    if not G > 0:
        raise PreconditionError("G must be positive")
    return (
        2.0 * eta0 * G * (rho**T - q ** (2 * T))
        * (eta0 * q / ((rho - q) * (rho - q * q)) + 1.0 / (batch_size * (rho - q)))
    )


def sensitivity_bound(
    consts: RegularityConstants,
    eta0: float,
    q: float,
    T: int,
    B: int,
    batch_size: int,
    m: int = 1,
) -> SensitivityEstimate:
    """``m`` times the single-sample bound (triangle inequality over rows)."""
    if m < 1:
        raise PreconditionError("m must be >= 1")
    rho = consts.rho_at(eta0)
    value = m * per_sample_bound(eta0, consts.G, q, rho, T, batch_size)
    inputs = dict(eta0=eta0, G=consts.G, q=q, rho=rho, T=T, B=B, batch_size=batch_size, m=m)
    return SensitivityEstimate(value, "bound", inputs)


def deletion_capacity(budget: PrivacyBudget, d: int, rho: float, n: int, eta0: float, const: float = 1.0) -> float:
    """Order-of-magnitude deletion capacity ``c*eps/(eta*sqrt(ln(1/delta))*sqrt(d)*rho**n)``.

    Order-only: the true constant is unknown and ``const`` defaults to 1.
    """
    if not 0 < rho <= 1:
        raise PreconditionError("rho must lie in (0, 1]")
    if d < 1 or eta0 <= 0:
        raise PreconditionError("need d >= 1 and eta0 > 0")
    return const * budget.epsilon / (eta0 * math.sqrt(math.log(1.0 / budget.delta)) * math.sqrt(d) * rho**n)


def repair(
    spec: ModelSpec,
    remaining: Dataset,
    w: Params,
    store: ApproximatorStore,
    config: TrainConfig,
    rc: RecollectionConfig = RecollectionConfig(),
) -> tuple[Params, ApproximatorStore]:
    """Fine-tune ``w`` on ``remaining`` while carrying the old rows along.

    The recursion starts from the stored rows of the remaining samples (looked
    up through ``remaining.source_ids``), so old influence passes through the
    repair multipliers and the new injections add on top. The returned store
    is keyed by the original ids and its lineage starts at the repaired model.
    """
    if config.epochs == 0:
        return w, store
    src = remaining.source_ids
    missing = [int(i) for i in src if not store.available(i)]
    if missing:
        raise PreconditionError(f"store has no usable rows for remaining ids {missing[:5]}")
    if rc.tracked is not None:
        raise PreconditionError("repair tracks every remaining sample")
    initial = store.vectors[store.rows_for(src)]
    rec = _Recollector(spec, np.arange(remaining.n, dtype=np.int64), rc, initial=initial)
    schedule = config.schedule(remaining.n)
    t0 = time.perf_counter()
    final, traj = train(spec, remaining, schedule, config, w, step_hook=rec)
    seconds = time.perf_counter() - t0
    new = _make_store(rec, remaining, schedule.digest, config, final, "repair", seconds)
    new = ApproximatorStore(src.copy(), new.vectors, new.meta, stats=new.stats)
    new.stats["max_grad_norm"] = traj.max_grad_norm
    return final, new
