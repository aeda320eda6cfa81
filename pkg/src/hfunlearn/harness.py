"""Experiment orchestration: verification, application and ablation runs.

Every experiment is described by a flat :class:`ExperimentConfig` and
produces rows with the columns in :data:`COLUMNS`, written as CSV together
with a JSON run manifest.
"""

from __future__ import annotations

import csv
import io
import json
import math
import platform
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import __version__
from .baselines import finetune, infinitesimal_jackknife, neggrad, newton_step, retrain_baseline
from .data import STREAM_NOISE, STREAM_SELECT, Dataset, load_csv, load_idx, make_synthetic
from .errors import ConfigError, DivergenceError, HFUnlearnError, PreconditionError
from .model import ModelSpec, Params, estimate_constants, full_hessian, grad, init_params, per_sample_losses, predict
from .numkit import Rng, fnv1a64, hex_digest, pearson, spearman
from .recollection import RecollectionConfig, recollect_streaming
from .trainer import TrainConfig
from .unlearn import PrivacyBudget, SensitivityEstimate, gaussian_sigma, sensitivity_bound, unlearn

METHODS = ("hf", "retrain", "ns", "ij", "finetune", "neggrad")
AXES = ("step_size", "epochs", "decay", "clipping")

COLUMNS = (
    "method", "seed", "deletion_rate", "distance", "pearson", "spearman",
    "acc_test", "err_remaining", "err_forget",
    "t_precompute", "t_unlearn", "t_retrain", "speedup", "store_bytes", "sigma",
    "axis", "axis_value", "grad_norm", "config_digest", "status",
)


@dataclass
class ExperimentConfig:
    """Flat experiment description; every field is a config-file key."""

    name: str = "experiment"
    # data: "synthetic", a CSV path, or "images.idx,labels.idx"
    dataset: str = "synthetic"
    classes: int = 2
    per_class: int = 250
    dim: int = 10
    separation: float = 2.0
    data_seed: int = 7
    test_per_class: int = 100
    test_dataset: Optional[str] = None
    label_column: int = -1
    # model
    kind: str = "logistic"
    hidden: int = 0
    l2: float = 0.5
    # training
    eta0: float = 0.005
    decay: float = 0.995
    epochs: int = 10
    batch_size: int = 25
    clip: Optional[float] = None
    # experiment grid
    rates: list = field(default_factory=lambda: [0.01, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4, 5, 6])
    methods: list = field(default_factory=lambda: ["hf", "retrain", "ns", "ij"])
    # privacy
    epsilon: float = 1.0
    delta: float = 1e-3
    sensitivity: str = "oracle"
    # baselines
    damping: float = 0.01
    finetune_epochs: int = 1
    finetune_eta: float = 0.05
    neggrad_epochs: int = 1
    neggrad_eta: float = 0.01
    neggrad_clip: float = 1.0
    # metrics and outputs
    correlation: str = "per-sample"
    timings: bool = False
    app_fraction: float = 0.2
    timing_repeats: int = 5
    ablation_axis: Optional[str] = None
    ablation_values: list = field(default_factory=list)
    output: str = "results"

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
        if self.sensitivity not in ("oracle", "bound"):
            raise ConfigError("sensitivity must be 'oracle' or 'bound'")
        if self.correlation not in ("per-sample", "per-trial"):
            raise ConfigError("correlation must be 'per-sample' or 'per-trial'")
        if any(not 0 < r < 1 for r in self.rates):
            raise ConfigError("deletion rates must lie in (0, 1)")
        if self.ablation_axis is not None and self.ablation_axis not in AXES:
            raise ConfigError(f"ablation_axis must be one of {AXES}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        """Read a ``.json``, ``.yaml`` or ``.yml`` file (format from the extension)."""
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        suffix = path.suffix.lower()
        try:
            if suffix == ".json":
                d = json.loads(text)
            elif suffix in (".yaml", ".yml"):
                import yaml

                d = yaml.safe_load(text)
            else:
                raise ConfigError(f"config format not recognised from extension {suffix!r}")
        except (ValueError, ImportError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(d)

    @property
    def digest(self) -> str:
        d = asdict(self)
        d.pop("output")
        return hex_digest(fnv1a64(json.dumps(d, sort_keys=True).encode()))

    def model_spec(self, p: int, K: int) -> ModelSpec:
        return ModelSpec(self.kind, p, K, hidden=self.hidden, l2=self.l2)

    def train_config(self, seed: int, record: bool = False) -> TrainConfig:
        return TrainConfig(self.eta0, self.decay, self.epochs, self.batch_size, self.clip, seed, record)

    def budget(self) -> PrivacyBudget:
        return PrivacyBudget(self.epsilon, self.delta, allow_large_epsilon=self.epsilon > 1)


@dataclass
class ExperimentResult:
    rows: list
    config: ExperimentConfig
    manifest: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        write_rows(buf, self.rows)
        return buf.getvalue()

    def summary(self) -> list:
        return summarize(self.rows)


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Optional[Dataset]]:
    """Training set and (optional) test set described by ``cfg``."""
    if cfg.dataset == "synthetic":
        train = make_synthetic(cfg.classes, cfg.per_class, cfg.dim, cfg.separation, cfg.data_seed)
        test = None
        if cfg.test_per_class > 0:
            test = make_synthetic(cfg.classes, cfg.test_per_class, cfg.dim, cfg.separation, cfg.data_seed + 1)
        return train, test

    def one(spec):
        if "," in spec:
            images, labels = spec.split(",", 1)
            return load_idx(images, labels, classes=cfg.classes)
        return load_csv(spec, label_column=cfg.label_column, classes=cfg.classes)

    return one(cfg.dataset), (one(cfg.test_dataset) if cfg.test_dataset else None)


def select_forget(seed: int, n: int, rate: float) -> np.ndarray:
    """The first ``round(rate*n)`` ids of a seed-determined permutation, sorted."""
    m = max(1, int(round(rate * n)))
    if m >= n:
        raise PreconditionError(f"deletion rate {rate} removes every sample")
    return np.sort(Rng(seed).stream(STREAM_SELECT).permutation(n)[:m])


def metric_distance(w_retrain: Params, w_method: Params) -> float:
    if w_retrain.theta.shape != w_method.theta.shape:
        raise PreconditionError("parameter vectors differ in length")
    return float(np.linalg.norm(w_retrain.theta - w_method.theta))


def loss_changes(w: Params, w_other: Params, X, y) -> np.ndarray:
    """Per-sample ``loss(w_other) - loss(w)``."""
    return per_sample_losses(w_other, X, y) - per_sample_losses(w, X, y)


def metric_loss_change_correlation(w: Params, w_retrain: Params, a_sum, forget: Dataset):
    """Per-sample mode: correlate predicted and actual loss changes over the forget set.

    Returns ``(pearson, spearman)``; either is ``None`` when undefined.
    """
    if forget.n < 2:
        raise PreconditionError("correlation needs at least 2 forgotten samples")
    approx = loss_changes(w, w.with_theta(w.theta + np.asarray(a_sum)), forget.X, forget.y)
    actual = loss_changes(w, w_retrain, forget.X, forget.y)
    return pearson(approx, actual), spearman(approx, actual)


def accuracy_suite(params: Params, test: Optional[Dataset], remaining: Dataset, forget: Dataset) -> dict:
    """Accuracy on the test split and error rates on every split."""
    out = {}
    for name, ds in (("test", test), ("remaining", remaining), ("forget", forget)):
        if ds is None:
            continue
        if ds.n == 0:
            raise PreconditionError(f"{name} split is empty")
        acc = float(np.mean(predict(params, ds.X) == ds.y))
        out[f"acc_{name}"] = acc
        out[f"err_{name}"] = 1.0 - acc
    return out


def median_time(fn, repeats: int = 5) -> float:
    """Median wall time of ``fn()`` in seconds over ``repeats`` runs."""
    ts = []
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return statistics.median(ts)


def _row(cfg: ExperimentConfig, method: str, seed: int, rate, **values) -> dict:
    row = {c: None for c in COLUMNS}
    row.update(method=method, seed=seed, deletion_rate=rate, config_digest=cfg.digest, status="ok")
    row.update(values)
    return row


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def _sort_key(row):
    return (str(row["method"]), row["seed"], row["deletion_rate"], str(row["axis"] or ""), _fmt(row["axis_value"]))


def write_rows(fh, rows: Sequence[dict]) -> None:
    """CSV with :data:`COLUMNS` in order; rows sorted by method, seed, rate."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in sorted(rows, key=_sort_key):
        w.writerow([_fmt(row.get(c)) for c in COLUMNS])


def summarize(rows: Sequence[dict]) -> list:
    """Min/max/mean of distance and correlations per (digest, method, rate, axis value).

    Rows with different config digests never share a group.
    """
    groups = {}
    for r in rows:
        if r["status"] != "ok":
            continue
        key = (r["config_digest"], r["method"], r["deletion_rate"], r["axis"], r["axis_value"])
        groups.setdefault(key, []).append(r)
    out = []
    for key in sorted(groups, key=lambda k: tuple(_fmt(x) for x in k)):
        digest, method, rate, axis, value = key
        rec = {"config_digest": digest, "method": method, "deletion_rate": rate, "axis": axis, "axis_value": value}
        for metric in ("distance", "pearson", "spearman"):
            vals = [r[metric] for r in groups[key] if r[metric] is not None]
            rec[f"{metric}_min"] = min(vals) if vals else None
            rec[f"{metric}_max"] = max(vals) if vals else None
            rec[f"{metric}_mean"] = float(np.mean(vals)) if vals else None
        rec["count"] = len(groups[key])
        out.append(rec)
    return out


def _write_summary(path: Path, summary: list) -> None:
    cols = ["config_digest", "method", "deletion_rate", "axis", "axis_value", "count"] + [
        f"{m}_{s}" for m in ("distance", "pearson", "spearman") for s in ("min", "max", "mean")
    ]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for rec in summary:
            w.writerow([_fmt(rec.get(c)) for c in cols])


def _versions() -> dict:
    import numba
    import scipy

    return {
        "hfunlearn": __version__,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


def _host() -> dict:
    import os

    return {"platform": platform.platform(), "machine": platform.machine(), "cpus": os.cpu_count()}


def save_result(result: ExperimentResult, out_dir: Optional[Union[str, Path]] = None, stem: str = "results") -> Path:
    """Write ``<stem>.csv``, ``<stem>_summary.csv`` and ``<stem>_manifest.json``."""
    out = Path(out_dir or result.config.output)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{stem}.csv"
    path.write_text(result.to_csv())
    _write_summary(out / f"{stem}_summary.csv", result.summary())
    manifest = dict(result.manifest)
    manifest.update(config=asdict(result.config), config_digest=result.config.digest, versions=_versions(), host=_host())
    (out / f"{stem}_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


class _SeedRun:
    """Learning run shared by every method and rate for one seed."""

    def __init__(self, cfg: ExperimentConfig, seed: int, dataset: Dataset):
        self.cfg = cfg
        self.seed = seed
        self.dataset = dataset
        self.spec = cfg.model_spec(dataset.p, dataset.K)
        self.tc = cfg.train_config(seed)
        self.schedule = self.tc.schedule(dataset.n)
        self.init = init_params(self.spec, seed)
        t0 = time.perf_counter()
        self.w, self.store = recollect_streaming(self.spec, dataset, self.schedule, self.tc, RecollectionConfig(), self.init)
        self.t_precompute = time.perf_counter() - t0
        self.trajectory = self.store.trajectory
        self._hessian = None
        self._consts = None

    def hessian(self):
        if self._hessian is None:
            self._hessian = full_hessian(self.w, self.dataset.X, self.dataset.y)
        return self._hessian

    def grad_norm(self) -> float:
        return float(np.linalg.norm(grad(self.w, self.dataset.X, self.dataset.y)))

    def constants(self, G: float):
        if self._consts is None:
            self._consts = estimate_constants(self.w, self.dataset.X, self.dataset.y, self.tc.eta0, G, self.tc.clip)
        return replace(self._consts, G=max(self._consts.G, G))

    def sensitivity(self, U, retrained, retrain_traj) -> SensitivityEstimate:
        a = self.store.group_sum(U)
        if self.cfg.sensitivity == "oracle":
            from .unlearn import sensitivity_oracle

            return sensitivity_oracle(retrained, self.w, a)
        G = max(self.trajectory.max_used_grad_norm, retrain_traj.max_used_grad_norm)
        s = self.schedule
        return sensitivity_bound(self.constants(G), self.tc.eta0, self.tc.decay, s.total_steps, s.steps_per_epoch, s.batch_size, len(U))

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "schedule_digest": self.schedule.digest,
            "init_digest": self.init.digest,
            "learned_digest": self.w.digest,
            "hvp_count": self.store.stats["hvp_count"],
        }


def _method_params(run: _SeedRun, method: str, U, retrained: Params):
    cfg, ds = run.cfg, run.dataset
    if method == "hf":
        return run.w.with_theta(run.w.theta + run.store.group_sum(U))
    if method == "retrain":
        return retrained
    if method == "ns":
        return newton_step(run.w, ds, U, cfg.damping, run.hessian())
    if method == "ij":
        return infinitesimal_jackknife(run.w, ds, U, cfg.damping, run.hessian())
    if method == "finetune":
        tc = TrainConfig(cfg.finetune_eta, 1.0, cfg.finetune_epochs, cfg.batch_size, cfg.clip, run.seed)
        return finetune(run.w, ds.without(U), tc)
    if method == "neggrad":
        tc = TrainConfig(cfg.neggrad_eta, 1.0, cfg.neggrad_epochs, cfg.batch_size, cfg.neggrad_clip, run.seed)
        return neggrad(run.w, ds.subset(U), tc)
    raise ConfigError(f"unknown method {method}")


def _verify_seed(cfg: ExperimentConfig, run: _SeedRun, test, rates, extra=None) -> list:
    """Rows for every (rate, method) of one learning run."""
    extra = extra or {}
    rows = []
    ds = run.dataset
    for rate in rates:
        try:
            U = select_forget(run.seed, ds.n, rate)
            res = retrain_baseline(run.spec, ds, run.schedule, U, run.tc, run.init, reference=run.trajectory)
            retrained, t_retrain = res.params, res.seconds
            sens = run.sensitivity(U, retrained, res.trajectory) if "hf" in cfg.methods else None
        except HFUnlearnError as exc:
            for method in cfg.methods:
                rows.append(_row(cfg, method, run.seed, rate, status=f"error: {exc}", **extra))
            continue
        forget, remaining = ds.subset(U), ds.without(U)
        actual = loss_changes(run.w, retrained, forget.X, forget.y)
        for method in cfg.methods:
            try:
                t0 = time.perf_counter()
                wm = _method_params(run, method, U, retrained)
                t_method = time.perf_counter() - t0
                vals = dict(distance=metric_distance(retrained, wm))
                if forget.n >= 2:
                    approx = loss_changes(run.w, wm, forget.X, forget.y)
                    vals["pearson"], vals["spearman"] = pearson(approx, actual), spearman(approx, actual)
                    vals["_pair"] = (float(approx.sum()), float(actual.sum()))
                else:
                    vals["_pair"] = (float(loss_changes(run.w, wm, forget.X, forget.y).sum()), float(actual.sum()))
                evaluated = wm
                if method == "hf":
                    sigma = gaussian_sigma(sens.value, cfg.budget())
                    noise = Rng(run.seed).stream(STREAM_NOISE).normal(run.spec.d) * sigma
                    evaluated = wm.with_theta(wm.theta + noise)
                    vals["sigma"] = sigma
                    vals["store_bytes"] = run.store.file_size()
                if method in ("ns", "ij"):
                    vals["grad_norm"] = run.grad_norm()
                vals.update(
                    {k: v for k, v in accuracy_suite(evaluated, test, remaining, forget).items() if k in COLUMNS}
                )
                if cfg.timings:
                    if method == "hf":
                        a_rows = run.store.rows_for(U)
                        t_method = median_time(lambda: run.w.theta + run.store.vectors[a_rows].sum(axis=0), cfg.timing_repeats)
                        vals["t_precompute"] = run.t_precompute
                    elif method == "retrain":
                        t_method = t_retrain
                    vals.update(t_unlearn=t_method, t_retrain=t_retrain, speedup=t_retrain / t_method if t_method > 0 else None)
                rows.append(_row(cfg, method, run.seed, rate, **vals, **extra))
            except HFUnlearnError as exc:
                rows.append(_row(cfg, method, run.seed, rate, status=f"error: {exc}", **extra))
    return rows


def _per_trial(rows: list) -> None:
    """Replace per-sample correlations with correlations over trials per method."""
    by_method = {}
    for r in rows:
        if "_pair" in r:
            by_method.setdefault((r["method"], r["axis"], _fmt(r["axis_value"])), []).append(r)
    for group in by_method.values():
        xs = [r["_pair"][0] for r in group]
        ys = [r["_pair"][1] for r in group]
        p = s = None
        if len(group) >= 2:
            p, s = pearson(xs, ys), spearman(xs, ys)
        for r in group:
            r["pearson"], r["spearman"] = p, s


def _finish(cfg: ExperimentConfig, rows: list) -> list:
    if cfg.correlation == "per-trial":
        _per_trial(rows)
    for r in rows:
        r.pop("_pair", None)
    return rows


def run_verification(cfg: ExperimentConfig) -> ExperimentResult:
    """Distance and loss-change correlations of every method against retraining."""
    dataset, test = load_data(cfg)
    rows, runs = [], []
    for seed in cfg.seeds:
        try:
            run = _SeedRun(cfg, seed, dataset)
        except HFUnlearnError as exc:
            rows.extend(_row(cfg, m, seed, r, status=f"error: {exc}") for r in cfg.rates for m in cfg.methods)
            continue
        runs.append(run.manifest())
        rows.extend(_verify_seed(cfg, run, test, cfg.rates))
    manifest = {"experiment": "verify", "dataset_digest": dataset.digest, "runs": runs}
    return ExperimentResult(_finish(cfg, rows), cfg, manifest)


def run_application(cfg: ExperimentConfig, store_dir: Optional[Union[str, Path]] = None) -> ExperimentResult:
    """Online deletion of ``app_fraction`` of the data, one sample per request.

    Each request is a clean vector addition (timed). Noise is drawn once on the
    final model, calibrated to the sensitivity of the whole forgotten group.
    """
    dataset, test = load_data(cfg)
    budget = cfg.budget()
    rows, runs = [], []
    rate = cfg.app_fraction
    for seed in cfg.seeds:
        try:
            run = _SeedRun(cfg, seed, dataset)
            path = Path(store_dir or cfg.output) / f"store_seed{seed}.hfun"
            path.parent.mkdir(parents=True, exist_ok=True)
            t0 = time.perf_counter()
            store_bytes = run.store.save(path)
            t_io = time.perf_counter() - t0
            U = select_forget(seed, dataset.n, rate)
            order = Rng(seed).stream(STREAM_SELECT).split(1).permutation(len(U))
            zero = SensitivityEstimate(0.0, "oracle")
            w = run.w
            per_request = []
            for k in order:
                res = unlearn(w, run.store, [int(U[k])], budget, zero, Rng(seed))
                per_request.append(res.nanoseconds * 1e-9)
                w = res.clean
            t_unlearn = statistics.median(per_request)
            res = retrain_baseline(run.spec, dataset, run.schedule, U, run.tc, run.init, reference=run.trajectory)
            sens = run.sensitivity(U, res.params, res.trajectory)
            sigma = gaussian_sigma(sens.value, budget)
            noisy = w.with_theta(w.theta + sigma * Rng(seed).stream(STREAM_NOISE).normal(run.spec.d))
        except HFUnlearnError as exc:
            rows.append(_row(cfg, "hf", seed, rate, status=f"error: {exc}"))
            continue
        forget, remaining = dataset.subset(U), dataset.without(U)
        acc = accuracy_suite(noisy, test, remaining, forget)
        rows.append(_row(
            cfg, "hf", seed, rate, distance=metric_distance(res.params, w), t_precompute=run.t_precompute,
            t_unlearn=t_unlearn, t_retrain=res.seconds, speedup=res.seconds / t_unlearn if t_unlearn > 0 else None,
            store_bytes=store_bytes, sigma=sigma, **{k: v for k, v in acc.items() if k in COLUMNS},
        ))
        acc_r = accuracy_suite(res.params, test, remaining, forget)
        rows.append(_row(
            cfg, "retrain", seed, rate, distance=0.0, t_unlearn=res.seconds, t_retrain=res.seconds, speedup=1.0,
            **{k: v for k, v in acc_r.items() if k in COLUMNS},
        ))
        for method in [m for m in cfg.methods if m in ("ns", "ij")]:
            fn = newton_step if method == "ns" else infinitesimal_jackknife
            try:
                H = run.hessian()
                ts = []
                for k in order[: cfg.timing_repeats]:
                    t0 = time.perf_counter()
                    fn(run.w, dataset, [int(U[k])], cfg.damping, H)
                    ts.append(time.perf_counter() - t0)
                wm = fn(run.w, dataset, U, cfg.damping, H)
                t_m = statistics.median(ts)
                acc_m = accuracy_suite(wm, test, remaining, forget)
                rows.append(_row(
                    cfg, method, seed, rate, distance=metric_distance(res.params, wm), t_unlearn=t_m,
                    t_retrain=res.seconds, speedup=res.seconds / t_m, grad_norm=run.grad_norm(),
                    **{k: v for k, v in acc_m.items() if k in COLUMNS},
                ))
            except HFUnlearnError as exc:
                rows.append(_row(cfg, method, seed, rate, status=f"error: {exc}"))
        m = run.manifest()
        m.update(store_path=str(path), store_io_seconds=t_io, requests=len(U), sensitivity_mode=sens.mode,
                 sensitivity=sens.value, composition="per-request (epsilon, delta) only; no composition accounting")
        runs.append(m)
    manifest = {"experiment": "apply", "dataset_digest": dataset.digest, "runs": runs}
    return ExperimentResult(rows, cfg, manifest)


def _axis_config(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "step_size":
        return replace(cfg, eta0=float(value))
    if axis == "epochs":
        return replace(cfg, epochs=int(value))
    if axis == "decay":
        return replace(cfg, decay=float(value))
    if axis == "clipping":
        return replace(cfg, clip=None if value in (None, "none", 0) else float(value))
    raise ConfigError(f"unknown ablation axis {axis!r}")


def run_ablation(cfg: ExperimentConfig, axis: Optional[str] = None, values: Optional[Sequence] = None) -> ExperimentResult:
    """Sweep one training knob with the others fixed; HF distance per value.

    A run whose recollection vectors blow up is kept as a ``diverged`` row.
    """
    axis = axis or cfg.ablation_axis
    values = list(values if values is not None else cfg.ablation_values)
    if axis not in AXES:
        raise ConfigError(f"ablation axis must be one of {AXES}")
    if not values:
        raise ConfigError("no ablation values given")
    dataset, test = load_data(cfg)
    rows, runs = [], []
    base = replace(cfg, methods=["hf"])
    for value in values:
        sub = _axis_config(base, axis, value)
        extra = {"axis": axis, "axis_value": value, "config_digest": sub.digest}
        for seed in cfg.seeds:
            try:
                run = _SeedRun(sub, seed, dataset)
            except DivergenceError as exc:
                rows.extend(_row(sub, "hf", seed, r, status=f"diverged: {exc}", **extra) for r in cfg.rates)
                continue
            except HFUnlearnError as exc:
                rows.extend(_row(sub, "hf", seed, r, status=f"error: {exc}", **extra) for r in cfg.rates)
                continue
            runs.append(dict(run.manifest(), axis_value=value))
            rows.extend(_verify_seed(sub, run, test, cfg.rates, extra))
    manifest = {"experiment": "ablate", "axis": axis, "dataset_digest": dataset.digest, "runs": runs}
    return ExperimentResult(_finish(cfg, rows), cfg, manifest)
