"""Command-line interface: ``hfunlearn <command> ...``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical
divergence, 4 digest mismatch.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .baselines import finetune, infinitesimal_jackknife, neggrad, newton_step, retrain_baseline
from .data import load_csv, load_idx, make_synthetic, save_csv
from .errors import ConfigError, DigestMismatchError, DivergenceError, HFUnlearnError
from .harness import AXES, ExperimentConfig, run_ablation, run_application, run_verification, save_result
from .model import ModelSpec, Params, estimate_constants, init_params
from .numkit import Rng
from .recollection import ApproximatorStore, RecollectionConfig, recollect_from_trajectory, recollect_streaming
from .trainer import TrainConfig, load_trajectory, save_trajectory, train
from .unlearn import (
    PrivacyBudget,
    SensitivityEstimate,
    deletion_capacity,
    sensitivity_bound,
    sensitivity_oracle,
    unlearn,
)

EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_DIGEST = 2, 3, 4


def _ids(text: str) -> list:
    """Parse ``"1,2,5-8"`` into a sorted id list."""
    out = set()
    for part in filter(None, (p.strip() for p in text.split(","))):
        try:
            if "-" in part:
                lo, hi = part.split("-", 1)
                out.update(range(int(lo), int(hi) + 1))
            else:
                out.add(int(part))
        except ValueError:
            raise ConfigError(f"bad id list entry {part!r}") from None
    return sorted(out)


def _load_data(args):
    if "," in args.data:
        images, labels = args.data.split(",", 1)
        return load_idx(images, labels, classes=args.classes or 10)
    return load_csv(args.data, label_column=args.label_column, classes=args.classes)


def _add_data(p):
    p.add_argument("--data", required=True, help="CSV file, or 'images.idx,labels.idx'")
    p.add_argument("--label-column", type=int, default=-1)
    p.add_argument("--classes", type=int, default=None, help="number of classes (default: max label + 1)")


def _add_model(p):
    p.add_argument("--kind", choices=("ridge", "logistic", "mlp2"), default="logistic")
    p.add_argument("--hidden", type=int, default=0)
    p.add_argument("--l2", type=float, default=0.5)


def _add_train(p):
    p.add_argument("--eta0", type=float, default=0.005)
    p.add_argument("--decay", type=float, default=0.995)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=25)
    p.add_argument("--clip", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)


def _setup(args, record=False):
    ds = _load_data(args)
    spec = ModelSpec(args.kind, ds.p, ds.K, hidden=args.hidden, l2=args.l2)
    cfg = TrainConfig(args.eta0, args.decay, args.epochs, args.batch_size, args.clip, args.seed, record)
    return ds, spec, cfg, cfg.schedule(ds.n), init_params(spec, args.seed)


def _say(msg: str) -> None:
    print(msg)


def cmd_gen_data(args):
    ds = make_synthetic(args.classes, args.per_class, args.dim, args.separation, args.seed)
    save_csv(ds, args.out)
    _say(f"wrote {args.out}: n={ds.n} p={ds.p} K={ds.K} digest={ds.digest}")


def cmd_train(args):
    ds, spec, cfg, sched, init = _setup(args, record=args.trajectory is not None)
    w, traj = train(spec, ds, sched, cfg, init)
    w.save(args.out)
    if args.trajectory:
        save_trajectory(traj, args.trajectory)
    _say(f"trained {spec.kind} d={spec.d} steps={len(traj.records)} params={w.digest} -> {args.out}")


def cmd_recollect(args):
    ds, spec, cfg, sched, init = _setup(args)
    rc = RecollectionConfig(tracked=_ids(args.track) if args.track else None, injection=args.injection)
    if args.from_trajectory:
        traj = load_trajectory(args.from_trajectory)
        store = recollect_from_trajectory(spec, ds, traj, rc)
        w = traj.final
    else:
        w, store = recollect_streaming(spec, ds, sched, cfg, rc, init)
    size = store.save(args.store)
    if args.out:
        w.save(args.out)
    _say(
        f"store {args.store}: rows={store.n} d={store.d} bytes={size} hvp={store.stats['hvp_count']} "
        f"params={w.digest}"
    )


def cmd_unlearn(args):
    w = Params.load(args.params)
    store = ApproximatorStore.load(args.store)
    lineage = Path(str(args.store) + ".lineage.json")
    if lineage.exists():
        store.lineage.update(json.loads(lineage.read_text()))
    ids = _ids(args.ids)
    budget = PrivacyBudget(args.epsilon, args.delta, allow_large_epsilon=args.allow_large_epsilon)
    if args.retrained:
        sens = sensitivity_oracle(Params.load(args.retrained), w, store.group_sum(ids))
    elif args.bound:
        ds, spec, cfg, sched, init = _setup(args)
        G = args.grad_bound
        if G is None:
            # replay the learning run to observe the largest per-sample gradient
            _, traj = train(spec, ds, sched, cfg, init)
            G = traj.max_used_grad_norm
        consts = estimate_constants(w, ds.X, ds.y, cfg.eta0, G, cfg.clip)
        sens = sensitivity_bound(consts, cfg.eta0, cfg.decay, sched.total_steps, sched.steps_per_epoch, sched.batch_size, len(ids))
    elif args.sensitivity is not None:
        sens = SensitivityEstimate(args.sensitivity, "oracle")
    else:
        raise ConfigError("give one of --sensitivity, --retrained or --bound")
    res = unlearn(w, store, ids, budget, sens, Rng(args.noise_seed))
    res.noisy.save(args.out)
    if args.clean_out:
        res.clean.save(args.clean_out)
    store.save(args.store)
    lineage.write_text(json.dumps(sorted(store.lineage)))
    audit = res.to_dict()
    if args.audit:
        Path(args.audit).write_text(json.dumps(audit, indent=2))
    _say(f"unlearned {len(ids)} ids sigma={res.sigma:.6g} ({sens.mode}) in {res.nanoseconds} ns -> {args.out}")


def cmd_retrain(args):
    ds, spec, cfg, sched, init = _setup(args)
    res = retrain_baseline(spec, ds, sched, _ids(args.remove), cfg, init)
    res.params.save(args.out)
    _say(f"retrained without {len(_ids(args.remove))} ids in {res.seconds:.3f}s params={res.params.digest} -> {args.out}")


def cmd_baseline(args):
    ds = _load_data(args)
    w = Params.load(args.params)
    U = _ids(args.remove)
    if args.method == "ns":
        out = newton_step(w, ds, U, args.damping)
    elif args.method == "ij":
        out = infinitesimal_jackknife(w, ds, U, args.damping)
    else:
        cfg = TrainConfig(args.eta0, 1.0, args.epochs, args.batch_size, args.clip, args.seed)
        out = finetune(w, ds.without(U), cfg) if args.method == "finetune" else neggrad(w, ds.subset(U), cfg)
    out.save(args.out)
    _say(f"{args.method}: |U|={len(U)} params={out.digest} -> {args.out}")


def _experiment(args, runner, stem):
    cfg = ExperimentConfig.load(args.config)
    if args.out:
        cfg.output = args.out
    result = runner(cfg)
    path = save_result(result, cfg.output, stem)
    bad = sum(1 for r in result.rows if r["status"] != "ok")
    _say(f"{len(result.rows)} rows ({bad} not ok) -> {path}")


def cmd_verify(args):
    _experiment(args, run_verification, "verify")


def cmd_apply(args):
    _experiment(args, run_application, "apply")


def cmd_ablate(args):
    values = None
    if args.values:
        values = [None if v == "none" else float(v) for v in args.values.split(",")]
    _experiment(args, lambda cfg: run_ablation(cfg, args.axis, values), "ablate")


def cmd_capacity(args):
    budget = PrivacyBudget(args.epsilon, args.delta, allow_large_epsilon=args.epsilon > 1)
    m = deletion_capacity(budget, args.d, args.rho, args.n, args.eta0, args.const)
    _say(f"deletion capacity (order only, constant={args.const:g}): {m:.6g}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hfunlearn", description="Hessian-free certified unlearning")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic Gaussian-cluster CSV")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--per-class", type=int, default=250)
    p.add_argument("--dim", type=int, default=10)
    p.add_argument("--separation", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="SGD training")
    _add_data(p), _add_model(p), _add_train(p)
    p.add_argument("--out", required=True, help="output params file")
    p.add_argument("--trajectory", help="also write a trajectory checkpoint file")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("recollect", help="train while computing recollection vectors")
    _add_data(p), _add_model(p), _add_train(p)
    p.add_argument("--store", required=True)
    p.add_argument("--out", help="output params file")
    p.add_argument("--track", help="ids to track, e.g. '0-9,42' (default all)")
    p.add_argument("--injection", choices=("full-batch", "leave-one-out"), default="full-batch")
    p.add_argument("--from-trajectory", help="replay a trajectory checkpoint instead of training")
    p.set_defaults(fn=cmd_recollect)

    p = sub.add_parser("unlearn", help="forget ids by vector addition plus Gaussian noise")
    p.add_argument("--params", required=True)
    p.add_argument("--store", required=True, help="store file (tombstones are written back)")
    p.add_argument("--ids", required=True)
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=1e-3)
    p.add_argument("--allow-large-epsilon", action="store_true")
    p.add_argument("--sensitivity", type=float, help="known sensitivity value")
    p.add_argument("--retrained", help="retrained params file for oracle sensitivity")
    p.add_argument("--bound", action="store_true", help="closed-form bound (needs data/model/train options)")
    p.add_argument("--grad-bound", type=float, default=None, help="G for the bound (default: observed by replaying training)")
    p.add_argument("--data")
    p.add_argument("--label-column", type=int, default=-1)
    p.add_argument("--classes", type=int, default=None)
    _add_model(p), _add_train(p)
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--out", required=True, help="noisy params file")
    p.add_argument("--clean-out", help="clean (pre-noise) params file")
    p.add_argument("--audit", help="JSON audit record")
    p.set_defaults(fn=cmd_unlearn)

    p = sub.add_parser("retrain", help="retrain from scratch without some ids")
    _add_data(p), _add_model(p), _add_train(p)
    p.add_argument("--remove", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_retrain)

    p = sub.add_parser("baseline", help="Newton step, jackknife, fine-tune or gradient ascent")
    _add_data(p)
    p.add_argument("--method", choices=("ns", "ij", "finetune", "neggrad"), required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--remove", required=True)
    p.add_argument("--damping", type=float, default=0.01)
    p.add_argument("--eta0", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--clip", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_baseline)

    for name, fn, text in (
        ("verify", cmd_verify, "distance/correlation experiment"),
        ("apply", cmd_apply, "online deletion timing experiment"),
        ("ablate", cmd_ablate, "training-knob sweep"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help=".json or .yaml experiment config")
        p.add_argument("--out", help="output directory (overrides the config)")
        if name == "ablate":
            p.add_argument("--axis", choices=AXES)
            p.add_argument("--values", help="comma-separated axis values")
        p.set_defaults(fn=fn)

    p = sub.add_parser("capacity", help="order-of-magnitude deletion capacity")
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=1e-3)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--eta0", type=float, required=True)
    p.add_argument("--const", type=float, default=1.0)
    p.set_defaults(fn=cmd_capacity)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "unlearn" and args.bound and not args.data:
        print("error: --bound needs --data", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.fn(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except DigestMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIGEST
    except (HFUnlearnError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0
