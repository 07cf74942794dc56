"""Command-line entry point: ``anytimenet <command> [flags]``.

Exit codes: 0 ok, 2 bad config or input, 3 numeric abort, 4 verification
failure.  Output goes to ``--out`` or to a timestamped directory under
``$ANYTIMENET_OUTPUT_ROOT`` (default ``./runs``).
"""
import argparse
import copy
import datetime
import glob
import json
import logging
import os
import sys

import numpy as np

from .arch import MODES, NestedNetwork, StagePlan, independent_plan
from .checkpoint import atomic_write_text, dump_json, load_checkpoint
from .errors import AnytimeError, NumericError
from .optim import COMBINE_MODES, STRATEGIES, OptimizerConfig
from .runtime import (Independent, curves_csv, default_deadlines, oracle_curve, sweep,
                      tradeoff_curve)
from .train import DataConfig, TrainConfig, evaluate, load_data, train
from .verify import FD_THRESHOLD, ORTHO_THRESHOLD, fd_sweep, orthogonality_audit

log = logging.getLogger("anytimenet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4

DEFAULT_CONFIG = {
    "plan": {"num_stages": 4, "mode": "width", "base_width": 4, "base_depth": 2,
             "num_classes": 3, "input_dim": 2},
    "optimizer": {"strategy": "osgd"},
    "data": {"kind": "spiral", "n_train": 3000, "n_val": 1000, "noise": 0.05, "turns": 1.0, "seed": 0},
    "epochs": 200,
    "batch_size": 64,
    "lr_start": 0.1,
    "lr_end": 0.0008,
    "seeds": [0],
}


class UsageError(AnytimeError):
    pass


class VerificationFailed(AnytimeError):
    pass


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# flag dest -> path in the config document
_OVERRIDES = {
    "plan": ("plan", "mode"),
    "stages": ("plan", "num_stages"),
    "width": ("plan", "base_width"),
    "depth": ("plan", "base_depth"),
    "classes": ("plan", "num_classes"),
    "input_dim": ("plan", "input_dim"),
    "optimizer": ("optimizer", "strategy"),
    "priority": ("optimizer", "priority"),
    "loss_weights": ("optimizer", "loss_weights"),
    "norm_const": ("optimizer", "norm_const"),
    "combine": ("optimizer", "combine"),
    "tau": ("optimizer", "tau"),
    "momentum": ("optimizer", "momentum"),
    "data": ("data", "kind"),
    "train_path": ("data", "train"),
    "val_path": ("data", "val"),
    "train_labels": ("data", "train_labels"),
    "val_labels": ("data", "val_labels"),
    "n_train": ("data", "n_train"),
    "n_val": ("data", "n_val"),
    "noise": ("data", "noise"),
    "turns": ("data", "turns"),
    "data_seed": ("data", "seed"),
    "epochs": ("epochs",),
    "batch_size": ("batch_size",),
    "lr_start": ("lr_start",),
    "lr_end": ("lr_end",),
    "seeds": ("seeds",),
}


def _add_config_flags(p):
    g = p.add_argument_group("configuration (each flag overrides the config file)")
    g.add_argument("--config", help="JSON config file")
    g.add_argument("--plan", choices=MODES + ("alternating", "simultaneous", "even", "eann", "cascade"),
                   help="nesting mode")
    g.add_argument("--stages", type=int)
    g.add_argument("--width", type=int, help="base stripe width")
    g.add_argument("--depth", type=int, help="base depth (layers of the smallest stage)")
    g.add_argument("--classes", type=int)
    g.add_argument("--input-dim", type=int)
    g.add_argument("--optimizer", choices=STRATEGIES)
    g.add_argument("--priority", type=_int_list, help="e.g. 2,1,3,4")
    g.add_argument("--loss-weights", type=_float_list)
    g.add_argument("--norm-const", type=float)
    g.add_argument("--combine", choices=COMBINE_MODES)
    g.add_argument("--tau", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--data", choices=("spiral", "csv", "idx"))
    g.add_argument("--train-path")
    g.add_argument("--val-path")
    g.add_argument("--train-labels")
    g.add_argument("--val-labels")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-val", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--turns", type=float)
    g.add_argument("--data-seed", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr-start", type=float)
    g.add_argument("--lr-end", type=float)
    g.add_argument("--seeds", type=_int_list, help="e.g. 0,1,2")


def resolve_config(args):
    """Defaults, then the config file, then command-line flags."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise UsageError(f"{args.config}: top level must be an object")
        for key, val in doc.items():
            if key not in cfg:
                raise UsageError(f"{args.config}: unknown section {key!r}")
            if isinstance(cfg[key], dict):
                if not isinstance(val, dict):
                    raise UsageError(f"{args.config}: section {key!r} must be an object")
                cfg[key].update(val)
            else:
                cfg[key] = val
    for dest, path in _OVERRIDES.items():
        val = getattr(args, dest, None)
        if val is None:
            continue
        node = cfg
        for k in path[:-1]:
            node = node[k]
        node[path[-1]] = val
    cfg["data"]["num_classes"] = cfg["plan"]["num_classes"]
    try:
        return TrainConfig.from_dict(cfg)
    except TypeError as exc:
        raise UsageError(f"bad config field: {exc}") from None


def make_run_dir(args, command):
    if args.out:
        path = args.out
    else:
        root = os.environ.get("ANYTIMENET_OUTPUT_ROOT", "runs")
        stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
        path = os.path.join(root, f"{command}-{stamp}")
        k = 1
        while os.path.exists(path):
            k += 1
            path = os.path.join(root, f"{command}-{stamp}-{k}")
    os.makedirs(path, exist_ok=True)
    print(f"output directory: {os.path.abspath(path)}")
    return path


def _report(path):
    print(f"wrote {os.path.abspath(path)}")


# ---------------------------------------------------------------- commands

def cmd_train(args):
    config = resolve_config(args)
    if args.with_independents:
        # validate the per-stage plans before anything touches disk
        ind_plans = [independent_plan(config.plan, i) for i in range(1, config.plan.num_stages + 1)]
    out = make_run_dir(args, "train")
    print(f"config: {config.plan.mode}, {config.plan.num_stages} stages, "
          f"{config.optimizer.strategy}, seeds {list(config.seeds)}")
    history = train(config, out, parallel=args.parallel)
    for name in ("config.json", "summary.json"):
        _report(os.path.join(out, name))
    for s in config.seeds:
        _report(os.path.join(out, f"seed_{s}"))
    mean = history.summary()["final_val_error_mean"]
    print("final val error (seed mean): " + ", ".join(f"stage {i}: {e:.4f}" for i, e in enumerate(mean, 1)))
    if args.with_independents:
        base = TrainConfig.from_dict(config.to_dict())
        for i, plan in enumerate(ind_plans, start=1):
            sub = TrainConfig(plan, OptimizerConfig("sgd"), base.data, base.epochs, base.batch_size,
                              base.lr_start, base.lr_end, base.seeds)
            path = os.path.join(out, "independents", f"stage_{i}")
            h = train(sub, path, parallel=args.parallel)
            print(f"independent stage {i}: val error {np.mean(h.final_matrix()):.4f}")
            _report(path)
    return EXIT_OK


def _dataset_for(ckpt, split):
    data = ckpt.extra.get("data")
    if not data:
        raise UsageError("checkpoint does not record its dataset")
    train_set, val_set = load_data(DataConfig.from_dict(data))
    return val_set if split == "val" else train_set


def _load(path):
    if not path or not os.path.exists(path):
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _independents(directory, dataset, seed):
    if not os.path.isdir(directory):
        raise UsageError(f"independents directory not found: {directory}")
    paths = sorted(glob.glob(os.path.join(directory, "**", "checkpoint.json"), recursive=True))
    loaded = [(p, load_checkpoint(p)) for p in paths]
    matching = [(p, c) for p, c in loaded if c.extra.get("seed") == seed]
    loaded = matching or loaded
    if not loaded:
        raise UsageError(f"no checkpoints under {directory}")
    return [Independent.from_network(c.net, dataset, os.path.relpath(p, directory)) for p, c in loaded]


def cmd_eval(args):
    ckpt = _load(args.checkpoint)
    ds = _dataset_for(ckpt, args.split)
    out = make_run_dir(args, "eval")
    errs = evaluate(ckpt.net, ds)
    rows = [{"stage": i, "macs": ckpt.net.flops(i), "error": float(e)} for i, e in enumerate(errs, 1)]
    path = os.path.join(out, "eval.json")
    atomic_write_text(path, dump_json({"split": args.split, "stages": rows}))
    for r in rows:
        print(f"stage {r['stage']}: macs {r['macs']}  error {r['error']:.4f}")
    _report(path)
    return EXIT_OK


def cmd_sweep(args):
    ckpt = _load(args.checkpoint)
    baseline = _load(args.baseline).net if args.baseline else None
    ds = _dataset_for(ckpt, args.split)
    inds = _independents(args.independents, ds, ckpt.extra.get("seed")) if args.independents else []
    deadlines = None
    if args.deadlines:
        deadlines = sorted(args.deadlines) + [float("inf")]
    out = make_run_dir(args, "sweep")
    rep = sweep(ckpt.net, inds, ds, deadlines=deadlines, seed=args.seed, baseline=baseline)
    for name, text in (("sweep.csv", rep.to_csv()), ("sweep.json", rep.to_json())):
        atomic_write_text(os.path.join(out, name), text)
        _report(os.path.join(out, name))
    print(f"{len(rep.schemes())} schemes x {len(rep.deadlines())} deadlines")
    return EXIT_OK


def cmd_curves(args):
    ckpt = _load(args.checkpoint)
    ds = _dataset_for(ckpt, args.split)
    curves = {"nested": tradeoff_curve(ckpt.net, ds)}
    if args.baseline:
        curves["baseline-anytime"] = tradeoff_curve(_load(args.baseline).net, ds)
    if args.independents:
        curves["oracle"] = oracle_curve(_independents(args.independents, ds, ckpt.extra.get("seed")))
    out = make_run_dir(args, "curves")
    path = os.path.join(out, "curves.csv")
    atomic_write_text(path, curves_csv(curves))
    _report(path)
    return EXIT_OK


def cmd_gradcheck(args):
    out = make_run_dir(args, "gradcheck")
    fd = fd_sweep(args.seed, args.archs_per_mode, MODES, args.max_stages, flip_sign=args.inject_wrong_sign)
    print(f"finite differences: max relative error {fd.max_error:.3e} "
          f"over {sum(len(v) for v in fd.per_mode.values())} networks (threshold {args.fd_threshold:g})")
    plan = StagePlan(args.stages, "width", 2, 1, 3, 2)
    net = NestedNetwork(plan, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    x = rng.normal(size=(256, 2))
    y = rng.integers(0, 3, 256)
    ortho = orthogonality_audit(net, x, y, steps=args.steps, seed=args.seed)
    if ortho.pairs == 0:
        print("orthogonality: no pairs")
    else:
        print(f"orthogonality: max |cos| {ortho.max_cosine:.3e} over {ortho.pairs} pairs "
              f"in {ortho.steps} steps (threshold {args.ortho_threshold:g}); "
              f"first priority unchanged: {ortho.first_unchanged}")
    failed = fd.max_error > args.fd_threshold or not ortho.first_unchanged or (
        ortho.pairs and ortho.max_cosine > args.ortho_threshold)
    path = os.path.join(out, "gradcheck.json")
    atomic_write_text(path, dump_json({"finite_differences": fd.to_dict(),
                                       "orthogonality": ortho.to_dict(),
                                       "passed": not failed}))
    _report(path)
    if failed:
        raise VerificationFailed("gradient check thresholds exceeded")
    return EXIT_OK


def cmd_inspect(args):
    if args.checkpoint:
        net = _load(args.checkpoint).net
    else:
        net = NestedNetwork(resolve_config(args).plan, seed=0)
    out = make_run_dir(args, "inspect")
    info = {
        "plan": net.plan.to_dict(),
        "stripe_sizes": list(net.stripe_sizes),
        "num_params": net.num_params,
        "pruned_edges": net.pruned_edges(),
        "stages": net.describe(),
    }
    for r in info["stages"]:
        print(f"stage {r['stage']}: width {r['width']}  depth {r['depth']}  "
              f"params {r['params']}  macs {r['macs']}  layers {r['layers']}")
    path = os.path.join(out, "inspect.json")
    atomic_write_text(path, dump_json(info))
    _report(path)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="anytimenet", description="Nested anytime networks and multitask optimizers.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def out_flag(sp):
        sp.add_argument("--out", help="output directory (default: timestamped under $ANYTIMENET_OUTPUT_ROOT)")

    t = sub.add_parser("train", help="train a nested network for one or more seeds")
    _add_config_flags(t)
    out_flag(t)
    t.add_argument("--parallel", action="store_true", help="run seeds in separate processes")
    t.add_argument("--with-independents", action="store_true",
                   help="also train one plain network per stage (for oracle baselines)")
    t.set_defaults(func=cmd_train)

    for name, func, hlp in (("eval", cmd_eval, "per-stage error of a checkpoint"),
                            ("sweep", cmd_sweep, "deadline simulation"),
                            ("curves", cmd_curves, "accuracy/MAC trade-off points")):
        sp = sub.add_parser(name, help=hlp)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--split", choices=("val", "train"), default="val")
        out_flag(sp)
        if name != "eval":
            sp.add_argument("--baseline", help="checkpoint of a baseline anytime network")
            sp.add_argument("--independents", help="directory of single-stage checkpoints")
        if name == "sweep":
            sp.add_argument("--seed", type=int, default=0, help="seed for random-guess fallbacks")
            sp.add_argument("--deadlines", type=_float_list, help="MAC budgets (unbounded is always added)")
        sp.set_defaults(func=func)

    g = sub.add_parser("gradcheck", help="finite-difference and orthogonality self-check")
    out_flag(g)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--archs-per-mode", type=int, default=10)
    g.add_argument("--max-stages", type=int, default=4)
    g.add_argument("--stages", type=int, default=4, help="stages of the orthogonality-audit network")
    g.add_argument("--steps", type=int, default=100, help="OSGD steps audited")
    g.add_argument("--fd-threshold", type=float, default=FD_THRESHOLD)
    g.add_argument("--ortho-threshold", type=float, default=ORTHO_THRESHOLD)
    g.add_argument("--inject-wrong-sign", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", help="describe a plan or checkpoint")
    _add_config_flags(i)
    i.add_argument("--checkpoint")
    out_flag(i)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VerificationFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AnytimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
