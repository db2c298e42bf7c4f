"""Command-line entry point: ``shape-adaptor <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.

A config file is JSON with three optional sections::

    {
      "network": {"preset": "conv", "channels": [8, 16, 16, 32], "classes": 3,
                  "input_dim": 32, "mode": "shape_adaptor", "pools": [],
                  "r_min": 0.5, "r_max": 1.0, "dim_rule": "local"},
      "dataset": {"kind": "synthetic", "classes": 3, "per_class": 100, "dim": 32,
                  "noise": 0.1, "seed": 0},
      "train":   {"epochs": 10, "batch_size": 32, "n_adaptors": 2, ...}
    }

``network`` may instead carry a full serialised spec under ``"spec"``.
A run's ``manifest.json`` is also accepted as a config, which re-runs it.
"""
import argparse
import copy
import glob
import json
import logging
import math
import os
import sys

from . import __version__, calculus
from .calculus import SearchSpace, estimate_macs
from .data import load_cifar10_binary, synth_dataset
from .network import (NetworkSpec, SpecError, autosc_wrap, build_network, conv_spec, residual_spec,
                      static_plan, vgg16_spec, with_uniform_adaptors)
from .report import (SEARCH_COLUMNS, export_shape_svg, export_trace_csv, export_trace_json,
                     random_shape_search, read_trace)
from .trainer import TrainConfig, TrainingDiverged, evaluate, save_checkpoint, train

logger = logging.getLogger("shape_adaptor")

RUN_LAYOUT = {
    "manifest": "manifest.json",
    "trace": "trace.jsonl",
    "checkpoint": "checkpoint.npz",
    "metrics": "metrics.json",
}
DEFAULT_CONFIG = {
    "network": {"preset": "conv", "channels": [8, 16, 16, 32], "classes": 3},
    "dataset": {"kind": "synthetic", "classes": 3, "per_class": 100, "dim": 32},
    "train": {"epochs": 10, "batch_size": 32, "n_adaptors": 2, "d_out": 16},
}
FACTOR_DISTRIBUTION = "uniform on [r_min, r_max) per resizing layer"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling

def load_config(path):
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(cfg, dict) and "config" in cfg and "spec" in cfg:
        cfg = cfg["config"]  # a run manifest
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = sorted(set(cfg) - {"network", "dataset", "train"})
    if unknown:
        raise ConfigError(f"unknown config sections {unknown}")
    out = copy.deepcopy(DEFAULT_CONFIG)
    out.update(cfg)
    return out


def network_from_config(section, classes=None):
    section = dict(section)
    if "spec" in section:
        return NetworkSpec.from_dict(section["spec"]).validate()
    preset = section.pop("preset", "conv")
    space = SearchSpace(section.pop("r_min", 0.5), section.pop("r_max", 1.0),
                        section.pop("dim_rule", "local"))
    classes = section.pop("classes", classes)
    if classes is None:
        raise ConfigError("network.classes is required")
    kwargs = dict(input_dim=section.pop("input_dim", 32), mode=section.pop("mode", "shape_adaptor"))
    extra = {"search_space": space,
             "width_multiplier": section.pop("width_multiplier", 1.0)}
    if preset == "vgg16":
        spec = vgg16_spec(classes, n_pools=section.pop("n_pools", 4), **kwargs, **extra)
    elif preset in ("conv", "residual"):
        if "channels" not in section:
            raise ConfigError(f"network preset {preset!r} needs 'channels'")
        channels = section.pop("channels")
        pools = tuple(section.pop("pools", ()))
        build = conv_spec if preset == "conv" else residual_spec
        spec = build(channels, classes, pools=pools, **kwargs, **extra)
    else:
        raise ConfigError(f"unknown network preset {preset!r}")
    if section:
        raise ConfigError(f"unknown network keys {sorted(section)}")
    return spec.validate()


def dataset_from_config(section):
    section = dict(section)
    kind = section.pop("kind", "synthetic")
    if kind == "synthetic":
        allowed = {"classes", "per_class", "dim", "noise", "seed", "channels"}
        unknown = sorted(set(section) - allowed)
        if unknown:
            raise ConfigError(f"unknown dataset keys {unknown}")
        train_set = synth_dataset(**section)
        test_args = dict(section, seed=section.get("seed", 0) + 10_000, split="test")
        return train_set, synth_dataset(**test_args)
    if kind == "cifar10":
        root = section.get("dir") or os.environ.get("CIFAR10_DIR")
        if not root:
            raise ConfigError("cifar10 dataset needs 'dir' (or CIFAR10_DIR)")
        train_files = sorted(glob.glob(os.path.join(root, "data_batch_*.bin")))
        test_files = glob.glob(os.path.join(root, "test_batch.bin"))
        if not train_files:
            raise ConfigError(f"no data_batch_*.bin files under {root}")
        train_set = load_cifar10_binary(train_files, "train")
        test_set = load_cifar10_binary(test_files, "test") if test_files else None
        if section.get("subset"):
            train_set = train_set.subset(range(min(section["subset"], len(train_set))))
        return train_set, test_set
    raise ConfigError(f"unknown dataset kind {kind!r}")


def train_config_from(section, seed=None):
    try:
        cfg = TrainConfig.from_dict(section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train section: {exc}") from exc
    if seed is not None:
        cfg.seed = seed
    return cfg


def resolve(args):
    """Config sections plus built objects; any problem is a ConfigError."""
    cfg = load_config(args.config)
    try:
        tcfg = train_config_from(cfg["train"], args.seed)
        if getattr(args, "epochs", None) is not None:
            tcfg.epochs = args.epochs
        if getattr(args, "max_iterations", None) is not None:
            tcfg.max_iterations = args.max_iterations
        train_set, test_set = dataset_from_config(cfg["dataset"])
        spec = network_from_config(cfg["network"], classes=train_set.class_count)
    except ConfigError:
        raise
    except (SpecError, ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    if spec.cells[-1].channels_out != train_set.class_count:
        raise ConfigError(f"network has {spec.cells[-1].channels_out} classes, "
                          f"dataset has {train_set.class_count}")
    cfg["train"] = tcfg.to_dict()
    return cfg, spec, tcfg, train_set, test_set


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest(cfg, spec, tcfg, command, extra=None):
    out = {
        "command": command,
        "version": __version__,
        "seed": tcfg.seed,
        "config": cfg,
        "spec": spec.to_dict(),
        "layout": RUN_LAYOUT,
    }
    out.update(extra or {})
    return out


# ---------------------------------------------------------------------------
# commands

def _run_training(args, command):
    cfg, spec, tcfg, train_set, test_set = resolve(args)
    if command == "compress":
        if spec.mode != "human_fixed":
            raise ConfigError("compress expects a human_fixed network (mode and pools)")
        human_spec = spec
        spec = autosc_wrap(human_spec)
    os.makedirs(args.out, exist_ok=True)
    paths = {k: os.path.join(args.out, v) for k, v in RUN_LAYOUT.items()}
    _write_json(paths["manifest"], _manifest(cfg, spec, tcfg, command))

    model = build_network(spec, tcfg, seed=tcfg.seed)
    initial_plan = model.plan()
    with open(paths["trace"], "w", encoding="utf-8") as sink:
        _, trace = train(model, train_set, tcfg, sink=sink)
    iterations = trace.records[-1].iteration if len(trace) else 0
    save_checkpoint(paths["checkpoint"], model, tcfg, iteration=iterations,
                    groups=model.optim_groups)
    final_plan = model.plan()
    metrics = {
        "train_accuracy": evaluate(model, train_set),
        "test_accuracy": evaluate(model, test_set) if test_set is not None else None,
        "iterations": iterations,
        "trace_records": len(trace),
        "initial_dims": initial_plan.dims,
        "final_dims": final_plan.dims,
        "factors": [a.factor for a in model.alpha_params],
        "macs": estimate_macs(model.spec, final_plan),
    }
    if command == "compress":
        human_macs = estimate_macs(human_spec, static_plan(human_spec, []))
        metrics["human_macs"] = human_macs
        metrics["macs_ratio"] = metrics["macs"] / human_macs
    _write_json(paths["metrics"], metrics)
    print(f"run directory: {args.out}")
    for key in ("train_accuracy", "test_accuracy", "iterations", "final_dims", "macs"):
        print(f"{key}={metrics[key]}")
    return 0


def cmd_train(args):
    return _run_training(args, "train")


def cmd_compress(args):
    return _run_training(args, "compress")


def plan_report(din, dlast, dout, rmin, rmax=1.0, n=None, rule="local", network="vgg16",
                classes=10):
    """Numbers shown by ``plan``; every value comes straight from the
    shape-calculus functions."""
    space = SearchSpace(rmin, rmax, rule)
    n = calculus.module_count(din, dlast, rmin) if n is None else n
    raw = calculus.init_alpha(din, dout, dlast, n, space)
    alpha = 1.0 / (1.0 + math.exp(-raw))
    s = calculus.s_linear(alpha, space)
    report = {
        "D_in": din, "D_last": dlast, "D_out": dout, "r_min": rmin, "r_max": rmax,
        "dim_rule": rule, "N": n, "init_raw_alpha": raw, "init_alpha": alpha, "s": s,
        "final_dim_continuous": din * s ** n,
    }
    rule_fn = calculus.dims_local if rule == "local" else calculus.dims_global
    report["dims"] = rule_fn(din, [s] * n).dims
    if network == "vgg16":
        spec = with_uniform_adaptors(vgg16_spec(classes, din, search_space=space), n)
        plan = static_plan(spec, s)
        report["network"] = network
        report["cell_dims"] = plan.cell_dims[:-1]
        report["macs"] = estimate_macs(spec, plan)
    return report


def cmd_plan(args):
    try:
        report = plan_report(args.din, args.dlast, args.dout, args.rmin, args.rmax, args.n,
                             args.rule, args.network, args.classes)
    except (ValueError, SpecError) as exc:
        raise ConfigError(str(exc)) from exc
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
        return 0
    for key in ("D_in", "D_last", "D_out", "r_min", "r_max", "dim_rule", "N"):
        print(f"{key}={report[key]}")
    print(f"init_raw_alpha={report['init_raw_alpha']:.6f}")
    print(f"s={report['s']:.4f}")
    print(f"final_dim_continuous={report['final_dim_continuous']:.4f}")
    print(f"dims={report['dims']}")
    if "macs" in report:
        print(f"cell_dims={report['cell_dims']}")
        print(f"macs={report['macs']}")
    return 0


def cmd_search(args):
    cfg, spec, tcfg, train_set, test_set = resolve(args)
    if not any(c.resizes for c in spec.cells):
        raise ConfigError("search needs a network with resizing cells (pools or adaptors)")
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "manifest.json"),
                _manifest(cfg, spec, tcfg, "search",
                          {"trials": args.trials, "factor_distribution": FACTOR_DISTRIBUTION,
                           "layout": {"manifest": "manifest.json", "results": "results.csv"}}))
    rows = random_shape_search(spec, args.trials, tcfg, seed=tcfg.seed, dataset=train_set,
                               csv_path=os.path.join(args.out, "results.csv"),
                               eval_dataset=test_set)
    print(",".join(SEARCH_COLUMNS))
    for row in rows:
        print(",".join(str(row[c]) for c in SEARCH_COLUMNS))
    return 0


def _load_renderable(path):
    if os.path.isdir(path):
        path = os.path.join(path, RUN_LAYOUT["trace"])
    if path.endswith(".jsonl"):
        trace = read_trace(path)
        if not len(trace):
            raise ConfigError(f"{path}: empty trace, nothing to render")
        return trace
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if "cell_dims" in obj or "dims" in obj:
        return obj
    raise ConfigError(f"{path}: expected a trace (.jsonl) or a plan JSON with 'dims'")


def cmd_render(args):
    try:
        source = _load_renderable(args.input)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {args.input}: {exc}") from exc
    export_shape_svg(source, args.out, title=args.title)
    print(f"wrote {args.out}")
    return 0


def cmd_export(args):
    try:
        trace = read_trace(args.input)
    except OSError as exc:
        raise ConfigError(f"cannot read {args.input}: {exc}") from exc
    if args.format == "csv":
        export_trace_csv(trace, args.out)
    else:
        export_trace_json(trace, args.out)
    print(f"wrote {len(trace)} records to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (or a run manifest)")
    common.add_argument("--seed", type=int, help="override train.seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="shape-adaptor",
                                     description="Learnable network shapes via shape adaptors.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    for name, fn, text in (("train", cmd_train, "train a network with shape adaptors"),
                           ("compress", cmd_compress, "shrink a human design (AutoSC)")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--out", default="run", help="run directory")
        p.add_argument("--epochs", type=int, help="override train.epochs")
        p.add_argument("--max-iterations", type=int, dest="max_iterations")
        p.set_defaults(func=fn)

    p = sub.add_parser("plan", parents=[common], help="static shape calculus report")
    p.add_argument("--din", type=int, default=32)
    p.add_argument("--dlast", type=int, default=2)
    p.add_argument("--dout", type=int, default=8)
    p.add_argument("--rmin", type=float, default=0.5)
    p.add_argument("--rmax", type=float, default=1.0)
    p.add_argument("--n", type=int, help="number of adaptors (default: heuristic)")
    p.add_argument("--rule", choices=("local", "global"), default="local")
    p.add_argument("--network", choices=("vgg16", "none"), default="vgg16",
                   help="network used for the MACs estimate")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("search", parents=[common], help="random-shape search")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--out", default="search", help="output directory")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--max-iterations", type=int, dest="max_iterations")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("render", parents=[common], help="SVG silhouette of a plan or trace")
    p.add_argument("input", help="trace.jsonl, plan JSON, or run directory")
    p.add_argument("--out", required=True, help="SVG path")
    p.add_argument("--title")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("export", parents=[common], help="convert a trace to JSONL or CSV")
    p.add_argument("input", help="trace.jsonl")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: usage errors exit 2, --help/--version exit 0
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"shape-adaptor: config error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, OSError, RuntimeError, ValueError) as exc:
        print(f"shape-adaptor: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
