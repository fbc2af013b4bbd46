"""Command-line entry point.

Subcommands: dataset, train, attack, sweep, report. Exit codes: 0 ok,
2 configuration error, 3 data-format error, 4 runtime/numeric error.
"""

import argparse
import json
import sys

from . import harness
from .attacks import PRESETS
from .errors import ConfigError, DataFormatError, TrainingError


def _add_attack_flags(p):
    p.add_argument("--attack", choices=PRESETS, help="attack preset")
    p.add_argument("--source", help="source model id, or 'ensemble'")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--mu", type=float, dest="momentum")
    p.add_argument("--samples", type=int, dest="aggregate",
                   help="noise draws N (the engine samples N+1)")
    p.add_argument("--sigma", type=float)
    p.add_argument("--noise", choices=("gaussian", "uniform"),
                   dest="noise_kind")
    p.add_argument("--seed", type=int)
    p.add_argument("--dim-prob", type=float, dest="dim_prob")
    p.add_argument("--dim-min-scale", type=float, dest="dim_min_scale")
    p.add_argument("--kernel-radius", type=int, dest="kernel_radius")
    p.add_argument("--workers", type=int, default=None)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="daattack",
        description="transferable adversarial attacks with aggregated "
                    "sign-gradient directions, at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="generate or validate dataset files")
    ds_sub = ds.add_subparsers(dest="dataset_command", required=True)
    gen = ds_sub.add_parser("gen", help="write a synthetic dataset")
    gen.add_argument("kind", choices=("blobs", "rings"))
    gen.add_argument("--n", type=int, default=600)
    gen.add_argument("--hw", type=int, default=16)
    gen.add_argument("--classes", type=int, default=None)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    imp = ds_sub.add_parser("import", help="validate an existing DAKD file")
    imp.add_argument("path")

    for name in ("train", "attack", "sweep", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment JSON")
        if name == "attack":
            _add_attack_flags(p)
        elif name == "sweep":
            p.add_argument("--workers", type=int, default=None)
    return parser


_OVERRIDE_FLAGS = (
    "epsilon", "iters", "alpha", "momentum", "aggregate", "sigma",
    "noise_kind", "seed", "dim_prob", "dim_min_scale", "kernel_radius",
)


def _dispatch(args):
    if args.command == "dataset":
        if args.dataset_command == "gen":
            classes = args.classes
            if classes is None:
                classes = 3 if args.kind == "rings" else 2
            out = harness.cmd_dataset_gen(
                args.kind, args.n, args.hw, classes, args.seed, args.out)
            print(out)
        else:
            print(json.dumps(harness.cmd_dataset_import(args.path),
                             sort_keys=True))
        return 0

    cfg = harness.load_config(args.config)
    if args.command == "train":
        manifest = harness.cmd_train(cfg)
        for mid, entry in manifest["models"].items():
            extra = (f" pgd_acc={entry['pgd_acc']:.4f}"
                     if "pgd_acc" in entry else "")
            print(f"{mid}: clean_acc={entry['clean_acc']:.4f}{extra}")
        print(f"run dir: {cfg.run_dir}")
    elif args.command == "attack":
        overrides = {k: getattr(args, k) for k in _OVERRIDE_FLAGS
                     if getattr(args, k) is not None}
        written = harness.cmd_attack(cfg, preset=args.attack,
                                     source=args.source, overrides=overrides,
                                     workers=args.workers)
        for path in written:
            print(path)
    elif args.command == "sweep":
        for path in harness.cmd_sweep(cfg, workers=args.workers):
            print(path)
    else:
        out = harness.cmd_report(cfg)
        print(f"{out['csv']}\n{out['json']} ({out['rows']} rows)")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataFormatError as e:
        print(f"data format error: {e}", file=sys.stderr)
        return 3
    except (TrainingError, ArithmeticError, RuntimeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
