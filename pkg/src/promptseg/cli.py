"""Command-line interface.

Subcommands: gen-data, pretrain, train, adapt, eval, report.
Exit codes: 0 success, 1 config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .data import DatasetSpec, default_dataset_spec, gen_dataset
from .runner import RunError, report, run

MODE_BY_COMMAND = {
    "pretrain": ("pretrain",),
    "train": ("train_baseline", "train_dg", "oracle_train"),
    "adapt": ("adapt_ttda",),
    "eval": ("eval",),
}


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--out", default=None, help="run directory (default: config out_dir)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--resume", action="store_true",
                   help="allow an existing run dir with a matching config digest")
    p.add_argument("--force", action="store_true",
                   help="allow writing into an existing non-empty run dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptseg")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the procedural benchmark")
    g.add_argument("--out", required=True)
    g.add_argument("--spec", default=None, help="DatasetSpec JSON (default benchmark if omitted)")
    g.add_argument("--force", action="store_true")

    for cmd in MODE_BY_COMMAND:
        _add_run_args(sub.add_parser(cmd, help=f"run a {cmd} config"))

    r = sub.add_parser("report", help="merge run metrics into an ablation table")
    r.add_argument("run_dirs", nargs="+")
    r.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            if args.spec:
                with open(args.spec) as f:
                    spec = DatasetSpec.from_json(json.load(f))
            else:
                spec = default_dataset_spec()
            out = gen_dataset(spec, args.out, force=args.force)
            print(f"dataset written to {out}")
            return 0

        if args.command == "report":
            summary = report(args.run_dirs, args.out)
            for setting, s in summary.items():
                print(f"{setting}: {s['mean']:.2f} ± {s['std']:.2f} mIoU ({s['n']} seeds)")
            print(f"report written to {args.out}")
            return 0

        cfg = load_config(args.config)
        if cfg["mode"] not in MODE_BY_COMMAND[args.command]:
            raise ConfigError([
                f"mode: config mode {cfg['mode']!r} cannot run under "
                f"'{args.command}' (expects one of {MODE_BY_COMMAND[args.command]})"
            ])
        if args.seed is not None:
            cfg["seed"] = args.seed
        out_dir = args.out if args.out is not None else cfg.get("out_dir")
        if out_dir is None:
            raise ConfigError(["out_dir: set it in the config or pass --out"])
        result = run(cfg, out_dir, resume=args.resume, force=args.force)
        print(f"run complete: {result.out_dir}")
        for k, v in result.artifacts.items():
            if not isinstance(v, (dict, list)):
                print(f"  {k}: {v}")
        return 0
    except (ConfigError, FileNotFoundError, FileExistsError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
