"""``vireid`` command-line entry point.

Subcommands: train, eval, ablate, sweep, export-embeddings, grad-check.
Every run writes under ``--out``; the exit code is 0 only when every cell
finished and the post-run invariants hold.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..evaluation import run_protocol
from ..training import load_state
from . import gradsuite
from .config import DataConfig, resolve
from .experiments import ExperimentSpec, check_table, export_embeddings, run_ablation_grid, run_experiment, run_sweep


def _seed_list(text):
    return [int(s) for s in str(text).split(",") if s.strip()]


def _value_list(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vireid", description="Cross-modality re-identification experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds=True):
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        if seeds:
            p.add_argument("--seed", type=_seed_list, help="seed or comma-separated seed list")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("train", help="train and evaluate the configured model once per seed")
    common(p)
    p.add_argument("--jobs", type=int)
    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p, seeds=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dump-rankings", action="store_true", help="also write rankings.jsonl")
    p = sub.add_parser("ablate", help="five-row loss ablation grid")
    common(p)
    p.add_argument("--jobs", type=int, help="parallel worker processes")
    p = sub.add_parser("sweep", help="one-axis (or product) sweep")
    common(p)
    p.add_argument("--axis", required=True, help="stride, lambda, loss_set, phi_mode, distance_metric; "
                                                 "comma-join two axes for their product")
    p.add_argument("--values", type=_value_list, help="comma-separated values (product axes: a:b)")
    p.add_argument("--jobs", type=int)
    p = sub.add_parser("export-embeddings", help="dump matching features of a split")
    common(p, seeds=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p = sub.add_parser("grad-check", help="finite-difference verification of ops and losses")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _resolve(args):
    overrides = list(args.set)
    if getattr(args, "seed", None):
        overrides.append((("experiment", "seeds"), args.seed))
    if getattr(args, "jobs", None):
        overrides.append((("experiment", "jobs"), args.jobs))
    return resolve(args.config, overrides)


def cmd_train(args) -> int:
    cfg = _resolve(args)
    spec = ExperimentSpec("train", cfg, seeds=cfg.experiment["seeds"])
    table = run_experiment(spec, args.out, int(cfg.experiment["jobs"]))
    return _finish(table, args)


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    state = load_state(args.checkpoint)
    _, test = DataConfig(**{**cfg.to_dict()["data"], "img_h": state.config.img_h,
                            "img_w": state.config.img_w}).build()
    dump = [] if args.dump_rankings else None
    report = run_protocol(state.model, test, cfg.eval, checkpoint=str(args.checkpoint), dump_rankings=dump)
    cfg.echo(args.out)
    report.write(args.out, stem="results")
    if dump is not None:
        with open(args.out / "rankings.jsonl", "w") as fh:
            for rec in dump:
                fh.write(json.dumps(rec) + "\n")
    print(report.summary(), end="")
    return 0


def _finish(table, args) -> int:
    print((args.out / "report.txt").read_text(), end="")
    return 0 if table.ok and not check_table(table) else 1


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    table = run_ablation_grid(cfg, out_dir=args.out, jobs=int(cfg.experiment["jobs"]))
    return _finish(table, args)


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    table = run_sweep(cfg, args.axis, args.values, out_dir=args.out, jobs=int(cfg.experiment["jobs"]))
    return _finish(table, args)


def cmd_export(args) -> int:
    cfg = _resolve(args)
    state = load_state(args.checkpoint)
    data = DataConfig(**{**cfg.to_dict()["data"], "img_h": state.config.img_h, "img_w": state.config.img_w})
    train_set, test_set = data.build()
    dataset = test_set if args.split == "test" else train_set
    cfg.echo(args.out)
    export_embeddings(args.checkpoint, dataset, args.split, args.out)
    print(f"wrote {len(dataset)} embeddings to {args.out}")
    return 0


def cmd_grad_check(args) -> int:
    results = gradsuite.run_suite(instances=args.instances, seed=args.seed)
    lines = [r.line() for r in results]
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "export-embeddings": cmd_export,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
