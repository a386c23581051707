"""Command line entry point: ``dformer <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import _triple, load_config
from .errors import DFormerError


def _cmd_analyze(args) -> int:
    from .analyzer import analyze

    run = load_config(args.config)
    report = analyze(run.model, args.input)
    if args.format in ("text", "both"):
        print(report.format_table())
    if args.format in ("jsonl", "both"):
        for rec in report.records():
            print(json.dumps(rec))
        print(json.dumps({"component": "total", "params": report.total_params,
                          "flops": report.total_flops}))
    return 0


def _cmd_gen(args) -> int:
    from .data import synth_dataset, write_dataset

    samples = synth_dataset(args.seed, args.count, _triple(args.dims), args.kind,
                            args.classes, args.noise)
    paths = write_dataset(args.out, samples)
    print(f"wrote {len(paths)} volumes to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .data import read_dataset
    from .train import train

    run = load_config(args.config)
    samples = read_dataset(args.data) if args.data else None
    result = train(run, samples, args.out)
    print(f"final loss {result.log[-1].loss:.6f}; best held-out DSC {result.best_dsc:.4f} "
          f"at step {result.best_step}; checkpoints in {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import read_dataset
    from .train import evaluate

    model, _ = load_checkpoint(args.checkpoint)
    report = evaluate(model, read_dataset(args.data))
    lines = report.lines()
    if args.report:
        Path(args.report).write_text("\n".join(lines) + "\n")
    else:
        print("\n".join(lines))
    print(report.format_table())
    return 0


def _cmd_report(args) -> int:
    import numpy as np

    recs = [json.loads(x) for x in Path(args.input).read_text().splitlines() if x.strip()]
    classes = sorted({r["class"] for r in recs})
    per_class = {c: float(np.mean([r["dsc"] for r in recs if r["class"] == c])) for c in classes}
    print(f"{'class':>5}  {'cases':>5}  {'mean DSC':>9}")
    for c in classes:
        print(f"{c:>5}  {sum(r['class'] == c for r in recs):>5}  {per_class[c]:>9.4f}")
    print(f"{'mean':>5}  {'':>5}  {float(np.mean(list(per_class.values()))):>9.4f}")
    return 0


def _cmd_bench(args) -> int:
    from .analyzer import bench_attention

    grids = [_triple(g) for g in args.grids.split(",")]
    rows = bench_attention(grids, _triple(args.unit), args.channels, args.repeats, args.heads)
    print(f"{'grid':>10} {'patches':>8} {'MSA':>14} {'LS-MSA':>14} {'measured':>14} {'median s':>10}")
    for r in rows:
        print(f"{'x'.join(map(str, r.grid)):>10} {r.patches:>8} {r.msa:>14} {r.ls_msa:>14} "
              f"{r.measured:>14} {r.seconds:>10.5f}")
    if args.jsonl:
        for r in rows:
            print(json.dumps(r.as_dict()))
    return 0


def _cmd_selftest(args) -> int:
    from .selftest import run_all

    return 0 if run_all() else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dformer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="parameter and multiply accounting")
    p.add_argument("--config", required=True)
    p.add_argument("--input", help="DxHxW input size (defaults to the config's)")
    p.add_argument("--format", choices=("text", "jsonl", "both"), default="both")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--dims", required=True, help="DxHxW")
    p.add_argument("--kind", choices=("spheres", "boxes", "nested"), default="spheres")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="directory of .dfvol files (synthesised from the config if omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="per-class DSC of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", help="write per-case records here instead of stdout")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="summarise per-case DSC records")
    p.add_argument("--input", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("bench", help="attention cost scaling table")
    p.add_argument("--grids", required=True, help="comma separated DxHxW grids")
    p.add_argument("--unit", required=True, help="UxUxU")
    p.add_argument("--channels", type=int, required=True)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--jsonl", action="store_true")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DFormerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
