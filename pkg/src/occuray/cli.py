"""occuray: occlusion annotation, splitting and evaluation for COCO-style datasets.

Every subcommand prints a human readable summary (or JSON with ``--json``) and
can write its JSON report with ``--report PATH``. Option values come from, in
order of precedence: command-line flags, the ``[<subcommand>]`` or
``[occuray]`` section of an INI file given by ``--config``, built-in defaults.

Exit codes: 0 success, 1 invalid data, 2 usage error.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__

log = logging.getLogger("occuray")

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False)


def _emit(args, report: dict, text: str) -> None:
    if args.report:
        Path(args.report).write_text(_dump(report) + "\n", encoding="utf-8")
    print(_dump(report) if args.json else text)


def _proportions(s: str) -> tuple[float, float, float]:
    parts = [float(p) for p in s.replace(":", ",").split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three fractions train,val,occ")
    return tuple(parts)


def _existing(s: str) -> str:
    if not os.path.exists(s):
        raise argparse.ArgumentTypeError(f"no such file: {s}")
    return s


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    from .coco import parse_dataset, validate_dataset

    ds = parse_dataset(args.input)
    violations = validate_dataset(ds, check_area=not args.skip_area)
    errors = [v for v in violations if v.severity == "error"]
    failed = bool(errors) or (args.strict and bool(violations))
    report = {
        "valid": not failed,
        "errors": len(errors),
        "warnings": len(violations) - len(errors),
        "violations": [
            {"record": v.record, "id": v.record_id, "rule": v.rule, "severity": v.severity, "message": v.message}
            for v in violations
        ],
    }
    lines = [str(v) for v in violations]
    lines.append(f"{'INVALID' if failed else 'OK'}: {len(errors)} error(s), {report['warnings']} warning(s)")
    _emit(args, report, "\n".join(lines))
    return EXIT_INVALID if failed else EXIT_OK


def cmd_annotate(args) -> int:
    from .annotate import AnnotatorConfig, annotate_dataset, compute_statistics, format_statistics
    from .coco import parse_dataset, write_dataset

    cfg = AnnotatorConfig(args.threshold, args.clip, args.min_area)
    ds = parse_dataset(args.input)
    out = annotate_dataset(ds, cfg, jobs=args.jobs)
    write_dataset(out, args.output)
    stats = compute_statistics(out)
    report = {
        "output": os.path.basename(args.output),
        "config": {"coverage_threshold": cfg.coverage_threshold, "clip_mode": cfg.clip_mode, "min_occlusion_area": cfg.min_occlusion_area},
        "stats": stats.to_dict(),
    }
    _emit(args, report, format_statistics(stats, Path(args.output).stem))
    return EXIT_OK


def cmd_stats(args) -> int:
    from .annotate import compute_statistics, format_statistics
    from .coco import parse_dataset

    stats = compute_statistics(parse_dataset(args.input))
    _emit(args, stats.to_dict(), format_statistics(stats, args.title or Path(args.input).stem))
    return EXIT_OK


def cmd_split(args) -> int:
    from .coco import parse_dataset, write_dataset
    from .split import SplitConfig, ablation_split, subset_dataset

    ds = parse_dataset(args.input)
    if ds.occlusion_meta is None and not any(a.occlusion for a in ds.annotations):
        log.warning("%s carries no occlusion annotations; every image counts as non-occluded", args.input)
    result = ablation_split(ds, SplitConfig(tuple(args.proportions), args.seed))
    if args.output:
        Path(args.output).write_text(result.to_json() + "\n", encoding="utf-8")
    if args.subset_dir:
        d = Path(args.subset_dir)
        d.mkdir(parents=True, exist_ok=True)
        for name, ids in result.subsets().items():
            write_dataset(subset_dataset(ds, ids), d / f"{name}.json")
    for w in result.warnings:
        log.warning(w)
    sizes = {k: len(v) for k, v in result.subsets().items()}
    text = "\n".join([f"{k:<6}{n:>8}" for k, n in sizes.items()] + [f"warning: {w}" for w in result.warnings])
    report = {**result.to_dict(), "sizes": sizes}
    _emit(args, report, text)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .coco import parse_dataset
    from .evaluation import evaluate, format_report, load_detections

    ds = parse_dataset(args.gt)
    dets = load_detections(json.loads(Path(args.dets).read_text(encoding="utf-8")))
    split = None
    if args.split:
        manifest = json.loads(Path(args.split).read_text(encoding="utf-8"))
        split = {k: v for k, v in manifest.items() if k != "warnings" and isinstance(v, list)}
    kinds = {"bbox": ("bbox",), "mask": ("mask",), "both": ("bbox", "mask")}[args.kind]
    report = evaluate(ds, dets, split=split, kinds=kinds, max_dets=args.max_dets, jobs=args.jobs)
    _emit(args, report.to_dict(), format_report(report))
    return EXIT_OK


def cmd_loss_check(args) -> int:
    from .losses import run_loss_cases

    cases = json.loads(Path(args.input).read_text(encoding="utf-8"))
    if isinstance(cases, dict):
        cases = cases.get("cases", [])
    rows = run_loss_cases(cases, seed=args.seed, epsilon=args.epsilon)
    checked = [r["grad_check"] for r in rows if r["grad_check"] is not None]
    report = {"cases": rows, "max_grad_check": max(checked) if checked else None}
    lines = [f"{'case':>4}  {'bce':>12}  {'seg':>12}  {'grad_err':>10}"]
    for r in rows:
        seg = f"{r['seg']:12.6f}" if "seg" in r else f"{'-':>12}"
        ge = f"{r['grad_check']:10.2e}" if r["grad_check"] is not None else f"{'skipped':>10}"
        lines.append(f"{r['index']:>4}  {r['bce']:12.6f}  {seg}  {ge}")
    _emit(args, report, "\n".join(lines))
    return EXIT_OK


def cmd_decoder_demo(args) -> int:
    from .bilayer import demo

    report = demo(width=args.width, grid_size=args.grid, prompts=args.prompts, seed=args.seed, std=args.init_std)
    s, g = report["shapes"], report["guidance"]
    lines = [f"{k:<16} {v}" for k, v in s.items()]
    lines += [f"{k:<34} {v:.6g}" for k, v in g.items()]
    lines.append(f"seg_loss {report['seg_loss']:.6f}")
    lines.append(f"grad check max rel. error {report['grad_check']['max_relative_error']:.2e}")
    # the logit grids are only in the JSON report
    _emit(args, report, "\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=_existing, help="INI file with option defaults")
    common.add_argument("--json", action="store_true", help="print the JSON report instead of text")
    common.add_argument("--report", metavar="PATH", help="also write the JSON report to PATH")
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes for per-image stages")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="occuray", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("validate", parents=[common], help="check a dataset file")
    p.add_argument("--in", dest="input", required=True, type=_existing)
    p.add_argument("--strict", action="store_true", help="fail on warnings too")
    p.add_argument("--skip-area", action="store_true", help="do not rasterize masks to check areas")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("annotate", parents=[common], help="add occlusion annotations")
    p.add_argument("--in", dest="input", required=True, type=_existing)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--threshold", type=float, default=0.05, help="minimum box coverage of the occludee mask")
    p.add_argument("--clip", choices=("bbox", "mask"), default="mask")
    p.add_argument("--min-area", type=int, default=1)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("stats", parents=[common], help="dataset statistics table")
    p.add_argument("--in", dest="input", required=True, type=_existing)
    p.add_argument("--title")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("split", parents=[common], help="train/val/occlusion split")
    p.add_argument("--in", dest="input", required=True, type=_existing)
    p.add_argument("--out", dest="output", help="manifest JSON path")
    p.add_argument("--proportions", type=_proportions, default=(0.78, 0.12, 0.10))
    p.add_argument("--subset-dir", help="write train/val/occ dataset files here")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("eval", parents=[common], help="box/mask mAP")
    p.add_argument("--gt", required=True, type=_existing)
    p.add_argument("--dets", required=True, type=_existing, help="COCO results JSON")
    p.add_argument("--split", type=_existing, help="manifest of named image subsets")
    p.add_argument("--kind", choices=("bbox", "mask", "both"), default="both")
    p.add_argument("--max-dets", type=int, default=100)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loss-check", parents=[common], help="losses and gradient checks for JSON cases")
    p.add_argument("--in", dest="input", required=True, type=_existing)
    p.add_argument("--epsilon", type=float, default=1e-7)
    p.set_defaults(func=cmd_loss_check)

    p = sub.add_parser("decoder-demo", parents=[common], help="seeded bilayer decoder run")
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--grid", type=int, default=8)
    p.add_argument("--prompts", type=int, default=4)
    p.add_argument("--init-std", type=float, default=0.02)
    p.set_defaults(func=cmd_decoder_demo)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    """Install config-file values as parser defaults (flags still win)."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config or not os.path.exists(known.config):
        return
    cp = configparser.ConfigParser()
    cp.read(known.config, encoding="utf-8")
    sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, sp in sub_action.choices.items():
        values = {}
        for section in ("occuray", name):
            if cp.has_section(section):
                values.update({k.replace("-", "_"): v for k, v in cp.items(section)})
        dests = {a.dest: a for a in sp._actions}
        for key, raw in values.items():
            action = dests.get(key)
            if action is None:
                continue
            if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                sp.set_defaults(**{key: cp.BOOLEAN_STATES.get(raw.lower(), False)})
            elif isinstance(action, argparse._CountAction):
                sp.set_defaults(**{key: int(raw)})
            else:
                # string defaults go through the action's type converter
                sp.set_defaults(**{key: raw})
                action.required = False


def _setup_logging(verbose: int) -> None:
    level = os.environ.get("OCCURAY_LOG")
    if level:
        level = level.upper()
    else:
        level = "DEBUG" if verbose > 1 else "INFO" if verbose == 1 else "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def run(argv: Optional[Sequence[str]] = None) -> int:
    from .coco import DatasetParseError, DatasetSchemaError, DatasetValidationError
    from .evaluation import EvaluationError

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except configparser.Error as exc:
        print(f"occuray: bad config file: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    _setup_logging(args.verbose)
    if args.jobs < 1:
        print("occuray: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (DatasetParseError, DatasetSchemaError, DatasetValidationError, EvaluationError) as exc:
        print(f"occuray {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, OSError) as exc:
        print(f"occuray {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> int:
    return run()
