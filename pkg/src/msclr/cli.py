"""Command-line entry point: ``msclr <command>``.

Exit codes: 0 success, 1 findings (``validate``) or evaluation errors,
2 invalid configuration or usage, 3 non-finite loss, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import torch

from . import __version__
from .checkpoint import CheckpointError
from .config import DATA_ROOT_ENV, ConfigError, RunConfig, parse_overrides
from .conventions import builtin_registry, load_convention
from .dataio.container import DatasetError, check_dataset, read_dataset, write_dataset
from .dataio.synthetic import generate_synthetic_dataset
from .evalkit import EvalError, EvalReport, diff_svg, evaluate, per_class_diff, train_linear
from .pretrain import NonFiniteLossError, PretrainResult, pretrain_run, schedule

EXIT_OK, EXIT_FINDINGS, EXIT_CONFIG, EXIT_NONFINITE, EXIT_IO = 0, 1, 2, 3, 4

log = logging.getLogger("msclr")


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _registry(args):
    registry = builtin_registry()
    for path in getattr(args, "convention", None) or []:
        registry = registry.register(load_convention(path))
    return registry


def _config(args) -> RunConfig:
    overrides = parse_overrides(getattr(args, "set", None) or [])
    for flag, key in (("formats", "data.formats"), ("streams", "data.streams"),
                      ("eval_formats", "data.eval_formats"), ("dataset", "data.dataset"),
                      ("seed", "run.seed"), ("output_dir", "run.output_dir"),
                      ("epochs", "pretrain.epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = str(value)
    if getattr(args, "ensemble", False):
        overrides["eval.ensemble"] = "true"
    if getattr(args, "order", None):
        overrides["eval.ensemble_order"] = args.order
    return RunConfig.load(getattr(args, "config", None), getattr(args, "preset", None), overrides)


def _checked_config(args, registry, require_dataset: bool = True) -> RunConfig:
    cfg = _config(args)
    problems = cfg.validate(registry, require_dataset)
    if problems:
        raise CommandError("invalid configuration:\n  " + "\n  ".join(problems), EXIT_CONFIG)
    return cfg


def cmd_make_synthetic(args) -> int:
    if args.classes < 2:
        raise CommandError("--classes must be at least 2 (contrastive evaluation needs two classes)",
                           EXIT_CONFIG)
    if args.per_class < 1:
        raise CommandError("--per-class must be positive", EXIT_CONFIG)
    registry = _registry(args)
    records = generate_synthetic_dataset(args.classes, args.per_class, registry, seed=args.seed,
                                         test_fraction=args.test_fraction)
    try:
        manifest = write_dataset(records, args.out)
    except OSError as exc:
        raise CommandError(f"cannot write dataset to {args.out}: {exc}", EXIT_IO) from None
    digest = hashlib.sha256(manifest.read_bytes()).hexdigest()
    print(manifest)
    log.info("%d records, manifest sha256 %s", len(records), digest)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    registry = _registry(args)
    cfg = _checked_config(args, registry, require_dataset=not args.dry_run)
    pcfg = cfg.pretrain_config()
    if args.dry_run:
        n_records = args.records
        if n_records is None:
            try:
                n_records = sum(1 for r in read_dataset(cfg.dataset_path(), registry, cfg.formats)
                                if r.split_tag == cfg.get("data.train_split"))
            except (ConfigError, DatasetError):
                n_records = 0
        dump = {"preset": cfg.preset, "formats": cfg.formats, "streams": cfg.streams,
                "pretrain": schedule(pcfg, n_records, len(cfg.formats)),
                "linear_eval": cfg.linear_schedule().to_dict(),
                "fusion_weights": [cfg.fusion_weights()[s] for s in ("joint", "motion", "bone")],
                "config": cfg.echo()}
        print(json.dumps(dump, indent=1))
        return EXIT_OK
    try:
        records = [r for r in read_dataset(cfg.dataset_path(), registry, cfg.formats)
                   if r.split_tag == cfg.get("data.train_split")]
    except DatasetError as exc:
        raise CommandError(f"cannot read dataset: {exc}", EXIT_IO) from None
    if not records:
        raise CommandError(f"no records in split {cfg.get('data.train_split')!r}", EXIT_CONFIG)
    out_dir = cfg.output_dir
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
        log_fh = open(log_path, "w", encoding="utf-8")
    except OSError as exc:
        raise CommandError(f"cannot write to {out_dir}: {exc}", EXIT_IO) from None
    torch.use_deterministic_algorithms(True)
    with log_fh:
        log_fh.write(json.dumps({"event": "start", "config": cfg.echo(),
                                 "schedule": schedule(pcfg, len(records), len(cfg.formats))}) + "\n")

        def write(entry: dict) -> None:
            log_fh.write(json.dumps(entry) + "\n")

        try:
            result = pretrain_run(records, registry, cfg.formats, pcfg, log_fn=write)
        except NonFiniteLossError as exc:
            write({"event": "abort", "reason": str(exc)})
            raise CommandError(str(exc), EXIT_NONFINITE) from None
    path = out_dir / "checkpoint.msck"
    try:
        result.save(path)
    except OSError as exc:
        raise CommandError(f"cannot write checkpoint: {exc}", EXIT_IO) from None
    print(path)
    return EXIT_OK


def cmd_eval(args) -> int:
    registry = _registry(args)
    cfg = _checked_config(args, registry)
    if args.plot and not args.baseline:
        raise CommandError("--plot needs --baseline REPORT", EXIT_CONFIG)
    try:
        ckpt = PretrainResult.load(args.checkpoint)
    except CheckpointError as exc:
        raise CommandError(str(exc), EXIT_IO) from None
    missing = [f for f in cfg.eval_formats if f not in ckpt.formats]
    if missing:
        raise CommandError(f"checkpoint was not pretrained on {missing}", EXIT_CONFIG)
    missing = [s for s in cfg.streams if s not in ckpt.streams]
    if missing:
        raise CommandError(f"checkpoint has no encoder for streams {missing}", EXIT_CONFIG)
    try:
        records = read_dataset(cfg.dataset_path(), registry, cfg.eval_formats)
    except DatasetError as exc:
        raise CommandError(f"cannot read dataset: {exc}", EXIT_IO) from None
    train = [r for r in records if r.split_tag == cfg.get("data.train_split")]
    n_classes = max(r.label for r in records) + 1
    schedule_ = cfg.linear_schedule()
    heads = {(s, f): train_linear(ckpt, train, f, s, schedule_, n_classes)
             for s in cfg.streams for f in cfg.eval_formats}
    report = evaluate(heads, ckpt, records, cfg.protocol(ckpt.checkpoint_id()))
    out_dir = cfg.output_dir
    out = Path(args.out) if args.out else out_dir / "report.json"
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        report.save(out)
        if args.plot:
            baseline = EvalReport.load(args.baseline)
            svg = out.with_name(out.stem + "_diff.svg")
            svg.write_text(diff_svg(per_class_diff(report, baseline)), encoding="utf-8")
            log.info("wrote %s", svg)
    except OSError as exc:
        raise CommandError(f"cannot write report: {exc}", EXIT_IO) from None
    print(report.table())
    print(out)
    return EXIT_OK


def cmd_validate(args) -> int:
    registry = _registry(args)
    cfg = _config(args)
    problems = [f"config: {p}" for p in cfg.validate(registry)]
    if not any(p.startswith("config: data.dataset") for p in problems):
        known = [f for f in cfg.formats if f in registry]
        problems += [str(f) for f in check_dataset(cfg.dataset_path(), registry, known)]
    for p in problems:
        print(p)
    print(f"{len(problems)} finding(s)")
    return EXIT_OK if not problems else EXIT_FINDINGS


def cmd_report(args) -> int:
    try:
        report = EvalReport.load(args.report)
        baseline = EvalReport.load(args.baseline) if args.baseline else None
    except (OSError, ValueError, KeyError) as exc:
        raise CommandError(f"cannot read report: {exc}", EXIT_IO) from None
    print(report.table())
    if baseline is not None:
        diffs = per_class_diff(report, baseline, args.key)
        print("\nclass  delta top-1")
        for cls, d in diffs:
            print(f"{cls:>5}  {d:+.4f}")
        if args.svg:
            Path(args.svg).write_text(diff_svg(diffs), encoding="utf-8")
    elif args.svg:
        raise CommandError("--svg needs --baseline REPORT", EXIT_CONFIG)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msclr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=True):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--preset", choices=("desk", "paper"))
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--convention", action="append", metavar="TOPOLOGY.json",
                       help="register an extra convention topology file (repeatable)")
        p.add_argument("--formats", help="comma-separated convention names")
        p.add_argument("--streams", help="comma-separated streams: joint, motion, bone")
        p.add_argument("--seed", type=int)
        p.add_argument("--output-dir")
        if dataset:
            p.add_argument("--dataset", help=f"manifest path (relative paths use ${DATA_ROOT_ENV})")

    p = sub.add_parser("make-synthetic", help="generate a synthetic multi-format dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--test-fraction", type=float, default=1 / 3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--convention", action="append", metavar="TOPOLOGY.json")
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("pretrain", help="momentum-contrast pretraining")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--dry-run", action="store_true", help="print the schedule and exit")
    p.add_argument("--records", type=int, help="record count assumed by --dry-run")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="linear evaluation, fusion and ensembling")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval-formats", help="formats that get linear heads")
    p.add_argument("--ensemble", action="store_true")
    p.add_argument("--order", choices=("formats_first", "streams_first"))
    p.add_argument("--out", help="report path (default OUTPUT_DIR/report.json)")
    p.add_argument("--plot", action="store_true", help="write a per-class diff SVG")
    p.add_argument("--baseline", help="baseline report for --plot")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("validate", help="check configuration and dataset consistency")
    common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("report", help="print a report and per-class differences")
    p.add_argument("report")
    p.add_argument("--baseline")
    p.add_argument("--key", help="report entry to compare (default: headline)")
    p.add_argument("--svg", help="write the per-class diff bar chart here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except EvalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FINDINGS


if __name__ == "__main__":
    sys.exit(main())
