"""Command-line entry point: ``pavement-assess <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Sequence

from .annotations import AnnotationError, iter_annotation_file
from .autodiff.io import CheckpointError, TensorFileError
from .autodiff.tensor import DimensionError
from .pipeline import (
    ConfigError,
    PipelineConfig,
    run_evaluate,
    run_infer_all,
    run_train_captioner,
    run_train_pci,
)
from .synthetic import make_dataset, write_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

DATA_ERRORS = (AnnotationError, ConfigError, CheckpointError, TensorFileError, DimensionError, ValueError, OSError)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--seed", type=int, help="override the config seed")

    parser = _Parser(prog="pavement-assess", description="Pavement condition assessment: PCI regression and dense captions.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("validate", parents=[common], help="check annotation files")
    p.add_argument("files", nargs="*", help="JSON Lines files (default: data.annotations from --config)")
    sub.add_parser("train-pci", parents=[common], help="train the PCI regression head")
    sub.add_parser("train-captioner", parents=[common], help="train the captioning transformer")
    p = sub.add_parser("infer", parents=[common], help="assess images and write assessments.jsonl")
    p.add_argument("--image-id", action="append", default=[], help="restrict to these images (repeatable)")
    sub.add_parser("evaluate", parents=[common], help="score captions and PCI predictions against the annotations")
    sub.add_parser("report", parents=[common], help="print a summary of the evaluation CSVs")
    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset and a matching config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=8, help="number of images")
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--max-instances", type=int, default=2)
    return parser


def _config(args, parser) -> PipelineConfig:
    if not args.config:
        parser.error(f"{args.command} requires --config")
    config = PipelineConfig.load(args.config)
    return config if args.seed is None else config.with_seed(args.seed)


def _write_history(path: Path, history: Sequence[float]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss"])
        for epoch, loss in enumerate(history):
            writer.writerow([epoch, repr(loss)])


def cmd_validate(args, parser) -> int:
    if args.files:
        files = args.files
    else:
        config = _config(args, parser)
        files = [str(config.path(config.data.annotations, "data.annotations"))]
    for path in files:
        count = 0
        try:
            for _ in iter_annotation_file(path):
                count += 1
        except AnnotationError as exc:
            print(f"{path}: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"{path}: {count} records OK")
    return EXIT_OK


def _train(args, parser, which: str) -> int:
    config = _config(args, parser)
    history = run_train_pci(config) if which == "pci" else run_train_captioner(config)
    _write_history(config.report_dir / f"{which}_loss.csv", history)
    checkpoint = config.pci_checkpoint if which == "pci" else config.captioner_checkpoint
    final = history[-1] if history else float("nan")
    print(f"{which}: epochs={len(history)} final loss={final:.10g}")
    print(f"{which}: checkpoint written to {checkpoint}")
    return EXIT_OK


def cmd_infer(args, parser) -> int:
    config = _config(args, parser)
    for report in run_infer_all(config, image_ids=args.image_id):
        flag = " [truncated]" if report.truncated else ""
        print(f"{report.image_id}: {report.final_caption}{flag}")
    return EXIT_OK


def cmd_evaluate(args, parser) -> int:
    config = _config(args, parser)
    result = run_evaluate(config)
    for metric, (mean, std) in result.captions.summary.items():
        print(f"{metric}: {mean:.4f} +/- {std:.4f}")
    print(f"reports written to {config.report_dir}")
    return EXIT_OK


def _read_rows(path: Path) -> list[list[str]]:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run evaluate first")
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))[1:]


def cmd_report(args, parser) -> int:
    config = _config(args, parser)
    out = config.report_dir
    lines = ["caption metrics (mean +/- std)"]
    lines += [f"  {m:<8} {float(mean):.4f} +/- {float(std):.4f}" for m, mean, std in _read_rows(out / "caption_summary.csv")]
    lines.append("pci regression")
    lines += [f"  {name:<20} {value}" for name, value in _read_rows(out / "pci_metrics.csv")]
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args, parser) -> int:
    if args.n < 1:
        parser.error("--n must be >= 1")
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)
    samples = make_dataset(args.n, args.height, args.width, seed=seed, max_instances=args.max_instances)
    write_dataset(samples, out / "annotations.jsonl", out / "images")
    config = PipelineConfig(seed=seed).to_dict()
    config["data"] = {"annotations": "annotations.jsonl", "images_dir": "images", "features_dir": None}
    (out / "config.json").write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(samples)} samples and config.json to {out}")
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "train-pci": lambda a, p: _train(a, p, "pci"),
    "train-captioner": lambda a, p: _train(a, p, "captioner"),
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "synth": cmd_synth,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args, parser)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
