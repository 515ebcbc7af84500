"""Command-line entry point: ``python -m koos <subcommand>``.

Exit status: 0 success, 1 usage error, 2 data or format error, 3 internal
invariant violation. Logs go to stderr; stdout carries only command output.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, NoReturn, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from .atlas import dump_atlas, load_atlas_file, partition_counts
from .config import runtime_config, validate_config
from .errors import KoosError
from .features import (
    extract_directory,
    load_dataset,
    read_grades,
    save_dataset,
    write_grades,
)
from .forest import load_model_file, predict, save_model_file, train
from .geometry import configure_threads
from .metrics import evaluate
from .nifti import inspect_volume, label_histogram, save_volume
from .phantom import PHANTOM_ATLAS, generate_dataset
from .presets_loader import PresetNotFoundError, default_preset, get_preset

logger = logging.getLogger(__name__)


class UsageError(KoosError):
    code = "usage_error"
    exit_status = 1


class NoCases(KoosError):
    code = "no_cases"


class CaseMismatch(KoosError):
    code = "case_id_mismatch"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from exc
    if value < 1:
        raise argparse.ArgumentTypeError(f"{value} must be at least 1")
    return value


def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer seed") from exc
    if not -(2**63) <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed {value} does not fit in 64 bits")
    return value


def _read_grades_file(path: Path) -> dict[str, int]:
    with open(path, newline="", encoding="utf-8") as handle:
        return read_grades(handle)


def _write_grades_file(path: Path, grades: dict[str, int]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        write_grades(grades, handle)


def _format_row(label: str, value: str) -> str:
    return f"{label:<12}{value}"


def cmd_inspect(args: argparse.Namespace) -> int:
    atlas = load_atlas_file(args.atlas) if args.atlas else None
    with open(args.path, "rb") as handle:
        header, vol = inspect_volume(handle)
    scaling = (
        f"slope {header.scl_slope:g}, intercept {header.scl_inter:g}"
        if np.isfinite(header.scl_slope) and header.scl_slope not in (0.0, 1.0)
        else "none"
    )
    lines = [
        _format_row("file", str(args.path)),
        _format_row("dims", " x ".join(str(n) for n in header.dims)),
        _format_row("spacing", " x ".join(f"{s:g}" for s in header.spacing) + " mm"),
        _format_row("datatype", f"{header.datatype_name} (code {header.datatype_code})"),
        _format_row("byte order", "big-endian" if header.byteorder == ">" else "little-endian"),
        _format_row("scaling", scaling),
        _format_row("vox_offset", f"{header.vox_offset:g}"),
        "affine",
    ]
    for row in header.affine:
        lines.append("    " + " ".join(f"{v:>10.4f}" for v in row))
    lines += ["", f"{'label':>7}  {'voxels':>10}"]
    for label, count in label_histogram(vol):
        lines.append(f"{label:>7}  {count:>10}")
    if atlas is not None:
        lines += ["", f"{'structure':<22}{'voxels':>10}"]
        for structure, count in partition_counts(vol, atlas).items():
            lines.append(f"{structure.value:<22}{count:>10}")
    print("\n".join(lines))
    return 0


def cmd_extract(args: argparse.Namespace) -> int:
    atlas = load_atlas_file(args.atlas)
    labels = _read_grades_file(args.labels) if args.labels else None
    if not args.masks.is_dir():
        raise NotADirectoryError(f"{args.masks} is not a directory")
    records, skipped = extract_directory(
        args.masks, atlas, labels=labels, threads=runtime_config.threads
    )
    if not records:
        if skipped:
            raise NoCases(f"all {len(skipped)} case(s) in {args.masks} lack a VS")
        raise NoCases(f"no .nii or .nii.gz files in {args.masks}")
    save_dataset(args.out, records)
    if skipped:
        logger.warning("%d case(s) skipped: %s", len(skipped), ", ".join(skipped))
    logger.info("wrote %d row(s) to %s", len(records), args.out)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    preset = get_preset(args.preset) if args.preset else default_preset()
    try:
        params = preset.params(
            seed=args.seed,
            n_trees=args.trees,
            max_depth=args.max_depth,
            min_samples_leaf=args.min_leaf,
            mtry=args.mtry,
            bootstrap=False if args.no_bootstrap else None,
        )
    except ValidationError as exc:
        raise UsageError(f"invalid forest parameters: {exc.errors()[0]['msg']}") from exc

    records = load_dataset(args.data)
    labeled = [r for r in records if r.grade is not None]
    if len(labeled) < len(records):
        logger.warning(
            "ignoring %d unlabeled row(s) in %s", len(records) - len(labeled), args.data
        )
    model = train(labeled, params, threads=runtime_config.threads)
    save_model_file(args.out, model)

    report = evaluate((predict(model, r.features), r.grade) for r in labeled)
    print("training set")
    print(report.render_table(), end="")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    model = load_model_file(args.model)
    records = load_dataset(args.data)
    predictions = {r.case_id: predict(model, r.features) for r in records}
    _write_grades_file(args.out, predictions)
    logger.info("wrote %d prediction(s) to %s", len(predictions), args.out)
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    predicted = _read_grades_file(args.pred)
    truth = _read_grades_file(args.truth)
    if set(predicted) != set(truth):
        only_pred = sorted(set(predicted) - set(truth))
        only_truth = sorted(set(truth) - set(predicted))
        raise CaseMismatch(
            f"case ids differ: {len(only_pred)} only in predictions {only_pred[:5]}, "
            f"{len(only_truth)} only in truth {only_truth[:5]}"
        )
    report = evaluate(
        ((predicted[case], truth[case]) for case in sorted(truth)), strict=args.strict
    )
    print(report.render_table())
    print(report.to_json(), end="")
    if args.report:
        Path(args.report).write_text(report.to_json(), encoding="utf-8")
    return 0


def cmd_phantom(args: argparse.Namespace) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    cases = generate_dataset(args.per_grade, args.seed, threads=runtime_config.threads)
    for vol, record in cases:
        save_volume(args.out / f"{record.case_id}.nii.gz", vol)
    _write_grades_file(args.out / "truth.csv", {r.case_id: r.grade for _, r in cases})
    (args.out / "phantom.atlas").write_text(
        dump_atlas(PHANTOM_ATLAS, header="koos phantom atlas; label 11 is unmapped"),
        encoding="utf-8",
    )
    logger.info("wrote %d phantom volume(s) to %s", len(cases), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="koos",
        description="Koos grading of vestibular schwannoma from label volumes.",
    )
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name: str, handler: Callable[[argparse.Namespace], int], help: str):
        sub = commands.add_parser(name, help=help, description=help)
        sub.set_defaults(handler=handler)
        return sub

    sub = command("inspect", cmd_inspect, "Print a label volume's header and histogram.")
    sub.add_argument("path", type=Path)
    sub.add_argument("--atlas", type=Path, help="also print voxels per structure")

    sub = command("extract", cmd_extract, "Extract the feature CSV from a mask directory.")
    sub.add_argument("--masks", type=Path, required=True)
    sub.add_argument("--atlas", type=Path, required=True)
    sub.add_argument("--out", type=Path, required=True)
    sub.add_argument("--labels", type=Path, help="case_id,grade CSV joined into the output")

    sub = command("train", cmd_train, "Train a random forest on a labeled feature CSV.")
    sub.add_argument("--data", type=Path, required=True)
    sub.add_argument("--out", type=Path, required=True, help="model path; .gz compresses")
    sub.add_argument("--preset", help="forest preset id (default: the configured default)")
    sub.add_argument("--trees", type=_positive_int)
    sub.add_argument("--max-depth", type=_positive_int)
    sub.add_argument("--min-leaf", type=_positive_int)
    sub.add_argument("--mtry", type=_positive_int)
    sub.add_argument("--no-bootstrap", action="store_true")
    sub.add_argument("--seed", type=_seed, default=0)

    sub = command("predict", cmd_predict, "Predict grades for a feature CSV.")
    sub.add_argument("--model", type=Path, required=True)
    sub.add_argument("--data", type=Path, required=True)
    sub.add_argument("--out", type=Path, required=True)

    sub = command("evaluate", cmd_evaluate, "Score predictions against the truth.")
    sub.add_argument("--pred", type=Path, required=True)
    sub.add_argument("--truth", type=Path, required=True)
    sub.add_argument("--strict", action="store_true", help="average over all 4 grades")
    sub.add_argument("--report", type=Path, help="also write the JSON report here")

    sub = command("phantom", cmd_phantom, "Write a synthetic graded phantom dataset.")
    sub.add_argument("--out", type=Path, required=True)
    sub.add_argument("--per-grade", type=_positive_int, required=True)
    sub.add_argument("--seed", type=_seed, default=0)
    return parser


def _report(code: str, message: str) -> None:
    print(f"error[{code}]: {message}", file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        validate_config()
    except UsageError as exc:
        _report(exc.code, exc.message)
        return exc.exit_status
    except ValueError as exc:
        _report(UsageError.code, str(exc))
        return UsageError.exit_status

    level = logging.DEBUG if args.verbose else runtime_config.log_level_value
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )
    logging.getLogger("koos").setLevel(level)
    configure_threads(runtime_config.threads)

    try:
        return args.handler(args)
    except (KoosError, PresetNotFoundError) as exc:
        _report(exc.code, exc.message)
        return exc.exit_status
    except OSError as exc:
        _report("io_error", str(exc))
        return 2
    except Exception:
        logger.exception("internal error in %s", args.command)
        return 3

