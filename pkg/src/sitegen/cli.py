"""Command-line entry point: ``sitegen <command> [options]``.

Settings resolve as defaults < ``--config`` JSON file < command-line flags.
Without ``--out`` results go under ``$SITEGEN_OUTPUT_ROOT/<command>``.
Exit codes: 0 success, 2 usage error, 3 data error, 4 training failure; on
failure a one-line JSON error object is written to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import DataError, SitegenError, TrainingError
from .evalstats.aggregate import build_report
from .evalstats.diagnostics import histogram_diagnostics, write_lesion_size
from .evalstats.efficiency import efficiency_report, write_efficiency
from .evalstats.loso import run_loso
from .trainer import Checkpoint, TrainConfig, evaluate, flag_grid, load_volumes, run_ablation, train
from .volumes import read_manifest, write_synthetic_dataset

log = logging.getLogger("sitegen")

OUTPUT_ROOT_ENV = "SITEGEN_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def int_tuple(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def holdout(text: str) -> int | None:
    return None if text.lower() in ("none", "-1") else int(text)


def flag_rows(text: str) -> list[tuple[bool, bool, bool]]:
    rows = []
    for item in text.split(","):
        if len(item) != 3 or set(item) - {"0", "1"}:
            raise argparse.ArgumentTypeError(f"flag rows look like 101 (DA, SL, MAIN), got {item!r}")
        rows.append(tuple(c == "1" for c in item))
    return rows


def add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file of training settings")
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--width", dest="width_multiplier", type=float, help="U-Net width multiplier")
    p.add_argument("--decay-mode", choices=("lr", "l2"))
    p.add_argument("--momentum", type=float)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--main", dest="use_main", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--augment", dest="use_augmentation", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--adversary", dest="use_site_adversary", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--balanced", dest="balanced_sampling", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--crop", type=int_tuple, help="H,W crop (defaults to the manifest's)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sitegen", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic multi-site dataset")
    p.add_argument("--sites", type=int, default=3)
    p.add_argument("--subjects-per-site", type=int, default=4)
    p.add_argument("--shape", type=int_tuple, default=(16, 68, 68), help="D,H,W")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--crop", type=int_tuple)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("train", help="train with one site held out")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--holdout-site", type=holdout, default=None, help="site id or 'none'")
    p.add_argument("--out", type=Path)
    add_train_flags(p)

    p = sub.add_parser("loso", help="leave-one-site-out evaluation")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--baseline", type=Path, help="metrics.csv of a reference run for Wilcoxon tests")
    p.add_argument("--out", type=Path)
    add_train_flags(p)

    p = sub.add_parser("ablate", help="train flag combinations on one held-out site")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--site", type=int, required=True)
    p.add_argument("--flags", type=flag_rows, help="comma-separated DA/SL/MAIN rows such as 000,111 (default: all 8)")
    p.add_argument("--seeds", type=int_tuple)
    p.add_argument("--out", type=Path)
    add_train_flags(p)

    p = sub.add_parser("report", help="evaluate a checkpoint and emit diagnostics")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--diagnostics", action="store_true", help="intensity histograms and KS matrix")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("efficiency", help="compute table for full-width vs hemisphere input")
    p.add_argument("--width", type=float, default=1.0)
    p.add_argument("--slice", type=int_tuple, default=(224, 192), help="H,W")
    p.add_argument("--out", type=Path)
    return parser


def resolve_config(args) -> TrainConfig:
    values = {}
    if args.config is not None:
        if not args.config.exists():
            raise DataError("missing-file", str(args.config))
        try:
            values.update(json.loads(args.config.read_text()))
        except json.JSONDecodeError as err:
            raise DataError("malformed-config", f"{args.config}: {err}") from err
    for key in TrainConfig.__dataclass_fields__:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as err:
        raise UsageError(f"bad configuration: {err}") from err


def out_dir(args) -> Path:
    if args.out is not None:
        return args.out
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "sitegen-runs")) / args.command


def cmd_synth(args) -> dict:
    if len(args.shape) != 3:
        raise DataError("invalid-shape", "--shape takes D,H,W")
    out = out_dir(args)
    manifest = write_synthetic_dataset(out, args.sites, args.subjects_per_site, args.shape, args.seed, crop=args.crop)
    return {"manifest": str(out / "manifest.json"), "subjects": len(manifest.subjects), "crop_shape": list(manifest.crop_shape)}


def cmd_train(args) -> dict:
    config = resolve_config(args)
    manifest = read_manifest(args.manifest)
    out = out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint, curves = train(manifest, args.holdout_site, config, args.crop)
    checkpoint.save(out / "model.ckpt")
    curves.to_csv(out / "curves.csv")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
    return {"checkpoint": str(out / "model.ckpt"), "final_loss": curves.epochs[-1].total_loss}


def read_metrics_csv(path: Path):
    from .evalstats.metrics import SubjectMetrics

    if not path.exists():
        raise DataError("missing-file", str(path))
    with path.open() as fh:
        return [
            SubjectMetrics(float(r["dice"]), float(r["recall"]), float(r["f1"]), r["subject_id"], int(r["site_id"]), int(r["lesion_voxels"]))
            for r in csv.DictReader(fh)
        ]


def cmd_loso(args) -> dict:
    config = resolve_config(args)
    manifest = read_manifest(args.manifest)
    baseline = read_metrics_csv(args.baseline) if args.baseline else None
    out = out_dir(args)
    report = run_loso(manifest, config, args.crop, out_dir=out, baseline=baseline)
    report.efficiency = efficiency_report(config.width_multiplier)
    report.config = {**config.to_dict(), "manifest": str(args.manifest), "crop_shape": list(args.crop or manifest.crop_shape)}
    report.write(out)
    write_lesion_size(report.subjects, out)
    return {"report": str(out / "report.json"), "overall_dice": report.overall["dice"].mean}


def cmd_ablate(args) -> dict:
    config = resolve_config(args)
    manifest = read_manifest(args.manifest)
    rows = run_ablation(manifest, args.site, args.flags, config, seeds=args.seeds, crop_shape=args.crop)
    out = out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    fields = ["site", "DA", "SL", "MAIN", "seed", "dice", "recall", "f1", "final_loss"]
    with (out / "ablation.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    (out / "ablation.json").write_text(json.dumps({"config": config.to_dict(), "rows": rows}, indent=2))
    return {"ablation": str(out / "ablation.csv"), "rows": len(rows)}


def cmd_report(args) -> dict:
    checkpoint = Checkpoint.load(args.checkpoint)
    out = out_dir(args)
    summary = {"checkpoint": str(args.checkpoint)}
    if args.manifest is None:
        return summary
    manifest = read_manifest(args.manifest)
    volumes = load_volumes(manifest)
    held = checkpoint.held_out_site
    test = [v for v in volumes if held is None or v.site_id == held]
    report = build_report(evaluate(checkpoint, test), config=checkpoint.config.to_dict())
    report.write(out)
    write_lesion_size(report.subjects, out)
    summary["report"] = str(out / "report.json")
    summary["dice"] = report.overall["dice"].mean
    if args.diagnostics:
        diag = histogram_diagnostics(volumes, checkpoint)
        diag.write(out)
        (out / "diagnostics.json").write_text(json.dumps(diag.to_dict(), indent=2))
        summary["mean_pairwise_ks"] = {st: diag.mean_pairwise_ks(st) for st in diag.ks}
    return summary


def cmd_efficiency(args) -> dict:
    report = efficiency_report(args.width, args.slice)
    if args.out is not None:
        write_efficiency(report, args.out / "efficiency.csv")
        (args.out / "efficiency.json").write_text(json.dumps(report, indent=2))
    return report


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "loso": cmd_loso,
    "ablate": cmd_ablate,
    "report": cmd_report,
    "efficiency": cmd_efficiency,
}


def _fail(code: str, message: str, status: int) -> int:
    print(json.dumps({"error": code, "message": message, "exit_code": status}), file=sys.stderr)
    return status


def _json_default(value):
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    return str(value)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        return _fail("usage", str(err), EXIT_USAGE)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        result = COMMANDS[args.command](args)
    except UsageError as err:
        return _fail("usage", str(err), EXIT_USAGE)
    except TrainingError as err:
        return _fail(err.code, err.message, EXIT_TRAINING)
    except SitegenError as err:
        return _fail(err.code, err.message, EXIT_DATA)
    except OSError as err:
        return _fail("io-error", str(err), EXIT_DATA)
    print(json.dumps(result, default=_json_default))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
