"""Command-line entry point.

Subcommands: phantom, train, eval, predict, xval, track, gradcheck. Every
run writes an effective-config JSON next to its outputs so any result can
be reproduced from that file alone. Exit codes: 0 success, 1 validation
error (bad flags, malformed inputs, failed tolerance), 2 unexpected
runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import VesselSegError
from .model import ModelConfig, segment_volume, tiny_config
from .phantom import BoneDecoy, PhantomSpec, generate, save_spec
from .tracker import TrackerConfig, events_to_json, track_volume
from .training import TrainConfig, cross_validate, evaluate, grad_check, train
from .volume_io import (
    HuWindow,
    MaskVolume,
    Volume,
    load_mask,
    load_volume,
    normalize_slice,
    save_mask,
    save_volume,
)


@dataclass
class CommandResult:
    exit_code: int
    report_path: str | None = None


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on bad flags instead of argparse's 2
        raise _UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def write_overlay(
    hu_slice: np.ndarray,
    mask_slice: np.ndarray,
    path: str | Path,
    window: HuWindow | None = None,
) -> None:
    """Write an 8-bit binary PPM: windowed grayscale, mask tinted red.

    Mask pixels get red channel 255; green/blue keep the grayscale value.
    """
    window = window or HuWindow()
    gray = (normalize_slice(hu_slice, window) * 255.0).astype(np.uint8)
    h, w = gray.shape
    rgb = np.stack([gray, gray, gray], axis=-1)
    rgb[np.asarray(mask_slice).astype(bool), 0] = 255
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def _write_effective_config(path: Path, command: str, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"command": command, **payload}, indent=2) + "\n", encoding="utf-8")


def _parse_range(text: str) -> tuple[int, int]:
    z0, z1 = text.split(":")
    return int(z0), int(z1)


def _parse_bone(text: str) -> BoneDecoy:
    x, y, r, zr = text.split(",")
    return BoneDecoy(center_xy=(float(x), float(y)), radius_px=float(r), contact_z_range=_parse_range(zr))


def _load_patient(directory: str | Path) -> tuple[Volume, MaskVolume]:
    return load_volume(directory), load_mask(directory)


def _read_config_file(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _model_config(overrides: dict) -> ModelConfig:
    return ModelConfig.from_dict({**ModelConfig().to_dict(), **overrides})


def _train_config(overrides: dict) -> TrainConfig:
    base = TrainConfig().to_dict()
    base.update(overrides)
    window = base.pop("hu_window")
    return TrainConfig(hu_window=HuWindow(*window), **base)


# -- subcommands -----------------------------------------------------------


def _cmd_phantom(args) -> CommandResult:
    out = Path(args.out)
    spec = PhantomSpec(
        dims=(args.slices, args.size, args.size),
        seed=args.seed,
        occlusion_z_range=_parse_range(args.occlusion) if args.occlusion else None,
        bone_decoys=[_parse_bone(b) for b in args.bone],
        mask_extent=args.mask_extent,
        patient_id=out.name,
    )
    volume, mask = generate(spec)
    save_volume(volume, out)
    save_mask(mask, out)
    save_spec(spec, out)
    _write_effective_config(out / "effective_config.json", "phantom", {"spec": json.loads(spec.to_json())})
    return CommandResult(0, str(out))


def _cmd_train(args) -> CommandResult:
    file_cfg = _read_config_file(args.config)
    model_over = dict(file_cfg.get("model", {}))
    if args.input_size is not None:
        model_over["input_hw"] = args.input_size
    if args.bridge_layers is not None:
        model_over["bridge_layers"] = args.bridge_layers
    train_over = dict(file_cfg.get("train", {}))
    if args.epochs is not None:
        train_over["epochs"] = args.epochs
    if args.batch_size is not None:
        train_over["batch_size"] = args.batch_size
    if args.lr is not None:
        train_over["learning_rate"] = args.lr
    if args.seed is not None:
        train_over["seed"] = args.seed
    model_cfg = _model_config(model_over)
    train_cfg = _train_config(train_over)

    train_patients = [_load_patient(d) for d in args.data]
    val_patients = [_load_patient(d) for d in args.val]
    out = Path(args.out)
    ckpt, log = train(model_cfg, train_cfg, train_patients, val_patients, checkpoint_dir=out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out / "model.ckpt")
    (out / "train_log.jsonl").write_text(log.to_jsonl(), encoding="utf-8")
    _write_effective_config(
        out / "effective_config.json",
        "train",
        {
            "model": model_cfg.to_dict(),
            "train": train_cfg.to_dict(),
            "data": list(args.data),
            "val": list(args.val),
        },
    )
    return CommandResult(0, str(out / "model.ckpt"))


def _cmd_eval(args) -> CommandResult:
    ckpt = load_checkpoint(args.ckpt)
    patients = [_load_patient(d) for d in args.data]
    report = evaluate(ckpt, patients)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_json() + "\n", encoding="utf-8")
    _write_effective_config(
        report_path.with_suffix(".config.json"),
        "eval",
        {"ckpt": args.ckpt, "data": list(args.data), "report": args.report},
    )
    return CommandResult(0, str(report_path))


def _cmd_predict(args) -> CommandResult:
    ckpt = load_checkpoint(args.ckpt)
    volume = load_volume(args.volume)
    lo, hi = ckpt.meta.get("hu_window", (HuWindow().lo, HuWindow().hi))
    mask = segment_volume(ckpt.params, volume, HuWindow(lo, hi), threshold=args.threshold)
    out = Path(args.out)
    save_mask(mask, out)
    if args.overlay_dir:
        for z in range(volume.meta.num_slices):
            write_overlay(
                volume.voxels[z],
                mask.voxels[z],
                Path(args.overlay_dir) / f"slice_{z:04d}.ppm",
                HuWindow(lo, hi),
            )
    _write_effective_config(
        out / "effective_config.json",
        "predict",
        {
            "ckpt": args.ckpt,
            "volume": args.volume,
            "threshold": args.threshold,
            "overlay_dir": args.overlay_dir,
        },
    )
    return CommandResult(0, str(out))


def _cmd_xval(args) -> CommandResult:
    file_cfg = _read_config_file(args.config)
    model_cfg = _model_config(file_cfg.get("model", {}))
    train_cfg = _train_config(file_cfg.get("train", {}))
    fold_sizes = tuple(int(s) for s in args.folds.split(","))
    root = Path(args.data_root)
    patient_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    patients = [_load_patient(d) for d in patient_dirs]
    result = cross_validate(model_cfg, train_cfg, patients, fold_sizes=fold_sizes)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "folds": [json.loads(r.to_json()) for r in result.fold_reports],
        "mean_dice": result.mean_dice,
        "mean_iou": result.mean_iou,
        "plan": json.loads(result.plan.to_json()),
        "seed": train_cfg.seed,
        "config_sha256": model_cfg.digest(),
    }
    report_path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    (report_path.parent / "folds.json").write_text(result.plan.to_json() + "\n", encoding="utf-8")
    _write_effective_config(
        report_path.with_suffix(".config.json"),
        "xval",
        {
            "model": model_cfg.to_dict(),
            "train": train_cfg.to_dict(),
            "data_root": args.data_root,
            "folds": list(fold_sizes),
        },
    )
    return CommandResult(0, str(report_path))


def _cmd_track(args) -> CommandResult:
    volume = load_volume(args.volume)
    x, y = (int(v) for v in args.seed_point.split(","))
    cfg = TrackerConfig(t_lo=args.t_lo, t_hi=args.t_hi, seed_point=(x, y))
    mask, events = track_volume(volume, cfg)
    out = Path(args.out)
    save_mask(mask, out)
    events_path = Path(args.events)
    events_path.parent.mkdir(parents=True, exist_ok=True)
    events_path.write_text(events_to_json(events) + "\n", encoding="utf-8")
    _write_effective_config(
        out / "effective_config.json",
        "track",
        {
            "volume": args.volume,
            "seed_point": [x, y],
            "t_lo": args.t_lo,
            "t_hi": args.t_hi,
            "events": args.events,
        },
    )
    return CommandResult(0, str(out))


def _cmd_gradcheck(args) -> CommandResult:
    report = grad_check(tiny_config(), seed=args.seed, n_samples=args.samples, tol=args.tol)
    printable = {k: v for k, v in report.items() if k != "samples"}
    print(json.dumps({"command": "gradcheck", "seed": args.seed, **printable}, indent=2))
    if not report["pass"]:
        print(
            f"vesselseg: gradient check failed: max relative error "
            f"{report['max_rel_err']:.3e} > {report['tol']:.0e} at {report['worst_param']}",
            file=sys.stderr,
        )
        return CommandResult(1)
    return CommandResult(0)


def _build_parser() -> _Parser:
    parser = _Parser(prog="vesselseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic patient volume")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--slices", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--occlusion", default=None, metavar="Z0:Z1")
    p.add_argument("--bone", action="append", default=[], metavar="X,Y,R,Z0:Z1")
    p.add_argument("--mask-extent", choices=["to_bifurcation", "to_end"], default="to_end")
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("train", help="train the segmentation network")
    p.add_argument("--data", action="append", required=True, metavar="DIR")
    p.add_argument("--val", action="append", default=[], metavar="DIR")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--input-size", type=int, default=None)
    p.add_argument("--bridge-layers", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on labelled patients")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", action="append", required=True, metavar="DIR")
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="segment one volume")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlay-dir", default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("xval", help="patient-level cross-validation")
    p.add_argument("--data-root", required=True)
    p.add_argument("--folds", default="3,3,3,2")
    p.add_argument("--config", default=None)
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_xval)

    p = sub.add_parser("track", help="run the intensity-tracking baseline")
    p.add_argument("--volume", required=True)
    p.add_argument("--seed-point", required=True, metavar="X,Y")
    p.add_argument("--t-lo", type=float, required=True)
    p.add_argument("--t-hi", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--events", required=True)
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=100)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def dispatch(argv: list[str]) -> CommandResult:
    """Parse argv and run the chosen subcommand."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return CommandResult(1)
    except SystemExit as exc:  # argparse -h
        return CommandResult(int(exc.code or 0))
    except (VesselSegError, json.JSONDecodeError, ValueError) as exc:
        print(f"vesselseg: {exc}", file=sys.stderr)
        return CommandResult(1)
    except Exception:
        traceback.print_exc()
        return CommandResult(2)


def main(argv: list[str] | None = None) -> None:
    result = dispatch(sys.argv[1:] if argv is None else argv)
    sys.exit(result.exit_code)
