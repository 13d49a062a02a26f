"""Command-line entry point.

Reports go to stdout as JSON, diagnostics to stderr.  Exit codes: 0 success,
1 usage error, 2 runtime failure.

Configuration precedence, lowest first: built-in defaults, the ``--config``
JSON file, the ``ENDODEPTH_SEED`` environment variable (seed only),
dedicated flags such as ``--epochs``, then ``--set key=value``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

log = logging.getLogger("endodepthl")

SEED_ENV = "ENDODEPTH_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_size(text: str) -> tuple[int, int]:
    """``"320x256"`` -> ``(320, 256)``; both sides must be multiples of 16."""
    try:
        w, h = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--input/--size: expected WxH, got {text!r}") from None
    if w <= 0 or h <= 0 or w % 16 or h % 16:
        raise UsageError(f"--input/--size: {w}x{h} must be positive and divisible by 16")
    return w, h


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set: expected key=value, got {item!r}")
        out[key.strip()] = _parse_value(raw)
    return out


def build_config(cls, base: dict | None, config_path, flags: dict, overrides: dict):
    """Layer the configuration sources onto dataclass ``cls``."""
    known = {f.name for f in dataclasses.fields(cls)}
    merged = dict(base or {})
    if config_path is not None:
        path = Path(config_path)
        try:
            file_cfg = json.loads(path.read_text())
        except FileNotFoundError:
            raise UsageError(f"--config: no such file {path}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"--config: {path} is not valid JSON ({e})") from None
        if not isinstance(file_cfg, dict):
            raise UsageError(f"--config: {path} must hold a JSON object")
        merged.update(file_cfg)
    if "seed" in known and os.environ.get(SEED_ENV):
        try:
            merged["seed"] = int(os.environ[SEED_ENV])
        except ValueError:
            raise UsageError(f"{SEED_ENV}: expected an integer, got {os.environ[SEED_ENV]!r}") from None
    merged.update({k: v for k, v in flags.items() if v is not None})
    merged.update(overrides)
    unknown = sorted(set(merged) - known)
    if unknown:
        raise UsageError(f"--set/--config: unknown keys {', '.join(unknown)}")
    try:
        return cls(**merged)
    except (TypeError, ValueError) as e:
        raise UsageError(f"--set/--config: {e}") from None


def _emit(obj):
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    sys.stdout.flush()


def _require_dir(path, flag):
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{flag}: {p} does not exist")
    return p


def _out_dir(args, default):
    p = Path(args.out or default)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _to_png(path, array):
    Image.fromarray(array).save(path)
    return str(path)


def heatmap(err: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Black-red-yellow-white ramp of a 2-D error map as uint8 RGB."""
    vmax = vmax or float(err.max()) or 1.0
    x = np.clip(err / vmax, 0, 1)
    rgb = np.stack([np.clip(3 * x, 0, 1), np.clip(3 * x - 1, 0, 1), np.clip(3 * x - 2, 0, 1)], -1)
    return (rgb * 255).round().astype(np.uint8)


# -- subcommands ---------------------------------------------------------------

def cmd_synth(args):
    from .data import SyntheticSceneConfig, synth_generate

    flags = {"n_frames": args.frames, "geometry": args.geometry, "blob_count": args.blobs}
    if args.size:
        flags["width"], flags["height"] = parse_size(args.size)
    cfg = build_config(SyntheticSceneConfig, None, args.config, flags, parse_overrides(args.set))
    out = _out_dir(args, "synthetic")
    seq = synth_generate(cfg)
    path = seq.save(out / "sequence_000")
    log.info("wrote %d frames to %s", len(seq.images), path)
    _emit({"path": str(path), "frames": len(seq.images), "geometry": cfg.geometry,
           "width": cfg.width, "height": cfg.height, "blob_count": cfg.blob_count})


def cmd_train(args):
    from .data import load_dataset
    from .trainer import TrainConfig, train

    base = None
    if args.resume:
        from .checkpoint import load_checkpoint
        base = load_checkpoint(args.resume).extra.get("train_config")
    cfg = build_config(TrainConfig, base, args.config, {"epochs": args.epochs}, parse_overrides(args.set))
    data = _require_dir(args.data, "--data")
    dataset = load_dataset(data)
    if not dataset:
        raise ValueError(f"--data: {data} holds no frame triplets")
    out = _out_dir(args, "run")
    log.info("training on %d triplets, %d epochs", len(dataset), cfg.epochs)
    trainer = train(dataset, cfg, out, resume=args.resume)
    final = out / "final.ckpt"
    _emit({"checkpoint": str(final), "steps": trainer.step, "epochs": trainer.epoch,
           "log": str(out / "log.jsonl"), "config": cfg.to_dict()})


def _load_trainer(args):
    from .checkpoint import load_checkpoint
    from .trainer import TrainConfig, Trainer

    if args.checkpoint is None:
        raise UsageError("--checkpoint is required")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"--checkpoint: {ckpt} does not exist")
    base = load_checkpoint(ckpt).extra.get("train_config")
    cfg = build_config(TrainConfig, base, args.config, {}, parse_overrides(args.set))
    return Trainer.from_checkpoint(ckpt, cfg)


def cmd_eval(args):
    from .data import load_dataset
    from .trainer import evaluate

    trainer = _load_trainer(args)
    dataset = load_dataset(_require_dir(args.data, "--data"))
    if not dataset:
        raise ValueError(f"--data: {args.data} holds no frame triplets")
    _emit(evaluate(trainer, dataset, fps_iters=args.iters, fps_warmup=args.warmup, profile=not args.no_profile))


def cmd_profile(args):
    from .metrics import profile_model
    from .network import EncoderConfig, EndoDepthL

    w, h = parse_size(args.input)
    if args.checkpoint:
        model = _load_trainer(args).model
        w, h = model.cfg.width, model.cfg.height
    else:
        torch.manual_seed(0)
        model = EndoDepthL(EncoderConfig(args.mode, w, h))
    report = profile_model(model, (1, 3, h, w), warmup=args.warmup, iters=args.iters, repeats=args.repeats)
    _emit(report.to_dict())


def cmd_mask(args):
    from .data import read_image
    from .reflection import confidence_mask, parse_tau_strategy

    if args.image is None:
        raise UsageError("--image is required")
    parse_tau_strategy(args.tau)
    img = read_image(_require_dir(args.image, "--image")).unsqueeze(0)
    m = confidence_mask(img, args.tau, args.k)[0, 0].numpy()
    out = _out_dir(args, ".")
    path = _to_png(out / "mask.png", (m * 255).round().astype(np.uint8))
    _emit({"mask": path, "suppressed_fraction": float((m < 0.5).mean()), "tau": args.tau, "k": args.k})


def cmd_warp(args):
    from .data import load_dataset
    from .geometry import synthesize_view
    from .losses import photometric_error

    dataset = load_dataset(_require_dir(args.data, "--data"))
    by_index = {t.index: t for t in dataset}
    if args.frame not in by_index:
        raise ValueError(f"--frame: {args.frame} is not a target frame (choose from {sorted(by_index)})")
    t = by_index[args.frame]
    source = t.prev if args.source == "prev" else t.next
    if args.checkpoint:
        trainer = _load_trainer(args)
        with torch.no_grad():
            depth = trainer.predict_depth(t.target.unsqueeze(0))
            pose = trainer.model.pose(t.target.unsqueeze(0), source.unsqueeze(0))
    else:
        pose = t.pose_prev if args.source == "prev" else t.pose_next
        if t.gt_depth is None or pose is None:
            raise ValueError(f"--data: frame {args.frame} lacks depth or poses; pass --checkpoint")
        depth, pose = t.gt_depth.unsqueeze(0), pose.unsqueeze(0)
    with torch.no_grad():
        warped, valid = synthesize_view(source.unsqueeze(0), depth, pose, t.intrinsics)
        err = photometric_error(t.target.unsqueeze(0), warped, valid)[0, 0].numpy()
    out = _out_dir(args, ".")
    recon = (warped[0].permute(1, 2, 0).clamp(0, 1).numpy() * 255).round().astype(np.uint8)
    v = valid[0, 0].numpy()
    _emit({
        "reconstruction": _to_png(out / "reconstruction.png", recon),
        "error_heatmap": _to_png(out / "error.png", heatmap(err)),
        "mean_abs_error": float(err[v].mean()) if v.any() else None,
        "valid_fraction": float(v.mean()),
    })


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file of configuration values")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one value (repeatable)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("-q", "--quiet", action="store_true")

    p = _Parser(prog="endodepthl", description="Self-supervised monocular depth toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic sequence")
    s.add_argument("--frames", type=int)
    s.add_argument("--geometry")
    s.add_argument("--blobs", type=int, help="specular blob count")
    s.add_argument("--size", help="WxH")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train on a dataset")
    s.add_argument("--data")
    s.add_argument("--epochs", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="accuracy and complexity of a checkpoint")
    s.add_argument("--data")
    s.add_argument("--checkpoint")
    s.add_argument("--iters", type=int, default=10)
    s.add_argument("--warmup", type=int, default=1)
    s.add_argument("--no-profile", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("profile", parents=[common], help="parameters, FLOPs and FPS")
    s.add_argument("--mode", default="efficiency", choices=["efficiency", "performance"])
    s.add_argument("--input", default="320x256", help="WxH")
    s.add_argument("--checkpoint")
    s.add_argument("--iters", type=int, default=20)
    s.add_argument("--warmup", type=int, default=3)
    s.add_argument("--repeats", type=int, default=3)
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("mask", parents=[common], help="write a confidence-mask preview PNG")
    s.add_argument("--image")
    s.add_argument("--tau", default="percentile(95)")
    s.add_argument("--k", type=float, default=50.0)
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("warp", parents=[common], help="reconstruct a frame from a neighbour")
    s.add_argument("--data")
    s.add_argument("--frame", type=int, default=1)
    s.add_argument("--source", choices=["prev", "next"], default="next")
    s.add_argument("--checkpoint", help="use predicted depth/pose instead of ground truth")
    s.set_defaults(func=cmd_warp)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run_cli())
