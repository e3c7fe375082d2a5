"""Command-line entry point: ``xmatch <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import cv2
import numpy as np
import torch

from ._validation import InputError, TrainingAbort, ValidationError
from .augment import augment_pipeline
from .config import RunConfig, read_config_file, resolve_config, write_snapshot
from .data_io import (build_synthetic_pair, load_descriptor, load_pair, pad_to_multiple,
                      read_calib, read_image, relative_pose, scan_dataset, to_gray, write_image)
from .estimator import CrossModalMatcher, MaskedPretrainer, match_pair
from .evalkit import (CORNER_THRESHOLDS, POSE_THRESHOLDS, PoseErrorRecord, corner_error,
                      estimate_homography, evaluate_pose, write_report)
from .model import ARCH_KEYS, ModelConfig, load_checkpoint, read_checkpoint
from .subpixel import read_match_file, write_match_file
from .toy import benchmark, make_records

log = logging.getLogger("xmatch")

# flag name -> (config key, type)
_VALUE_FLAGS = {
    "--profile": ("profile", str),
    "--seed": ("seed", int),
    "--theta-c": ("theta_c", float),
    "--theta-f": ("theta_f", float),
    "--tau": ("tau", float),
    "--epochs": ("epochs", int),
    "--lr": ("lr", float),
    "--batch-size": ("batch_size", int),
}
# ablation switches, each turning a config key off (or on for one_to_one_only)
_SWITCHES = {
    "--no-pretrain": ("pretrain", False),
    "--no-augment": ("augment", False),
    "--one-to-one-only": ("one_to_one_only", True),
    "--no-sprm": ("use_sprm", False),
    "--no-theta-f": ("use_theta_f", False),
    "--no-positional-bias": ("positional_bias", False),
}


def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration")
    g.add_argument("--config", type=Path, help="flat 'key = value' config file")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    for flag, (key, kind) in _VALUE_FLAGS.items():
        g.add_argument(flag, dest=key, type=kind, default=None)
    a = p.add_argument_group("ablations")
    for flag, (key, _) in _SWITCHES.items():
        a.add_argument(flag, dest=f"switch_{key}", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="xmatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("pretrain", parents=[common], help="masked-image-modeling pre-training")
    p.add_argument("--data", type=Path, required=True, help="aligned dataset root (vis/, tir/)")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--sheets", type=Path, default=None, help="contact-sheet directory")

    p = sub.add_parser("finetune", parents=[common], help="train the matcher")
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--layout", choices=("posed", "aligned", "toy"), default="toy")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--init", type=Path, default=None, help="pre-trained checkpoint")

    p = sub.add_parser("match", parents=[common], help="match one image pair")
    p.add_argument("--pair", nargs=2, type=Path, required=True, metavar=("A", "B"))
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval-pose", parents=[common], help="relative-pose AUC over match files")
    p.add_argument("--matches", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True, help="calib.txt with intrinsics and poses")
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("eval-homography", parents=[common], help="corner-error AUC over match files")
    p.add_argument("--matches", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True, help="lines: pair_id w h + 9 homography values")
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("augment-preview", parents=[common], help="contact sheet of augmentations")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--grid", default="3x3")
    p.add_argument("--out", type=Path, required=True)
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for _, (key, _) in _VALUE_FLAGS.items():
        if getattr(args, key) is not None:
            out[key] = getattr(args, key)
    for _, (key, value) in _SWITCHES.items():
        if getattr(args, f"switch_{key}"):
            out[key] = value
    return out


def _snapshot(cfg: RunConfig, artifact: Path):
    """Resolved config written next to ``artifact`` (or inside it for directories)."""
    artifact = Path(artifact)
    target = artifact / "config.txt" if artifact.is_dir() else artifact.with_name(artifact.name + ".config.txt")
    return write_snapshot(cfg, target)


def _runtime_net(weights: Path, cfg: RunConfig, explicit: set):
    """Network from ``weights``; runtime switches come from the checkpoint unless set explicitly."""
    _, _, meta = read_checkpoint(weights)
    stored = ModelConfig.from_dict(meta["config"])
    requested = cfg.model_config()
    updates = {k: getattr(requested, k) for k in explicit
               if hasattr(requested, k) and k not in ARCH_KEYS}
    if "positional_bias" in explicit and requested.positional_bias != stored.positional_bias:
        raise ValidationError(f"{weights} was trained with positional_bias={stored.positional_bias}")
    net = load_checkpoint(weights, replace(stored, **updates))
    net.eval()
    return net


# -- subcommands -------------------------------------------------------------------

def _cmd_pretrain(args, cfg, explicit):
    descs = scan_dataset(args.data, "aligned")
    if not descs:
        raise InputError(f"no aligned pairs under {args.data}")
    pairs = []
    for d in descs:
        pair = load_descriptor(d, max_side=cfg.max_side)
        a, _ = pad_to_multiple(pair.image_a, cfg.mask_patch)
        b, _ = pad_to_multiple(pair.image_b, cfg.mask_patch)
        if a.shape != b.shape:
            raise ValidationError(f"pair {d.pair_id}: images are not co-registered ({a.shape} vs {b.shape})")
        pairs.append((a, b))
    shapes = {a.shape for a, _ in pairs}
    if len(shapes) > 1:
        raise ValidationError(f"pre-training pairs must share one size, got {sorted(shapes)}")

    if args.steps is not None:
        cfg = replace(cfg, mim_steps=args.steps)
    est = MaskedPretrainer.from_config(cfg)
    sheets = args.sheets
    if sheets is not None:
        sheets.mkdir(parents=True, exist_ok=True)
        _snapshot(cfg, sheets)

    def callback(step, net, history):
        if step % 50 == 0:
            log.info("step %d loss %.5f", step, history[-1])
        if sheets is not None and (step + 1) % cfg.sheet_every == 0:
            est.net_ = net
            write_image(sheets / f"step_{step + 1:06d}.png", _recon_sheet(est, pairs[0], cfg.seed))
            net.train()

    est.fit(pairs, callback=callback)
    path = est.save(args.out)
    _snapshot(cfg, path)
    print(f"pretrain: final masked MSE {est.history_[-1]:.5f}; checkpoint {path}")
    return 0


def _recon_sheet(est, pair, seed):
    a, b = pair
    ra, rb, ma, mb = est.reconstruct(a, b, seed)
    rows = []
    for img, rec, m in ((a, ra, ma), (b, rb, mb)):
        masked = np.where(m, 0.0, img)
        filled = np.where(m, np.clip(rec, 0, 1), img)
        rows.append(np.concatenate([masked, filled, img], axis=1))
    return np.concatenate(rows, axis=0)


def _finetune_data(args, cfg):
    if args.layout == "toy":
        return make_records(cfg.n_synthetic, cfg.max_side, cfg.seed)
    if args.data is None:
        raise ValidationError(f"--data is required for layout {args.layout!r}")
    descs = scan_dataset(args.data, args.layout)
    if not descs:
        raise InputError(f"no pairs under {args.data}")
    if args.layout == "posed":
        calib = read_calib(args.data / "calib.txt")
        return [load_descriptor(d, calib, cfg.max_side) for d in descs]
    # aligned: each visible image gives one synthetic homography pair
    out = []
    for k, d in enumerate(descs):
        rgb = read_image(d.path_a, gray=False)
        side = cfg.max_side / max(rgb.shape[:2])
        h, w = (int(round(v * side)) // 8 * 8 for v in rgb.shape[:2])
        rgb = np.clip(cv2.resize(rgb, (w, h), interpolation=cv2.INTER_AREA), 0, 1)
        out.append(build_synthetic_pair(to_gray(rgb), seed=cfg.seed + k, rgb=rgb))
    return out


def _cmd_finetune(args, cfg, explicit):
    init = args.init if cfg.pretrain else None
    if args.init is not None and not cfg.pretrain:
        warnings.warn("--no-pretrain given; ignoring --init", stacklevel=1)
    data = _finetune_data(args, cfg)
    est = CrossModalMatcher.from_config(cfg, init_weights=init)

    def callback(epoch, net, history):
        log.info("epoch %d loss %.4f", epoch, history[-1]["loss"])

    est.fit(data, callback=callback)
    extra = {"layout": args.layout, "pairs": len(data)}
    if args.layout in ("toy", "aligned"):
        bench = benchmark(data, seed=cfg.seed + 10_000, params=cfg.augment_params())
        extra["benchmark_precision"] = est.score(bench, threshold=cfg.homography_threshold_px)
        print(f"finetune: cross-modal match precision {extra['benchmark_precision']:.4f}")
    path = est.save(args.out, extra)
    _snapshot(cfg, path)
    print(f"finetune: checkpoint {path}")
    return 0


def _cmd_match(args, cfg, explicit):
    net = _runtime_net(args.weights, cfg, explicit)
    pair = load_pair(args.pair[0], args.pair[1], max_side=cfg.max_side)
    matches = match_pair(net, pair)
    path = write_match_file(args.out, matches)
    _snapshot(cfg, path)
    print(f"match: {len(matches)} matches written to {path}")
    return 0


def _cmd_eval_pose(args, cfg, explicit):
    calib = read_calib(args.gt)
    files = sorted(args.matches.glob("*.txt")) if args.matches.is_dir() else []
    files = [f for f in files if "__" in f.stem and not f.name.endswith(".config.txt")]
    if not files:
        raise InputError(f"no '<idA>__<idB>.txt' match files in {args.matches}")
    records = []
    for f in files:
        id_a, id_b = f.stem.split("__", 1)
        for i in (id_a, id_b):
            if i not in calib:
                raise ValidationError(f"{args.gt}: no calibration for image id '{i}'")
        (K_a, T_a), (K_b, T_b) = calib[id_a], calib[id_b]
        m = read_match_file(f)
        records.append(evaluate_pose(m, K_a, K_b, relative_pose(T_a, T_b), f.stem,
                                     cfg.pose_threshold_px, cfg.seed))
    out = args.out or args.matches / "pose_report.txt"
    aucs = write_report(out, records, POSE_THRESHOLDS, "deg")
    _snapshot(cfg, Path(out))
    print("eval-pose: " + "  ".join(f"AUC@{t:g}deg={a:.2f}" for t, a in aucs.items()))
    return 0


def _read_homographies(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"homography file not found: {path}")
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        if len(parts) != 12:
            raise ValidationError(f"{path}:{n}: expected 'pair_id w h' + 9 values")
        vals = [float(v) for v in parts[1:]]
        out[parts[0]] = ((int(vals[1]), int(vals[0])), np.array(vals[2:]).reshape(3, 3))
    return out


def _cmd_eval_homography(args, cfg, explicit):
    gt = _read_homographies(args.gt)
    if not gt:
        raise InputError(f"{args.gt} lists no pairs")
    records = []
    for pair_id in sorted(gt):
        dims, H = gt[pair_id]
        f = args.matches / f"{pair_id}.txt"
        if f.is_file():
            m = read_match_file(f)
            H_est = estimate_homography(m.xy_a, m.xy_b, cfg.homography_threshold_px, cfg.seed)
            n = len(m)
        else:
            warnings.warn(f"no match file for {pair_id}; scored as failure", stacklevel=1)
            H_est, n = None, 0
        records.append({"pair_id": pair_id, "matches": n, "error": corner_error(H_est, H, dims)})
    out = args.out or args.matches / "homography_report.txt"
    aucs = write_report(out, records, CORNER_THRESHOLDS, "px")
    _snapshot(cfg, Path(out))
    print("eval-homography: " + "  ".join(f"AUC@{t:g}px={a:.2f}" for t, a in aucs.items()))
    return 0


def _cmd_augment_preview(args, cfg, explicit):
    try:
        rows, cols = (int(v) for v in args.grid.lower().split("x"))
    except ValueError:
        raise ValidationError(f"--grid expects RxC, got {args.grid!r}") from None
    if rows < 1 or cols < 1:
        raise ValidationError("--grid needs at least one row and column")
    rgb = read_image(args.input, gray=False)
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[..., None], 3, axis=2)
    params = cfg.augment_params()
    tiles = [augment_pipeline(rgb, cfg.seed + k, params) for k in range(rows * cols)]
    sheet = np.concatenate([np.concatenate(tiles[r * cols:(r + 1) * cols], axis=1) for r in range(rows)], axis=0)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_image(args.out, sheet)
    _snapshot(cfg, args.out)
    print(f"augment-preview: {rows * cols} variants written to {args.out}")
    return 0


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "match": _cmd_match,
    "eval-pose": _cmd_eval_pose,
    "eval-homography": _cmd_eval_homography,
    "augment-preview": _cmd_augment_preview,
}


def run_command(argv=None) -> int:
    """Parse ``argv`` and run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        overrides = _overrides(args)
        from_file = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(args.config, overrides)
    except ValidationError as exc:
        parser.print_usage(sys.stderr)
        print(f"xmatch: error: {exc}", file=sys.stderr)
        return 2
    except InputError as exc:
        print(f"xmatch: error: {exc}", file=sys.stderr)
        return 1
    explicit = set(overrides) | set(from_file)
    torch.manual_seed(cfg.seed)
    try:
        return _COMMANDS[args.command](args, cfg, explicit)
    except (InputError, ValidationError, TrainingAbort, OSError, RuntimeError) as exc:
        print(f"xmatch {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # unexpected failure: keep the diagnostic, still exit 1
        log.debug("unhandled error", exc_info=True)
        print(f"xmatch {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main(argv=None):
    sys.exit(run_command(argv))


if __name__ == "__main__":
    main()
