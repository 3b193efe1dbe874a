"""Radar Fusion - command-line entry point.

Usage: radar-fusion <command> [--config FILE] [--seed N] [--threads N] [--out-dir DIR]

Commands: ingest, synth, forward, analyze-blur, eval, dump-weights.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from radar_fusion import __version__
from radar_fusion.config import (
    DEFAULT_OUT_DIR,
    RunConfig,
    atomic_write_json,
    config_hash,
    debug,
    load_config,
)
from radar_fusion.dataset_io import (
    crop_range,
    format_labels,
    load_labels,
    write_frame,
    write_pyramid,
)
from radar_fusion.errors import ConfigError, DataError, FusionError
from radar_fusion.eval_metrics import (
    IOU_FUNCTIONS,
    BlurPointClass,
    EvalConfig,
    apply_regime,
    blur_curves,
    classify_blur_points,
    compute_ap,
    instance_ratio_table,
    instance_ratios,
    match_detections,
    write_ap_table_csv,
    write_blur_curves_csv,
    write_instance_ratio_csv,
    write_pr_curve_csv,
)
from radar_fusion.nn_kernels import FeaturePyramid, write_weights
from radar_fusion.pipeline import (
    forward_frame,
    grid_spec,
    load_frames,
    load_model,
    loss_summary,
    passthrough_detections,
    point_scores,
    run_frames,
)
from radar_fusion.semantic_head import write_scores_csv
from radar_fusion.voxel_grid import voxelize

logger = logging.getLogger("radar-fusion")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _sha256_file(path: Path, chunk_size: int = 65536) -> str:
    """Compute the hex SHA256 of a file."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while chunk := f.read(chunk_size):
            h.update(chunk)
    return h.hexdigest()


def _setup_logging(verbose: bool) -> None:
    level = logging.DEBUG if verbose else logging.INFO
    logger.setLevel(level)
    if not any(getattr(h, "_radar_fusion", False) for h in logger.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        handler._radar_fusion = True  # type: ignore[attr-defined]
        logger.addHandler(handler)
    for h in logger.handlers:
        h.setLevel(level if verbose else logging.WARNING)


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file (or synthetic defaults) with --seed/--threads applied on top."""
    cfg = load_config(Path(args.config) if args.config else None)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg.threads = args.threads
    return cfg


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out_dir) if args.out_dir else DEFAULT_OUT_DIR
    out.mkdir(parents=True, exist_ok=True)
    return out


def _in_channels(cfg: RunConfig) -> int:
    return len(cfg.preset.schema)


# ---------------------------------------------------------------------------
# Library entry points
# ---------------------------------------------------------------------------


def run_forward(cfg: RunConfig, out_dir: Path) -> dict:
    """Run every frame and write BEV maps, scores, detections and the manifest."""
    frames = load_frames(cfg)
    model = load_model(cfg, _in_channels(cfg))
    results = run_frames(lambda fr: forward_frame(fr, model, cfg), frames, cfg.threads)

    classes = cfg.preset.classes
    files: dict[str, dict[str, str]] = {}
    for res in results:
        frame_dir = out_dir / res.frame_id
        written = {"bev.pyr": frame_dir / "bev.pyr"}
        write_pyramid(written["bev.pyr"], FeaturePyramid((res.bev.data,)))
        if res.seg is not None:
            written["scores.csv"] = frame_dir / "scores.csv"
            write_scores_csv(written["scores.csv"], res.seg_tensor, res.seg)
        det_path = out_dir / "detections" / f"{res.frame_id}.txt"
        det_path.parent.mkdir(parents=True, exist_ok=True)
        det_path.write_text(format_labels(res.detections, classes))
        written[f"detections/{res.frame_id}.txt"] = det_path
        files[res.frame_id] = {name: _sha256_file(p) for name, p in sorted(written.items())}

    manifest = {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "variant": cfg.variant,
        "dataset": cfg.dataset,
        "versions": {"radar_fusion": __version__, "numpy": np.__version__},
        "bev_shape": list(results[0].bev.data.shape) if results else [],
        "loss": loss_summary(results, cfg),
        "frames": files,
    }
    atomic_write_json(out_dir / "manifest.json", manifest)
    debug(f"forward: {len(results)} frames -> {out_dir}")
    return manifest


def analyze_blur(cfg: RunConfig, out_dir: Path) -> dict:
    """Blur curves over all frames plus the per-class instance ratio table."""
    frames = load_frames(cfg)
    if not any(b.box2d is not None for fr in frames for b in fr.boxes):
        raise DataError("analyze-blur needs labels with 2D regions (u1 v1 u2 v2)")
    model = load_model(cfg, _in_channels(cfg))
    results = run_frames(lambda fr: forward_frame(fr, model, cfg), frames, cfg.threads)
    if any(r.seg is None for r in results):
        raise ConfigError("analyze-blur needs a semantic head: set fusion.n_fusion >= 1 or head.attach_stage")

    all_scores, all_classes, ratio_rows = [], [], []
    for fr, res in zip(frames, results):
        xyz = res.points.xyz
        regions = [b.box2d for b in fr.boxes if b.box2d is not None]
        all_classes.append(classify_blur_points(xyz, regions, fr.boxes, fr.calib))
        all_scores.append(point_scores(xyz, res.seg_tensor, res.seg.scores))
        ratio_rows.extend(instance_ratios(xyz, fr.boxes, fr.calib))

    classes = np.concatenate(all_classes)
    scores = np.concatenate(all_scores)
    counts = {c.name.lower(): int((classes == c).sum()) for c in BlurPointClass}
    curves = blur_curves(scores, classes, cfg.eval.tau_step)
    if curves is None:
        logger.warning("no 2D-foreground points; blur curves are absent")
    else:
        write_blur_curves_csv(out_dir / "blur_curves.csv", curves)
    table = instance_ratio_table(ratio_rows, cfg.preset.classes)
    write_instance_ratio_csv(out_dir / "instance_ratios.csv", table)
    return {"counts": counts, "curves": curves, "ratios": table}


def _eval_thresholds(cfg: RunConfig) -> dict[int, float]:
    thresholds = cfg.class_thresholds
    missing = [c for c in cfg.preset.classes if c not in thresholds]
    if missing:
        raise ConfigError(f"missing IoU threshold for classes {missing}")
    return {i: thresholds[c] for i, c in enumerate(cfg.preset.classes)}


def evaluate(cfg: RunConfig, out_dir: Path, detections_dir: Path | None = None) -> list[dict]:
    """Per-class AP for every configured regime and sampler; writes ap_table.csv."""
    thresholds = _eval_thresholds(cfg)
    iou_kind = cfg.eval.iou_kind or cfg.preset.iou_kind
    max_range = cfg.eval.max_range if cfg.eval.max_range is not None else cfg.preset.max_range
    det_dir = detections_dir or (Path(cfg.eval.detections_dir) if cfg.eval.detections_dir else None)
    classes = cfg.preset.classes

    frames = load_frames(cfg)
    pairs = []
    for fr in frames:
        if det_dir is not None:
            path = det_dir / f"{fr.frame_id}.txt"
            dets = load_labels(path, classes) if path.exists() else []
            if not path.exists():
                logger.warning("no detections file for frame %s", fr.frame_id)
        else:
            dets = passthrough_detections(cfg, fr)
        pairs.append((fr, dets))

    rows = []
    for regime in cfg.eval.regimes:
        base = EvalConfig(thresholds, regime, 11, cfg.eval.corridor, iou_kind, max_range)
        filtered = [
            (apply_regime(dets, fr.calib, base), apply_regime(fr.boxes, fr.calib, base))
            for fr, dets in pairs
        ]
        for class_id, name in enumerate(classes):
            curve = match_detections(filtered, class_id, thresholds[class_id], IOU_FUNCTIONS[iou_kind])
            if curve.n_gt:
                write_pr_curve_csv(out_dir / f"pr_{regime}_{name}.csv", curve)
        for pts in cfg.eval.ap_points:
            ap = compute_ap(filtered, None, EvalConfig(thresholds, regime, pts, cfg.eval.corridor, iou_kind, max_range))
            for class_id, name in enumerate(classes):
                if class_id in ap:
                    rows.append({"class": name, "regime": regime, "iou_kind": iou_kind, "ap_points": pts, "ap": ap[class_id]})
    write_ap_table_csv(out_dir / "ap_table.csv", rows)
    return rows


# ---------------------------------------------------------------------------
# Command handlers
# ---------------------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace) -> None:
    """Load and validate a dataset root, reporting per-frame counts."""
    cfg = _resolve_config(args)
    if args.data_root:
        cfg.data_root = args.data_root
    if not cfg.data_root:
        raise ConfigError("ingest needs a dataset root (--data-root or data_root in the config)")
    spec = grid_spec(cfg)
    summary = {}
    print(f"{'frame':<12} {'points':>8} {'in range':>9} {'voxels':>8} {'boxes':>6} {'pyramid':>8}")
    for fr in load_frames(cfg):
        cropped = crop_range(fr.pointcloud, spec.range)
        tensor, _ = voxelize(cropped, spec)
        row = {
            "points": len(fr.pointcloud),
            "in_range": len(cropped),
            "voxels": len(tensor),
            "boxes": len(fr.boxes),
            "pyramid": fr.pyramid is not None,
        }
        summary[fr.frame_id] = row
        print(
            f"{fr.frame_id:<12} {row['points']:>8} {row['in_range']:>9} {row['voxels']:>8} "
            f"{row['boxes']:>6} {'yes' if row['pyramid'] else 'no':>8}"
        )
    atomic_write_json(_out_dir(args) / "ingest.json", {"data_root": cfg.data_root, "frames": summary})


def cmd_synth(args: argparse.Namespace) -> None:
    """Write synthetic scenes in the dataset layout."""
    cfg = _resolve_config(args)
    cfg.data_root = ""
    if args.frames is not None:
        cfg.synthetic.n_frames = args.frames
    out = _out_dir(args)
    frames = load_frames(cfg)
    for fr in frames:
        write_frame(out, fr, cfg.preset.classes)
    print(f"Wrote {len(frames)} synthetic frame(s) (seed {cfg.seed}) to {out}")


def cmd_forward(args: argparse.Namespace) -> None:
    """Run the fusion pipeline and write artifacts plus a manifest."""
    cfg = _resolve_config(args)
    out = _out_dir(args)
    manifest = run_forward(cfg, out)
    print(f"Processed {len(manifest['frames'])} frame(s), BEV {tuple(manifest['bev_shape'])}")
    print(f"  config hash: {manifest['config_hash']}")
    print(f"  L_seg: {manifest['loss']['l_seg']:.6f}  total: {manifest['loss']['total']:.6f}")
    print(f"  manifest: {out / 'manifest.json'}")


def cmd_analyze_blur(args: argparse.Namespace) -> None:
    """Feature-blurring diagnostics: point classes, blur curves, instance ratios."""
    cfg = _resolve_config(args)
    out = _out_dir(args)
    result = analyze_blur(cfg, out)
    counts = result["counts"]
    print(
        f"Points: {counts['fore3d']} 3D foreground, {counts['fore2d_blurred']} blurred, "
        f"{counts['background']} background"
    )
    curves = result["curves"]
    if curves is None:
        print("Blur curves: absent (no 2D-foreground points)")
    else:
        for t in (0.0, 0.25, 0.5, 0.75):
            k = int(round(t / cfg.eval.tau_step))
            print(f"  tau={t:.2f}  r_blur={curves.r_blur[k]:.4f}  r_fore={curves.r_fore[k]:.4f}")
    for name, ratio in result["ratios"].items():
        print(f"  {name:<12} mean fore3d/fore2d = {ratio:.4f}")


def cmd_eval(args: argparse.Namespace) -> None:
    """Average precision per class, regime and sampler."""
    cfg = _resolve_config(args)
    out = _out_dir(args)
    rows = evaluate(cfg, out, Path(args.detections) if args.detections else None)
    if not rows:
        print("No class has ground truth; nothing to evaluate.")
        return
    print(f"{'class':<12} {'regime':<6} {'iou':<4} {'points':>6} {'AP':>8}")
    for row in rows:
        print(f"{row['class']:<12} {row['regime']:<6} {row['iou_kind']:<4} {row['ap_points']:>6} {100 * row['ap']:>8.2f}")


def cmd_dump_weights(args: argparse.Namespace) -> None:
    """Write the seeded (or loaded) model parameters to a weights container."""
    cfg = _resolve_config(args)
    tensors = load_model(cfg, _in_channels(cfg)).to_named_tensors()
    path = _out_dir(args) / "weights.rfw"
    write_weights(path, tensors)
    if args.list:
        for name, arr in tensors.items():
            print(f"  {name:<48} {tuple(arr.shape)}")
    total = sum(int(a.size) for a in tensors.values())
    print(f"Wrote {len(tensors)} tensors ({total} parameters) to {path}")


# ---------------------------------------------------------------------------
# Main
# ---------------------------------------------------------------------------


def main(argv: list[str] | None = None) -> None:
    """Main entry point for the radar-fusion CLI."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (default: synthetic preset)")
    common.add_argument("--seed", type=int, help="Override the config seed")
    common.add_argument("--threads", type=int, help="Frames processed in parallel")
    common.add_argument("--out-dir", dest="out_dir", help=f"Output directory (default: {DEFAULT_OUT_DIR})")
    common.add_argument("--verbose", "-v", action="store_true", help="Debug logging to stderr")

    parser = argparse.ArgumentParser(
        prog="radar-fusion",
        description="4D radar / camera sampling fusion toolkit",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    subparsers = parser.add_subparsers(dest="command")

    # --- ingest ---
    p = subparsers.add_parser("ingest", parents=[common], help="Validate a dataset root")
    p.add_argument("--data-root", dest="data_root", help="Dataset root (overrides the config)")
    p.set_defaults(func=cmd_ingest)

    # --- synth ---
    p = subparsers.add_parser("synth", parents=[common], help="Write synthetic scenes to disk")
    p.add_argument("--frames", type=int, help="Number of frames (overrides synthetic.n_frames)")
    p.set_defaults(func=cmd_synth)

    # --- forward ---
    p = subparsers.add_parser("forward", parents=[common], help="Run the fusion pipeline")
    p.set_defaults(func=cmd_forward)

    # --- analyze-blur ---
    p = subparsers.add_parser("analyze-blur", parents=[common], help="Feature-blurring diagnostics")
    p.set_defaults(func=cmd_analyze_blur)

    # --- eval ---
    p = subparsers.add_parser("eval", parents=[common], help="Average precision tables")
    p.add_argument("--detections", help="Directory of <frame_id>.txt detection files")
    p.set_defaults(func=cmd_eval)

    # --- dump-weights ---
    p = subparsers.add_parser("dump-weights", parents=[common], help="Write model parameters")
    p.add_argument("--list", action="store_true", help="Print every tensor name and shape")
    p.set_defaults(func=cmd_dump_weights)

    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        sys.exit(0)

    _setup_logging(args.verbose)
    try:
        args.func(args)
    except FusionError as e:
        print(f"error: {e}", file=sys.stderr)
        sys.exit(e.exit_code)


if __name__ == "__main__":
    main()
