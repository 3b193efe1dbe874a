"""Rotated-box IoU, interpolated AP, evaluation regions and blur diagnostics.

AP follows the KITTI convention: detections are visited in descending
score order (ties by frame, then detection index) and each takes the
highest-IoU unmatched ground truth of its class at or above the class
threshold. Interpolated precision at recall r is the best precision at any
recall >= r, averaged over 11 points (0, 0.1, ..., 1) or 40 points
(1/40, ..., 1). A class with no ground truth has no AP.

Blur diagnostics classify every radar point by where it falls: inside a
2D ground-truth region and a 3D box (3D foreground), inside a 2D region
only (2D foreground, blurred), or neither.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from radar_fusion.dataset_io import Box3D
from radar_fusion.errors import ConfigError
from radar_fusion.geometry import CalibrationSet, project_points

logger = logging.getLogger("radar-fusion")

DC_CORRIDOR = (-4.0, 4.0, 25.0)

# --- Polygon geometry ---


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area (positive for counter-clockwise vertices)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _cross(o: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float((a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: part of ``subject`` inside the convex CCW polygon ``clip``."""
    output = [np.asarray(p, dtype=np.float64) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a, b = clip[i], clip[(i + 1) % n]
        polygon, output = output, []
        s = polygon[-1]
        cs = _cross(a, b, s)
        for e in polygon:
            ce = _cross(a, b, e)
            if ce >= 0:
                if cs < 0:
                    output.append(s + (e - s) * (cs / (cs - ce)))
                output.append(e)
            elif cs >= 0:
                output.append(s + (e - s) * (cs / (cs - ce)))
            s, cs = e, ce
    return np.array(output).reshape(-1, 2)


def _same_box(a: Box3D, b: Box3D) -> bool:
    return a.center == b.center and a.size == b.size and a.yaw == b.yaw


def bev_intersection(a: Box3D, b: Box3D) -> float:
    return max(polygon_area(clip_polygon(a.corners_bev(), b.corners_bev())), 0.0)


def rotated_iou_bev(a: Box3D, b: Box3D) -> float:
    """IoU of the two oriented footprints."""
    if _same_box(a, b):
        return 1.0
    inter = bev_intersection(a, b)
    union = a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter
    if union <= 0.0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def iou_3d(a: Box3D, b: Box3D) -> float:
    """BEV intersection times z-overlap over the union volume."""
    if _same_box(a, b):
        return 1.0
    z_lo = max(a.center[2] - a.size[2] / 2, b.center[2] - b.size[2] / 2)
    z_hi = min(a.center[2] + a.size[2] / 2, b.center[2] + b.size[2] / 2)
    overlap = max(z_hi - z_lo, 0.0)
    if overlap == 0.0:
        return 0.0
    inter = bev_intersection(a, b) * overlap
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


IOU_FUNCTIONS: dict[str, Callable[[Box3D, Box3D], float]] = {
    "3d": iou_3d,
    "bev": rotated_iou_bev,
}


# --- Average precision ---


@dataclass(frozen=True)
class EvalConfig:
    """Per-class thresholds (class_id -> IoU), regime, AP sampler and region."""

    iou_thresholds: dict[int, float]
    regime: str = "EAA"
    ap_points: int = 11
    corridor: tuple[float, float, float] = DC_CORRIDOR
    iou_kind: str = "3d"
    max_range: float | None = None

    def __post_init__(self) -> None:
        for cls, thr in self.iou_thresholds.items():
            if not 0.0 < thr <= 1.0:
                raise ConfigError(f"IoU threshold for class {cls} must lie in (0, 1], got {thr}")
        if self.regime not in ("EAA", "DC"):
            raise ConfigError(f"regime must be EAA or DC, got {self.regime!r}")
        if self.ap_points not in (11, 40):
            raise ConfigError(f"ap_points must be 11 or 40, got {self.ap_points}")
        if self.iou_kind not in IOU_FUNCTIONS:
            raise ConfigError(f"iou_kind must be one of {sorted(IOU_FUNCTIONS)}")


@dataclass
class PRCurve:
    """Cumulative precision/recall after each score-ordered detection."""

    scores: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    n_gt: int
    matched: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))


def recall_samples(ap_points: int) -> np.ndarray:
    if ap_points == 11:
        return np.arange(11) / 10.0
    if ap_points == 40:
        return np.arange(1, 41) / 40.0
    raise ConfigError(f"ap_points must be 11 or 40, got {ap_points}")


def interpolated_ap(curve: PRCurve, ap_points: int) -> float:
    """Mean over recall samples of the best precision at recall >= r."""
    samples = recall_samples(ap_points)
    total = 0.0
    for r in samples:
        reached = curve.precision[curve.recall >= r - 1e-12]
        total += float(reached.max()) if reached.size else 0.0
    return total / samples.size


def match_detections(
    frames: Sequence[tuple[list[Box3D], list[Box3D]]],
    class_id: int,
    threshold: float,
    iou_fn: Callable[[Box3D, Box3D], float] = iou_3d,
) -> PRCurve:
    """Greedy score-ordered matching across frames of (detections, ground truth)."""
    entries = []
    gts_per_frame = []
    for f, (dets, gts) in enumerate(frames):
        gts_per_frame.append([g for g in gts if g.class_id == class_id])
        for d_idx, det in enumerate(dets):
            if det.class_id == class_id:
                entries.append((-det.score, f, d_idx, det))
    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    n_gt = sum(len(g) for g in gts_per_frame)
    used = [np.zeros(len(g), bool) for g in gts_per_frame]

    tp = np.zeros(len(entries), bool)
    for k, (_, f, _, det) in enumerate(entries):
        best, best_iou = -1, threshold
        for g_idx, gt in enumerate(gts_per_frame[f]):
            if used[f][g_idx]:
                continue
            iou = iou_fn(det, gt)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = g_idx, iou
        if best >= 0:
            used[f][best] = True
            tp[k] = True

    cum_tp = np.cumsum(tp)
    ranks = np.arange(1, len(entries) + 1)
    precision = cum_tp / ranks if len(entries) else np.zeros(0)
    recall = cum_tp / n_gt if n_gt else np.zeros(len(entries))
    scores = np.array([-e[0] for e in entries])
    return PRCurve(scores, precision.astype(np.float64), recall.astype(np.float64), n_gt, tp)


def compute_ap(
    dets: list[Box3D] | Sequence[tuple[list[Box3D], list[Box3D]]],
    gts: list[Box3D] | None,
    cfg: EvalConfig,
) -> dict[int, float]:
    """AP per class id; classes without ground truth are absent.

    Pass (dets, gts) for one frame, or a sequence of (dets, gts) frame
    pairs with ``gts=None``.
    """
    frames = [(list(dets), list(gts))] if gts is not None else [(list(d), list(g)) for d, g in dets]
    iou_fn = IOU_FUNCTIONS[cfg.iou_kind]
    result: dict[int, float] = {}
    for class_id, threshold in sorted(cfg.iou_thresholds.items()):
        curve = match_detections(frames, class_id, threshold, iou_fn)
        if curve.n_gt == 0:
            continue
        result[class_id] = interpolated_ap(curve, cfg.ap_points)
    return result


# --- Evaluation regions ---


def corridor_filter(
    boxes: list[Box3D],
    calib: CalibrationSet,
    corridor: tuple[float, float, float] = DC_CORRIDOR,
) -> list[Box3D]:
    """Keep boxes whose camera-frame center has x_min < x < x_max and z < z_max."""
    if not boxes:
        return []
    x_min, x_max, z_max = corridor
    cam = calib.to_camera(np.array([b.center for b in boxes]))
    keep = (cam[:, 0] > x_min) & (cam[:, 0] < x_max) & (cam[:, 2] < z_max)
    return [b for b, k in zip(boxes, keep) if k]


def range_filter(boxes: list[Box3D], max_range: float | None) -> list[Box3D]:
    """Keep boxes whose forward (radar x) distance is within [0, max_range]."""
    if max_range is None:
        return list(boxes)
    return [b for b in boxes if 0.0 <= b.center[0] <= max_range]


def apply_regime(boxes: list[Box3D], calib: CalibrationSet, cfg: EvalConfig) -> list[Box3D]:
    boxes = range_filter(boxes, cfg.max_range)
    if cfg.regime == "DC":
        boxes = corridor_filter(boxes, calib, cfg.corridor)
    return boxes


# --- Blur diagnostics ---


class BlurPointClass(IntEnum):
    BACKGROUND = 0
    FORE2D_BLURRED = 1
    FORE3D = 2


def in_2d_regions(
    points: np.ndarray,
    regions: list[tuple[float, float, float, float]] | np.ndarray,
    calib: CalibrationSet,
) -> np.ndarray:
    """Points whose projection falls in any 2D box (closed, unrounded pixel) or mask pixel."""
    proj = project_points(np.asarray(points, dtype=np.float64).reshape(-1, 3), calib)
    u, v = proj.pixel[:, 0], proj.pixel[:, 1]
    front = proj.valid & (proj.depth > 0)
    if isinstance(regions, np.ndarray) and regions.ndim == 2 and regions.dtype == bool:
        h, w = regions.shape
        col = np.floor(u + 0.5).astype(np.int64)
        row = np.floor(v + 0.5).astype(np.int64)
        ok = front & (col >= 0) & (col < w) & (row >= 0) & (row < h)
        hit = np.zeros(u.shape[0], bool)
        hit[ok] = regions[row[ok], col[ok]]
        return hit
    hit = np.zeros(u.shape[0], bool)
    for u1, v1, u2, v2 in regions:
        hit |= (u >= u1) & (u <= u2) & (v >= v1) & (v <= v2)
    return hit & front


def classify_blur_points(
    points: np.ndarray,
    regions: list[tuple[float, float, float, float]] | np.ndarray,
    gt_boxes: list[Box3D],
    calib: CalibrationSet,
) -> np.ndarray:
    """BlurPointClass value per point."""
    xyz = np.asarray(points, dtype=np.float64)[:, :3]
    in2d = in_2d_regions(xyz, regions, calib)
    in3d = np.zeros(xyz.shape[0], bool)
    for box in gt_boxes:
        in3d |= box.contains(xyz)
    out = np.full(xyz.shape[0], BlurPointClass.BACKGROUND, dtype=np.int64)
    out[in2d & ~in3d] = BlurPointClass.FORE2D_BLURRED
    out[in2d & in3d] = BlurPointClass.FORE3D
    return out


@dataclass(frozen=True, eq=False)
class BlurCurves:
    tau: np.ndarray
    r_blur: np.ndarray
    r_fore: np.ndarray
    n_fore2d: int


def tau_grid(step: float = 0.01) -> np.ndarray:
    n = int(round(1.0 / step))
    return np.arange(n + 1) / n


def blur_curves(scores: np.ndarray, classes: np.ndarray, tau_step: float = 0.01) -> BlurCurves | None:
    """r_blur(t) = n_blur(t) / n_fore2d and r_fore(t) = n_fore3d(t) / n_fore2d.

    Counts at t include scores >= t. None when there is no 2D-foreground point.
    """
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes)
    blurred = np.sort(scores[classes == BlurPointClass.FORE2D_BLURRED])
    fore3d = np.sort(scores[classes == BlurPointClass.FORE3D])
    n_fore2d = blurred.size + fore3d.size
    if n_fore2d == 0:
        return None
    tau = tau_grid(tau_step)
    n_blur = blurred.size - np.searchsorted(blurred, tau, side="left")
    n_fore = fore3d.size - np.searchsorted(fore3d, tau, side="left")
    return BlurCurves(tau, n_blur / n_fore2d, n_fore / n_fore2d, n_fore2d)


def instance_ratios(points: np.ndarray, gt_boxes: list[Box3D], calib: CalibrationSet) -> list[tuple[int, int, int]]:
    """(class_id, n_fore2d, n_fore3d) for every box with a 2D region."""
    xyz = np.asarray(points, dtype=np.float64)[:, :3]
    rows = []
    for box in gt_boxes:
        if box.box2d is None:
            continue
        in2d = in_2d_regions(xyz, [box.box2d], calib)
        rows.append((box.class_id, int(in2d.sum()), int((in2d & box.contains(xyz)).sum())))
    return rows


def instance_ratio_table(rows: list[tuple[int, int, int]], classes: tuple[str, ...]) -> dict[str, float]:
    """Mean n_fore3d / n_fore2d per class over instances with n_fore2d >= 1."""
    table: dict[str, float] = {}
    for class_id, name in enumerate(classes):
        ratios = [f3 / f2 for c, f2, f3 in rows if c == class_id and f2 >= 1]
        if ratios:
            table[name] = float(np.mean(ratios))
    return table


# --- CSV output ---


def write_ap_table_csv(path: Path, rows: list[dict]) -> None:
    """rows: dicts with class, regime, ap_points, ap."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["class", "regime", "iou_kind", "ap_points", "ap"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_pr_curve_csv(path: Path, curve: PRCurve) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["rank", "score", "precision", "recall", "tp"])
        for k in range(curve.scores.size):
            writer.writerow([
                k + 1,
                repr(float(curve.scores[k])),
                repr(float(curve.precision[k])),
                repr(float(curve.recall[k])),
                int(curve.matched[k]),
            ])


def write_blur_curves_csv(path: Path, curves: BlurCurves) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["tau", "r_blur", "r_fore"])
        for t, rb, rf in zip(curves.tau.tolist(), curves.r_blur.tolist(), curves.r_fore.tolist()):
            writer.writerow([f"{t:.2f}", repr(rb), repr(rf)])


def write_instance_ratio_csv(path: Path, table: dict[str, float]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class", "mean_fore3d_over_fore2d"])
        for name, ratio in table.items():
            writer.writerow([name, repr(ratio)])
