"""Foreground scoring of fused voxels and score re-weighting.

A small MLP scores every active voxel after the last fusion block; the
fused features are multiplied by their score before continuing through
the backbone. Supervision labels come from ground-truth boxes: a voxel is
foreground when its centroid lies inside any (closed) box.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from radar_fusion.dataset_io import Box3D
from radar_fusion.errors import DimensionError
from radar_fusion.nn_kernels import AffineLayer, focal_loss, init_mlp, mlp_forward, sigmoid
from radar_fusion.voxel_grid import CentroidMap, SparseTensor

logger = logging.getLogger("radar-fusion")


class SegmentationLoss(NamedTuple):
    value: float
    empty: bool = False


@dataclass(frozen=True, eq=False)
class SegOutput:
    """Scores, optional labels and re-weighted features for one tensor."""

    scores: np.ndarray
    labels: np.ndarray | None
    reweighted: np.ndarray
    loss: SegmentationLoss | None = None


def init_semantic_head(rng: np.random.Generator, channels: int, hidden_layers: int = 2) -> tuple[AffineLayer, ...]:
    """MLP C -> C (x hidden_layers) -> 1."""
    return init_mlp(rng, [channels] * (hidden_layers + 1) + [1])


def assign_foreground_labels(centroids: CentroidMap | np.ndarray, gt_boxes: list[Box3D]) -> np.ndarray:
    """1 where the centroid lies inside any box (faces included), else 0."""
    pts = centroids.centroids if isinstance(centroids, CentroidMap) else np.asarray(centroids)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    inside = np.zeros(pts.shape[0], dtype=bool)
    for box in gt_boxes:
        inside |= box.contains(pts)
    return inside.astype(np.int64)


def score_voxels(features: np.ndarray, mlp: tuple[AffineLayer, ...]) -> np.ndarray:
    if mlp[-1].c_out != 1:
        raise DimensionError(f"score MLP must end in one output, got {mlp[-1].c_out}")
    return sigmoid(mlp_forward(mlp, features)[:, 0])


def reweight(features: np.ndarray, scores: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if features.shape[0] != scores.shape[0]:
        raise DimensionError(f"{features.shape[0]} feature rows but {scores.shape[0]} scores")
    return features * scores[:, None]


def segmentation_loss(
    scores: np.ndarray,
    labels: np.ndarray,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> SegmentationLoss:
    """Mean focal loss; an empty input gives 0 with ``empty`` set."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise DimensionError(f"{scores.shape} scores vs {labels.shape} labels")
    if scores.size == 0:
        logger.warning("segmentation loss over zero voxels; reporting 0")
        return SegmentationLoss(0.0, empty=True)
    per_voxel = np.atleast_1d(focal_loss(scores, labels, alpha, gamma))
    # fsum is exactly rounded, so the mean does not depend on row order
    return SegmentationLoss(math.fsum(per_voxel.tolist()) / per_voxel.size)


def total_loss(seg: float, det: float = 0.0, alpha_seg: float = 1.0, alpha_det: float = 1.0) -> float:
    """alpha_seg * L_seg + alpha_det * L_det."""
    return alpha_seg * seg + alpha_det * det


def apply_semantic_head(
    x: SparseTensor,
    centroids: CentroidMap,
    mlp: tuple[AffineLayer, ...],
    gt_boxes: list[Box3D] | None = None,
    focal_alpha: float = 0.25,
    focal_gamma: float = 2.0,
) -> tuple[SparseTensor, SegOutput]:
    """Score, optionally label and re-weight the active voxels of ``x``."""
    scores = score_voxels(x.features, mlp)
    labels = loss = None
    if gt_boxes is not None:
        labels = assign_foreground_labels(centroids, gt_boxes)
        loss = segmentation_loss(scores, labels, focal_alpha, focal_gamma)
        logger.debug(
            "semantic head: %d voxels, %d foreground, L_seg=%.6f",
            len(x), int(labels.sum()), loss.value,
        )
    out = reweight(x.features, scores)
    return x.with_features(out), SegOutput(scores, labels, out, loss)


def write_scores_csv(path: Path, x: SparseTensor, seg: SegOutput) -> None:
    """One row per voxel: z, y, x, stride, score, label (-1 when unlabeled)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = seg.labels if seg.labels is not None else np.full(len(x), -1)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["z", "y", "x", "stride", "score", "label"])
        for (z, y, xx), s, lab in zip(x.coords.tolist(), seg.scores.tolist(), labels.tolist()):
            writer.writerow([z, y, xx, x.stride, repr(float(s)), int(lab)])
