"""Model construction and per-frame forward passes.

``build_model`` draws every parameter from seeded generators in a fixed
order, so a (config, seed) pair always yields the same model. The model is
immutable and shared read-only across worker threads.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, TypeVar

import numpy as np

from radar_fusion.config import RunConfig, debug
from radar_fusion.dataset_io import (
    Box3D,
    FrameRecord,
    PointCloud,
    RangeSpec,
    crop_range,
    default_calibration,
    generate_synthetic_scene,
    list_frames,
    load_frame,
)
from radar_fusion.errors import ConfigError, DataError, check_finite
from radar_fusion.eval_metrics import BlurPointClass, classify_blur_points
from radar_fusion.fusion_blocks import (
    FusionBlockConfig,
    FusionBlockParams,
    FusionContext,
    fusion_backbone_forward,
    init_msdff,
    init_sff,
)
from radar_fusion.neck_bev import combine_multiscale
from radar_fusion.nn_kernels import AffineLayer, init_affine, read_weights
from radar_fusion.pillar_path import (
    BevMap,
    PillarParams,
    init_bev_block,
    init_height_table,
    pillar_pipeline_forward,
)
from radar_fusion.semantic_head import SegOutput, init_semantic_head, total_loss
from radar_fusion.sparse_backbone import BlockConfig, SparseConvLayer, init_block, init_sparse_conv
from radar_fusion.voxel_grid import CoordIndex, SparseTensor, VoxelGridSpec, voxelize

logger = logging.getLogger("radar-fusion")

T = TypeVar("T")
R = TypeVar("R")


# --- Model ---


@dataclass(frozen=True, eq=False)
class FusionModel:
    """All learnable parameters of one pipeline variant."""

    variant: str
    fusion_cfgs: tuple[FusionBlockConfig, ...]
    stem: SparseConvLayer | None = None
    blocks: tuple[FusionBlockParams, ...] = ()
    pillar: PillarParams | None = None
    head: tuple[AffineLayer, ...] | None = None

    def to_named_tensors(self) -> dict[str, np.ndarray]:
        """Flatten parameters to dotted names, e.g. ``blocks.0.msdff.out_proj.weight``."""
        out: dict[str, np.ndarray] = {}
        for name in ("stem", "blocks", "pillar", "head"):
            _flatten(getattr(self, name), name, out)
        return out

    def from_named_tensors(self, tensors: dict[str, np.ndarray]) -> FusionModel:
        """Copy of this model with every parameter replaced from ``tensors``."""
        missing = set(self.to_named_tensors()) - set(tensors)
        if missing:
            raise DataError(f"weights file lacks {len(missing)} tensors, e.g. {sorted(missing)[0]}")
        return replace(
            self, **{name: _rebuild(getattr(self, name), name, tensors) for name in ("stem", "blocks", "pillar", "head")}
        )


def _flatten(obj: Any, prefix: str, out: dict[str, np.ndarray]) -> None:
    if obj is None:
        return
    if isinstance(obj, np.ndarray):
        out[prefix] = obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            _flatten(getattr(obj, f.name), f"{prefix}.{f.name}", out)
    elif isinstance(obj, (tuple, list)):
        for i, item in enumerate(obj):
            _flatten(item, f"{prefix}.{i}", out)


def _rebuild(obj: Any, prefix: str, tensors: dict[str, np.ndarray]) -> Any:
    if obj is None:
        return None
    if isinstance(obj, np.ndarray):
        arr = np.asarray(tensors[prefix], dtype=np.float64)
        if arr.shape != obj.shape:
            raise DataError(f"tensor {prefix} has shape {arr.shape}, model expects {obj.shape}")
        return arr
    if dataclasses.is_dataclass(obj):
        changes = {
            f.name: _rebuild(getattr(obj, f.name), f"{prefix}.{f.name}", tensors)
            for f in dataclasses.fields(obj)
            if isinstance(getattr(obj, f.name), (np.ndarray, tuple, list))
            or dataclasses.is_dataclass(getattr(obj, f.name))
        }
        return replace(obj, **changes)
    if isinstance(obj, (tuple, list)):
        return type(obj)(_rebuild(item, f"{prefix}.{i}", tensors) for i, item in enumerate(obj))
    return obj


def fusion_configs(cfg: RunConfig) -> tuple[FusionBlockConfig, ...]:
    f = cfg.fusion
    return tuple(
        FusionBlockConfig(
            kind=f.kind,
            placement=f.placement,
            stage_index=k,
            modality=f.modality,
            zero_out_of_view=f.zero_out_of_view,
            mask_blur=f.mask_blur,
        )
        for k in range(1, f.n_fusion + 1)
    )


def _fusion_params(rng: np.random.Generator, cfg: RunConfig, channels: int, first: bool) -> dict:
    f = cfg.fusion
    if f.kind == "MSDFF":
        params = {
            "msdff": init_msdff(
                rng, channels, f.image_channels, channels, f.n_levels, f.n_samples, f.zero_out_proj
            )
        }
        if first:
            params["query_init"] = init_affine(rng, channels + f.image_channels + 3, channels)
        return params
    return {"sff": init_sff(rng, f.image_channels, f.n_levels, channels, f.zero_out_proj)}


def build_model(cfg: RunConfig, in_channels: int, seed: int | None = None) -> FusionModel:
    """Seeded initialization of the configured variant.

    Backbone parameters come from one stream and fusion/head parameters
    from a second one, so the single-modal weights do not depend on
    ``fusion.n_fusion``.
    """
    base_seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(base_seed)
    fusion_rng = np.random.default_rng([base_seed, 1])
    cfgs = fusion_configs(cfg)
    head_stage = cfg.head.attach_stage if cfg.head.attach_stage is not None else (cfg.fusion.n_fusion or None)
    if not cfg.head.enabled:
        head_stage = None

    if cfg.variant == "pillar":
        pc = cfg.pillar
        blocks = tuple(init_bev_block(rng, pc.channels, pc.channels, s) for s in pc.strides)
        in_proj = init_affine(rng, in_channels, pc.channels)
        fusion = tuple(
            FusionBlockParams(**_fusion_params(fusion_rng, cfg, pc.channels, k == 1))
            for k in range(1, cfg.fusion.n_fusion + 1)
        )
        tables = tuple(init_height_table(fusion_rng, pc.z_bins, pc.channels) for _ in cfgs)
        head = None
        if cfgs and head_stage is not None:
            head = init_semantic_head(fusion_rng, pc.channels, cfg.head.hidden_layers)
        pillar = PillarParams(in_proj, blocks, fusion, tables)
        return FusionModel("pillar", cfgs, pillar=pillar, head=head)

    bb = cfg.backbone
    channels = bb.channels
    stem = init_sparse_conv(rng, "submanifold", in_channels, channels[0])
    blocks = []
    for k, (c_out, stride) in enumerate(zip(channels, bb.strides), start=1):
        c_in = channels[k - 2] if k > 1 else channels[0]
        block = init_block(rng, BlockConfig(c_in, c_out, stride, bb.n_residual))
        extra = _fusion_params(fusion_rng, cfg, c_out, k == 1) if k <= cfg.fusion.n_fusion else {}
        blocks.append(FusionBlockParams(block, **extra))
    head = None
    if head_stage is not None:
        if not 1 <= head_stage <= len(blocks):
            raise ConfigError(f"head.attach_stage must lie in [1, {len(blocks)}], got {head_stage}")
        head = init_semantic_head(fusion_rng, channels[head_stage - 1], cfg.head.hidden_layers)
    return FusionModel("voxel", cfgs, stem=stem, blocks=tuple(blocks), head=head)


def load_model(cfg: RunConfig, in_channels: int) -> FusionModel:
    """Seeded model, with parameters replaced from ``cfg.weights`` when set."""
    model = build_model(cfg, in_channels)
    if cfg.weights:
        model = model.from_named_tensors(read_weights(Path(cfg.weights)))
        debug(f"Loaded weights from {cfg.weights}")
    return model


# --- Frames ---


def voxel_spec(cfg: RunConfig) -> VoxelGridSpec:
    p = cfg.preset
    return VoxelGridSpec(RangeSpec(*p.voxel_range), p.voxel_cell)


def pillar_spec(cfg: RunConfig) -> VoxelGridSpec:
    p = cfg.preset
    return VoxelGridSpec.pillars(RangeSpec(*p.pillar_range), p.pillar_cell)


def grid_spec(cfg: RunConfig) -> VoxelGridSpec:
    return pillar_spec(cfg) if cfg.variant == "pillar" else voxel_spec(cfg)


def load_frames(cfg: RunConfig) -> list[FrameRecord]:
    """Frames from ``data_root``, or synthetic scenes seeded from ``cfg.seed``."""
    preset = cfg.preset
    f = cfg.fusion
    if cfg.data_root:
        root = Path(cfg.data_root)
        ids = cfg.frames or list_frames(root)
        frames = [
            load_frame(
                root, fid, preset.schema, preset.classes,
                n_levels=f.n_levels, channels=f.image_channels, seed=cfg.seed,
            )
            for fid in ids
        ]
        debug(f"Loaded {len(frames)} frames from {root}")
        return frames

    syn = cfg.synthetic
    calib = default_calibration(tuple(syn.image_size))
    frames = []
    for i in range(syn.n_frames):
        frame_id = f"{i:06d}"
        scene = generate_synthetic_scene(
            cfg.seed + i, syn.n_boxes, syn.n_points, calib,
            crop=RangeSpec(*preset.voxel_range), schema=preset.schema, classes=preset.classes,
            n_levels=f.n_levels, channels=f.image_channels, frame_id=frame_id,
        )
        frames.append(FrameRecord(frame_id, scene.pointcloud, calib, scene.boxes, scene.pyramid))
    return frames


def run_frames(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """Map ``fn`` over ``items`` on a thread pool; results keep input order."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# --- Forward ---


@dataclass(frozen=True, eq=False)
class FrameResult:
    frame_id: str
    bev: BevMap
    seg: SegOutput | None
    seg_tensor: SparseTensor | None
    points: PointCloud
    detections: list[Box3D]


def blur_mask_for(frame: FrameRecord) -> Callable[[np.ndarray], np.ndarray]:
    """Predicate selecting 3D blurred positions (in a 2D GT region, in no 3D box)."""
    regions = [b.box2d for b in frame.boxes if b.box2d is not None]
    if not regions:
        raise DataError(f"frame {frame.frame_id}: mask_blur needs labels with 2D regions")

    def mask(xyz: np.ndarray) -> np.ndarray:
        return classify_blur_points(xyz, regions, frame.boxes, frame.calib) == BlurPointClass.FORE2D_BLURRED

    return mask


def passthrough_detections(cfg: RunConfig, frame: FrameRecord) -> list[Box3D]:
    """Stand-in detection head: configured boxes, or the ground truth re-scored."""
    if cfg.head.echo_ground_truth:
        return [replace(b, score=cfg.head.echo_score) for b in frame.boxes]
    classes = cfg.preset.classes
    dets = []
    for entry in cfg.head.detections:
        if entry.get("frame", frame.frame_id) != frame.frame_id:
            continue
        try:
            dets.append(
                Box3D(
                    tuple(entry["center"]),
                    tuple(entry["size"]),
                    float(entry.get("yaw", 0.0)),
                    classes.index(entry["class"]),
                    float(entry.get("score", 1.0)),
                )
            )
        except (KeyError, ValueError) as e:
            raise ConfigError(f"malformed head.detections entry {entry!r}: {e}") from e
    return dets


def forward_frame(frame: FrameRecord, model: FusionModel, cfg: RunConfig) -> FrameResult:
    """Crop, voxelize, run the backbone and neck; NaN/Inf aborts with the stage name."""
    if frame.pyramid is None:
        raise DataError(f"frame {frame.frame_id}: no feature pyramid (pyramids/ or images/)")
    spec = grid_spec(cfg)
    pc = crop_range(frame.pointcloud, spec.range)
    check_finite("input", pc.points)
    blur = blur_mask_for(frame) if cfg.fusion.mask_blur else None
    ctx = FusionContext(frame.pyramid, frame.calib, pc.xyz, blur)
    gt = frame.boxes or None
    focal = (cfg.loss.focal_alpha, cfg.loss.focal_gamma)

    if model.variant == "pillar":
        out = pillar_pipeline_forward(
            pc, ctx, spec, model.pillar, list(model.fusion_cfgs), model.head, gt, focal
        )
        bev, seg, seg_tensor = out.bev, out.seg, out.seg_tensor
        check_finite("pillar backbone", bev.data)
    else:
        x, _ = voxelize(pc, spec)
        check_finite("voxelize", x.features)
        out = fusion_backbone_forward(
            x, ctx, model.stem, list(model.blocks), list(model.fusion_cfgs),
            model.head, gt, cfg.head.attach_stage, focal,
        )
        for k, block in enumerate(out.blocks, start=1):
            check_finite(f"block {k}", block.features)
        neck_inputs = []
        for k in cfg.backbone.neck_blocks:
            if not 1 <= k <= len(out.blocks):
                raise ConfigError(f"backbone.neck_blocks entry {k} outside 1..{len(out.blocks)}")
            neck_inputs.append(out.blocks[k - 1])
        bev = combine_multiscale(neck_inputs)
        seg, seg_tensor = out.seg, out.seg_tensor
        check_finite("neck", bev.data)

    if seg is not None:
        check_finite("semantic head", seg.scores)
    logger.info(
        "frame %s: %d points, BEV %s, %s",
        frame.frame_id, len(pc), bev.data.shape,
        f"{seg.scores.size} scored voxels" if seg is not None else "no semantic head",
    )
    return FrameResult(frame.frame_id, bev, seg, seg_tensor, pc, passthrough_detections(cfg, frame))


def point_scores(xyz: np.ndarray, tensor: SparseTensor, scores: np.ndarray) -> np.ndarray:
    """Score of the voxel holding each point (-1 where no active voxel holds it)."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    rows = CoordIndex(tensor.coords, tensor.stride).lookup(tensor.spec.voxel_indices(xyz) // tensor.stride)
    out = np.full(xyz.shape[0], -1.0)
    hit = rows >= 0
    out[hit] = np.asarray(scores)[rows[hit]]
    return out


def loss_summary(results: list[FrameResult], cfg: RunConfig) -> dict[str, float]:
    """Mean L_seg over labelled frames and the weighted total (L_det is 0 without a detection head)."""
    losses = [r.seg.loss.value for r in results if r.seg is not None and r.seg.loss is not None]
    l_seg = math.fsum(losses) / len(losses) if losses else 0.0
    return {
        "frames": len(losses),
        "l_seg": l_seg,
        "l_det": 0.0,
        "total": total_loss(l_seg, 0.0, cfg.loss.alpha_seg, cfg.loss.alpha_det),
    }
