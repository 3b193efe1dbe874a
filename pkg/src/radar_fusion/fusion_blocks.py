"""Voxel-image fusion: simple and deformable sampling, and the fusion block.

Every active voxel is represented by its centroid (mean of the radar
points it holds, or its geometric center when it holds none). The
centroid is projected into the image and image features are sampled
around it:

  simple (SFF)      f_img = Affine(concat_i sample(F_i, c))
  deformable (MSDFF) offsets o_ij and logits from the query q,
                     f_img = Affine(sum_ij softmax(logits)_ij sample(F_i, c + o_ij / (W_i, H_i)))

then added to the voxel feature. Offsets are raw pixels at each level's
resolution. The query of the first fusion block comes from
``init_query``; later blocks use the voxel feature itself.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from radar_fusion.errors import ContractError, DimensionError
from radar_fusion.geometry import CalibrationSet, project_points
from radar_fusion.nn_kernels import (
    AffineLayer,
    FeaturePyramid,
    affine_forward,
    bilinear_sample_grad,
    bilinear_sample_many,
    init_affine,
    softmax,
)
from radar_fusion.semantic_head import SegOutput, apply_semantic_head
from radar_fusion.sparse_backbone import (
    BlockParams,
    SparseConvLayer,
    block_down,
    block_residuals,
    ordinary_block,
    stem_forward,
)
from radar_fusion.voxel_grid import CentroidMap, SparseTensor, compute_centroids

logger = logging.getLogger("radar-fusion")

# --- Parameters ---


@dataclass(frozen=True, eq=False)
class SFFParams:
    """out_proj maps the concatenated level samples (n_I * C_img) to C_fuse."""

    out_proj: AffineLayer


@dataclass(frozen=True, eq=False)
class MSDFFParams:
    """Deformable sampler: offsets, attention logits and output projection."""

    offset_layer: AffineLayer
    weight_layer: AffineLayer
    out_proj: AffineLayer
    n_levels: int
    n_samples: int
    n_heads: int = 1

    def __post_init__(self) -> None:
        if self.n_heads != 1:
            raise ContractError("only single-head sampling is supported")
        k = self.n_levels * self.n_samples
        if self.offset_layer.c_out != 2 * k or self.weight_layer.c_out != k:
            raise DimensionError(
                f"offset/weight layers must output {2 * k}/{k} values for "
                f"{self.n_levels} levels x {self.n_samples} samples"
            )
        if self.offset_layer.c_in != self.weight_layer.c_in:
            raise DimensionError("offset and weight layers must share the query width")


@dataclass(frozen=True)
class FusionBlockConfig:
    kind: str = "MSDFF"
    placement: str = "BR"
    stage_index: int = 0
    modality: str = "full"
    zero_out_of_view: bool = False
    mask_blur: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("SFF", "MSDFF"):
            raise ContractError(f"fusion kind must be SFF or MSDFF, got {self.kind!r}")
        if self.placement not in ("BR", "AR"):
            raise ContractError(f"placement must be BR or AR, got {self.placement!r}")
        if self.modality not in ("full", "no_image", "no_voxel"):
            raise ContractError(f"unknown modality {self.modality!r}")


@dataclass(frozen=True, eq=False)
class FusionBlockParams:
    """Backbone stage parameters plus the sampler of a fusion stage.

    ``block`` is None in the pillar path, where BEV blocks are separate.
    """

    block: BlockParams | None = None
    sff: SFFParams | None = None
    msdff: MSDFFParams | None = None
    query_init: AffineLayer | None = None


@dataclass(frozen=True, eq=False)
class FusionContext:
    """Per-frame inputs shared by all fusion blocks."""

    pyramid: FeaturePyramid
    calib: CalibrationSet
    points: np.ndarray  # N x 3 cropped radar positions
    blur_mask: Callable[[np.ndarray], np.ndarray] | None = None


def init_msdff(
    rng: np.random.Generator,
    c_query: int,
    c_img: int,
    c_out: int,
    n_levels: int = 4,
    n_samples: int = 4,
    zero_out_proj: bool = False,
) -> MSDFFParams:
    k = n_levels * n_samples
    return MSDFFParams(
        offset_layer=init_affine(rng, c_query, 2 * k),
        weight_layer=init_affine(rng, c_query, k),
        out_proj=init_affine(rng, c_img, c_out, zero=zero_out_proj),
        n_levels=n_levels,
        n_samples=n_samples,
    )


def init_sff(rng: np.random.Generator, c_img: int, n_levels: int, c_out: int, zero_out_proj: bool = False) -> SFFParams:
    return SFFParams(init_affine(rng, n_levels * c_img, c_out, zero=zero_out_proj))


# --- Sampling operators ---


def _level_sizes(pyramid: FeaturePyramid) -> np.ndarray:
    """n_I x 2 array of (W_i, H_i)."""
    return np.array([[lv.shape[1], lv.shape[0]] for lv in pyramid.levels], dtype=np.float64)


def init_query(f_vox: np.ndarray, f_img_level1: np.ndarray, p_norm: np.ndarray, layer: AffineLayer) -> np.ndarray:
    """q = Affine(concat(f_vox, f_img_level1, p_norm)), row-wise."""
    f_vox = np.atleast_2d(np.asarray(f_vox, dtype=np.float64))
    f_img = np.atleast_2d(np.asarray(f_img_level1, dtype=np.float64))
    p = np.atleast_2d(np.asarray(p_norm, dtype=np.float64))
    if not (f_vox.shape[0] == f_img.shape[0] == p.shape[0]):
        raise DimensionError("query inputs must have equal row counts")
    return affine_forward(layer, np.concatenate([f_vox, f_img, p], axis=1))


def sff_sample(
    coords: np.ndarray,
    pyramid: FeaturePyramid,
    out_proj: AffineLayer,
    in_view: np.ndarray | None = None,
) -> np.ndarray:
    """Concatenate one bilinear sample per level and project (M x 2 -> M x C)."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    samples = np.concatenate([bilinear_sample_many(lv, coords) for lv in pyramid.levels], axis=1)
    if in_view is not None:
        samples[~np.asarray(in_view, bool)] = 0.0
    return affine_forward(out_proj, samples)


def _deformable_terms(coords: np.ndarray, pyramid: FeaturePyramid, q: np.ndarray, params: MSDFFParams):
    """Sample positions (M, n_I, n_s, 2) and softmax weights (M, n_I, n_s)."""
    if pyramid.n_levels != params.n_levels:
        raise DimensionError(f"sampler built for {params.n_levels} levels, pyramid has {pyramid.n_levels}")
    m = coords.shape[0]
    offsets = affine_forward(params.offset_layer, q).reshape(m, params.n_levels, params.n_samples, 2)
    positions = coords[:, None, None, :] + offsets / _level_sizes(pyramid)[None, :, None, :]
    weights = softmax(affine_forward(params.weight_layer, q), axis=1)
    return positions, weights.reshape(m, params.n_levels, params.n_samples)


def msdff_aggregate(coords: np.ndarray, pyramid: FeaturePyramid, q: np.ndarray, params: MSDFFParams) -> np.ndarray:
    """Weighted sum of deformable samples before the output projection (M x C_img)."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    positions, weights = _deformable_terms(coords, pyramid, q, params)
    agg = np.zeros((coords.shape[0], pyramid.channels))
    for i, level in enumerate(pyramid.levels):
        for j in range(params.n_samples):
            agg += weights[:, i, j, None] * bilinear_sample_many(level, positions[:, i, j])
    return agg


def msdff_sample(
    coords: np.ndarray,
    pyramid: FeaturePyramid,
    q: np.ndarray,
    params: MSDFFParams,
    in_view: np.ndarray | None = None,
) -> np.ndarray:
    """Deformable multi-level sampling around each reference coordinate."""
    agg = msdff_aggregate(coords, pyramid, q, params)
    if in_view is not None:
        agg[~np.asarray(in_view, bool)] = 0.0
    return affine_forward(params.out_proj, agg)


def msdff_jacobians(coord: np.ndarray, pyramid: FeaturePyramid, q: np.ndarray, params: MSDFFParams):
    """Analytic d f_img / d q (C_out x C_q) and d f_img / d coord (C_out x 2) for one voxel.

    Exact wherever no sample position sits on a sampler cell boundary.
    """
    coord = np.asarray(coord, dtype=np.float64).reshape(1, 2)
    q = np.asarray(q, dtype=np.float64).reshape(1, -1)
    positions, weights = _deformable_terms(coord, pyramid, q, params)
    sizes = _level_sizes(pyramid)
    n_i, n_s = params.n_levels, params.n_samples
    c_img = pyramid.channels
    w_flat = weights.reshape(-1)

    values = np.zeros((n_i * n_s, c_img))
    grad_x = np.zeros((n_i * n_s, c_img))
    grad_y = np.zeros((n_i * n_s, c_img))
    for i, level in enumerate(pyramid.levels):
        v, gx, gy = bilinear_sample_grad(level, positions[0, i])
        values[i * n_s : (i + 1) * n_s] = v
        grad_x[i * n_s : (i + 1) * n_s] = gx
        grad_y[i * n_s : (i + 1) * n_s] = gy

    # Softmax path: S^T (diag(w) - w w^T) W_logit
    d_softmax = np.diag(w_flat) - np.outer(w_flat, w_flat)
    d_agg_dq = values.T @ d_softmax @ params.weight_layer.weight

    # Offset path: sum_k w_k (G_x,k (x) W_off,x,k / W_i + G_y,k (x) W_off,y,k / H_i)
    w_off = params.offset_layer.weight.reshape(n_i * n_s, 2, -1)
    inv = 1.0 / np.repeat(sizes, n_s, axis=0)
    d_agg_dq += np.einsum("k,kc,kq->cq", w_flat * inv[:, 0], grad_x, w_off[:, 0])
    d_agg_dq += np.einsum("k,kc,kq->cq", w_flat * inv[:, 1], grad_y, w_off[:, 1])

    d_agg_dc = np.stack([w_flat @ grad_x, w_flat @ grad_y], axis=1)
    w_out = params.out_proj.weight
    return w_out @ d_agg_dq, w_out @ d_agg_dc


def fuse_features(f_img: np.ndarray, f_vox: np.ndarray) -> np.ndarray:
    """Element-wise sum."""
    f_img = np.asarray(f_img, dtype=np.float64)
    f_vox = np.asarray(f_vox, dtype=np.float64)
    if f_img.shape != f_vox.shape:
        raise DimensionError(f"cannot fuse image features {f_img.shape} with voxel features {f_vox.shape}")
    return f_img + f_vox


# --- Fusion blocks ---


def normalized_centers(x: SparseTensor) -> np.ndarray:
    """Voxel centers scaled into [0, 1] by the grid extent."""
    centers = x.spec.voxel_centers(x.coords, x.stride)
    return (centers - np.array(x.spec.range.min)) / x.spec.range.extent


def sample_and_fuse(
    x: SparseTensor,
    ctx: FusionContext,
    cfg: FusionBlockConfig,
    params: FusionBlockParams,
    first: bool,
) -> tuple[SparseTensor, CentroidMap]:
    """Project centroids, sample the image and fuse; the active set is unchanged."""
    centroids = compute_centroids(ctx.points, x.spec, x.coords, x.stride)
    f_vox = x.features
    if cfg.modality == "no_image":
        return x, centroids

    proj = project_points(centroids.centroids, ctx.calib)
    coords, in_view = proj.normalized, proj.in_view
    if cfg.kind == "MSDFF":
        if params.msdff is None:
            raise ContractError(f"fusion block {cfg.stage_index} has no deformable parameters")
        if first:
            if params.query_init is None:
                raise ContractError("first fusion block needs a query initialization layer")
            f_img1 = bilinear_sample_many(ctx.pyramid.levels[0], coords)
            f_img1[~in_view] = 0.0
            q_vox = np.zeros_like(f_vox) if cfg.modality == "no_voxel" else f_vox
            q = init_query(q_vox, f_img1, normalized_centers(x), params.query_init)
        else:
            q = f_vox
        f_img = msdff_sample(coords, ctx.pyramid, q, params.msdff, in_view)
    else:
        if params.sff is None:
            raise ContractError(f"fusion block {cfg.stage_index} has no sampling projection")
        f_img = sff_sample(coords, ctx.pyramid, params.sff.out_proj, in_view)

    if cfg.zero_out_of_view:
        f_img[~in_view] = 0.0
    if cfg.mask_blur and ctx.blur_mask is not None:
        f_img[ctx.blur_mask(centroids.centroids)] = 0.0

    fused = f_img if cfg.modality == "no_voxel" else fuse_features(f_img, f_vox)
    logger.debug(
        "fusion block %d (%s/%s): %d voxels, %d in view, %d center fallbacks",
        cfg.stage_index, cfg.kind, cfg.placement, len(x), int(in_view.sum()),
        int(centroids.is_center_fallback.sum()),
    )
    return x.with_features(fused), centroids


def fusion_block_forward(
    x: SparseTensor,
    ctx: FusionContext,
    cfg: FusionBlockConfig,
    params: FusionBlockParams,
    first: bool = False,
) -> tuple[SparseTensor, CentroidMap]:
    """Backbone stage with fusion before (BR) or after (AR) the residual stack."""
    y = block_down(x, params.block)
    if cfg.placement == "BR":
        y, centroids = sample_and_fuse(y, ctx, cfg, params, first)
        y = block_residuals(y, params.block)
    else:
        y = block_residuals(y, params.block)
        y, centroids = sample_and_fuse(y, ctx, cfg, params, first)
    return y, centroids


@dataclass(frozen=True, eq=False)
class BackboneOutput:
    blocks: list[SparseTensor]
    seg: SegOutput | None = None
    seg_tensor: SparseTensor | None = None


def fusion_backbone_forward(
    x: SparseTensor,
    ctx: FusionContext,
    stem: SparseConvLayer,
    blocks: list[FusionBlockParams],
    cfgs: list[FusionBlockConfig],
    head_mlp: tuple[AffineLayer, ...] | None = None,
    gt_boxes=None,
    attach_stage: int | None = None,
    focal: tuple[float, float] = (0.25, 2.0),
) -> BackboneOutput:
    """Stem, then the first len(cfgs) blocks as fusion blocks, then ordinary blocks.

    The semantic head re-weights the output of the last fusion block, or of
    block ``attach_stage`` (1-based) when given.
    """
    n_fusion = len(cfgs)
    head_at = attach_stage if attach_stage is not None else (n_fusion or None)
    h = stem_forward(x, stem)
    outputs: list[SparseTensor] = []
    seg = seg_tensor = None
    for k, params in enumerate(blocks, start=1):
        centroids = None
        if k <= n_fusion:
            h, centroids = fusion_block_forward(h, ctx, cfgs[k - 1], params, first=(k == 1))
        else:
            h = ordinary_block(h, params.block)
        if head_mlp is not None and head_at == k:
            if centroids is None:
                centroids = compute_centroids(ctx.points, h.spec, h.coords, h.stride)
            seg_tensor = h
            h, seg = apply_semantic_head(h, centroids, head_mlp, gt_boxes, *focal)
        outputs.append(h)
    return BackboneOutput(outputs, seg, seg_tensor)
