"""Pillar variant: dense BEV backbone with fusion through lifted voxels.

A fusion stage lifts the BEV map into the radar's occupied voxels
(f = BEV(x, y) + HeightEmb(z)), fuses image features into those voxels
exactly like the voxel path, then sums the voxels of each (x, y) column
back into the BEV map.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from radar_fusion.dataset_io import PointCloud
from radar_fusion.errors import ContractError, DimensionError
from radar_fusion.fusion_blocks import (
    FusionBlockConfig,
    FusionBlockParams,
    FusionContext,
    sample_and_fuse,
)
from radar_fusion.nn_kernels import AffineLayer, affine_forward, relu
from radar_fusion.semantic_head import SegOutput, apply_semantic_head
from radar_fusion.voxel_grid import CentroidMap, SparseTensor, VoxelGridSpec, pillarize, voxelize

logger = logging.getLogger("radar-fusion")


@dataclass(frozen=True, eq=False)
class BevMap:
    """H_b x W_b x C dense map over the x/y cells of ``spec`` at ``stride``."""

    data: np.ndarray
    spec: VoxelGridSpec
    stride: int = 1

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        _, h, w = self.spec.shape_at(self.stride)
        if data.ndim != 3 or data.shape[:2] != (h, w):
            raise DimensionError(f"BEV map {data.shape} does not match grid {(h, w)}")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return int(self.data.shape[2])


@dataclass(frozen=True, eq=False)
class HeightEmbeddingTable:
    """One learned C-vector per z-bin of the lifting grid."""

    table: np.ndarray

    @property
    def z_bins(self) -> int:
        return int(self.table.shape[0])


def init_height_table(rng: np.random.Generator, z_bins: int, channels: int, zero: bool = False) -> HeightEmbeddingTable:
    if zero:
        return HeightEmbeddingTable(np.zeros((z_bins, channels)))
    k = 1.0 / np.sqrt(channels)
    return HeightEmbeddingTable(rng.uniform(-k, k, size=(z_bins, channels)))


def lifting_spec(bev_spec: VoxelGridSpec, z_bins: int, stride: int = 1) -> VoxelGridSpec:
    """Voxel grid sharing the BEV's x/y cells (times ``stride``) with ``z_bins`` z-cells."""
    r = bev_spec.range
    return VoxelGridSpec(
        r,
        (bev_spec.cell[0] * stride, bev_spec.cell[1] * stride, (r.max[2] - r.min[2]) / z_bins),
    )


# --- Dense 2D convolution ---


@dataclass(frozen=True, eq=False)
class Conv2dLayer:
    """3x3 kernel (3, 3, C_in, C_out), padding 1."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1


def dense_conv2d(data: np.ndarray, layer: Conv2dLayer) -> np.ndarray:
    """Cross-correlation with zero padding 1; output size ceil(n / stride)."""
    if data.shape[2] != layer.weight.shape[2]:
        raise DimensionError(f"conv2d expects {layer.weight.shape[2]} channels, got {data.shape[2]}")
    padded = np.pad(data, ((1, 1), (1, 1), (0, 0)))
    windows = sliding_window_view(padded, (3, 3), axis=(0, 1))  # H x W x C x 3 x 3
    windows = windows[:: layer.stride, :: layer.stride]
    return np.einsum("hwcij,ijco->hwo", windows, layer.weight) + layer.bias


def init_conv2d(rng: np.random.Generator, c_in: int, c_out: int, stride: int = 1) -> Conv2dLayer:
    k = 1.0 / np.sqrt(9 * c_in)
    return Conv2dLayer(
        rng.uniform(-k, k, size=(3, 3, c_in, c_out)), rng.uniform(-k, k, size=c_out), stride
    )


@dataclass(frozen=True, eq=False)
class BevBlockParams:
    conv1: Conv2dLayer
    conv2: Conv2dLayer


def bev_block(bev: BevMap, params: BevBlockParams) -> BevMap:
    """Two 3x3 convolutions with ReLU; the first carries the block stride."""
    h = relu(dense_conv2d(bev.data, params.conv1))
    h = relu(dense_conv2d(h, params.conv2))
    return BevMap(h, bev.spec, bev.stride * params.conv1.stride)


def init_bev_block(rng: np.random.Generator, c_in: int, c_out: int, stride: int = 1) -> BevBlockParams:
    return BevBlockParams(init_conv2d(rng, c_in, c_out, stride), init_conv2d(rng, c_out, c_out))


# --- Lifting and collapsing ---


def column_sum(coords: np.ndarray, features: np.ndarray, spec: VoxelGridSpec, stride: int) -> np.ndarray:
    """Sum feature rows per (y, x) column into an H x W x C map.

    Rows are accumulated in (y, x, z, feature) order so the result does not
    depend on the row order of the input.
    """
    _, h, w = spec.shape_at(stride)
    out = np.zeros((h, w, features.shape[1]))
    if coords.shape[0] == 0:
        return out
    order = np.lexsort((*features.T[::-1], coords[:, 0], coords[:, 2], coords[:, 1]))
    np.add.at(out, (coords[order, 1], coords[order, 2]), features[order])
    return out


def collapse_to_bev(x: SparseTensor) -> BevMap:
    """Sum voxels over z per (x, y); empty columns stay zero."""
    return BevMap(column_sum(x.coords, x.features, x.spec, x.stride), x.spec, x.stride)


def lift_bev_to_voxels(
    bev: BevMap,
    pc: PointCloud,
    table: HeightEmbeddingTable,
) -> tuple[SparseTensor, CentroidMap]:
    """Occupied voxels of ``pc`` on the BEV's x/y grid, f = BEV(y, x) + table[z]."""
    spec = lifting_spec(bev.spec, table.z_bins, bev.stride)
    occupied, centroids = voxelize(pc, spec)
    coords = occupied.coords
    h, w = bev.data.shape[:2]
    if coords.size and (coords[:, 1].max() >= h or coords[:, 2].max() >= w):
        raise ContractError(f"lifted voxel outside BEV map of {(h, w)}")
    if table.table.shape[1] != bev.channels:
        raise DimensionError(f"height table width {table.table.shape[1]} != BEV channels {bev.channels}")
    feats = bev.data[coords[:, 1], coords[:, 2]] + table.table[coords[:, 0]]
    return SparseTensor(coords, feats, 1, spec), centroids


# --- Pipeline ---


@dataclass(frozen=True, eq=False)
class PillarParams:
    in_proj: AffineLayer
    blocks: tuple[BevBlockParams, ...]
    fusion: tuple[FusionBlockParams, ...]
    height_tables: tuple[HeightEmbeddingTable, ...]


@dataclass(frozen=True, eq=False)
class PillarOutput:
    bev: BevMap
    seg: SegOutput | None = None
    seg_tensor: SparseTensor | None = None


def scatter_pillars(pc: PointCloud, spec: VoxelGridSpec, in_proj: AffineLayer) -> BevMap:
    """Pillarize, project mean point features to C channels and scatter to BEV."""
    pillars, _ = pillarize(pc, spec)
    feats = affine_forward(in_proj, pillars.features)
    return BevMap(column_sum(pillars.coords, feats, spec, 1), spec, 1)


def pillar_pipeline_forward(
    pc: PointCloud,
    ctx: FusionContext,
    spec: VoxelGridSpec,
    params: PillarParams,
    cfgs: list[FusionBlockConfig],
    head_mlp: tuple[AffineLayer, ...] | None = None,
    gt_boxes=None,
    focal: tuple[float, float] = (0.25, 2.0),
) -> PillarOutput:
    """BEV blocks; the first len(cfgs) are each followed by lift, fuse and collapse."""
    bev = scatter_pillars(pc, spec, params.in_proj)
    seg = seg_tensor = None
    n_fusion = len(cfgs)
    for k, block in enumerate(params.blocks, start=1):
        bev = bev_block(bev, block)
        if k > n_fusion:
            continue
        lifted, centroids = lift_bev_to_voxels(bev, pc, params.height_tables[k - 1])
        fused, _ = sample_and_fuse(lifted, ctx, cfgs[k - 1], params.fusion[k - 1], first=(k == 1))
        if head_mlp is not None and k == n_fusion:
            seg_tensor = fused
            fused, seg = apply_semantic_head(fused, centroids, head_mlp, gt_boxes, *focal)
        bev = BevMap(column_sum(fused.coords, fused.features, bev.spec, bev.stride), bev.spec, bev.stride)
        logger.debug("pillar fusion stage %d: %d lifted voxels", k, len(lifted))
    return PillarOutput(bev, seg, seg_tensor)
