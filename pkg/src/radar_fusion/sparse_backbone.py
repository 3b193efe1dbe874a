"""Sparse 3D convolutions over packed-key coordinate indexes.

Both kernels are 3x3x3 with padding 1 and use cross-correlation:

    submanifold:  out[c] = b + sum_d x[c + d] W[d]        (active set kept)
    strided:      out[o] = b + sum_d x[2 o + d] W[d]      (o < ceil(n / 2))

with d running over KERNEL_OFFSETS in a fixed order. Each offset is one
gather + matmul + scatter, so accumulation order never depends on how the
active set is stored.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from radar_fusion.errors import ContractError, DimensionError
from radar_fusion.nn_kernels import relu
from radar_fusion.voxel_grid import CoordIndex, SparseTensor, pack_coords, unpack_coords

logger = logging.getLogger("radar-fusion")

KERNEL_OFFSETS = np.array(
    [(dz, dy, dx) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)],
    dtype=np.int64,
)


@dataclass(frozen=True, eq=False)
class SparseConvLayer:
    """3x3x3 kernel (3, 3, 3, C_in, C_out) indexed [dz+1, dy+1, dx+1]."""

    kind: str
    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1

    def __post_init__(self) -> None:
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 5 or w.shape[:3] != (3, 3, 3) or b.shape != (w.shape[4],):
            raise DimensionError(f"sparse conv weight {w.shape} / bias {b.shape} malformed")
        if self.kind == "submanifold" and self.stride != 1:
            raise ContractError("submanifold convolutions have stride 1")
        if self.kind == "strided" and self.stride != 2:
            raise ContractError("strided convolutions have stride 2")
        if self.kind not in ("submanifold", "strided"):
            raise ContractError(f"unknown sparse conv kind {self.kind!r}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ContractError("sparse conv parameters must be finite")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def c_in(self) -> int:
        return int(self.weight.shape[3])

    @property
    def c_out(self) -> int:
        return int(self.weight.shape[4])

    @property
    def taps(self) -> np.ndarray:
        """(27, C_in, C_out) view in KERNEL_OFFSETS order."""
        return self.weight.reshape(27, self.c_in, self.c_out)


def _check_channels(x: SparseTensor, layer: SparseConvLayer) -> None:
    if x.channels != layer.c_in:
        raise DimensionError(f"conv expects {layer.c_in} input channels, got {x.channels}")


def submanifold_conv(x: SparseTensor, layer: SparseConvLayer) -> SparseTensor:
    """Convolve at the input's active sites only."""
    if layer.kind != "submanifold":
        raise ContractError("submanifold_conv needs a submanifold layer")
    _check_channels(x, layer)
    out = np.tile(layer.bias, (len(x), 1))
    if len(x):
        index = x.index()
        taps = layer.taps
        for k, d in enumerate(KERNEL_OFFSETS):
            rows = index.lookup(x.coords + d)
            hit = rows >= 0
            if hit.any():
                out[hit] += x.features[rows[hit]] @ taps[k]
    return x.with_features(out)


def strided_output_coords(x: SparseTensor) -> np.ndarray:
    """Sorted, unique stride-2 coordinates reachable from the active set."""
    if len(x) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    bound = np.array(x.spec.shape_at(2 * x.stride))
    keys = []
    for d in KERNEL_OFFSETS:
        shifted = x.coords - d
        ok = np.all(shifted % 2 == 0, axis=1)
        o = shifted[ok] // 2
        o = o[np.all((o >= 0) & (o < bound), axis=1)]
        keys.append(pack_coords(o, 2 * x.stride))
    coords, _ = unpack_coords(np.unique(np.concatenate(keys)))
    return coords


def strided_sparse_conv(x: SparseTensor, layer: SparseConvLayer) -> SparseTensor:
    """Stride-2 convolution; the output active set dilates to every reachable site."""
    if layer.kind != "strided":
        raise ContractError("strided_sparse_conv needs a strided layer")
    _check_channels(x, layer)
    coords = strided_output_coords(x)
    out = np.tile(layer.bias, (coords.shape[0], 1))
    if coords.shape[0]:
        index = CoordIndex(coords, 2 * x.stride)
        taps = layer.taps
        for k, d in enumerate(KERNEL_OFFSETS):
            shifted = x.coords - d
            ok = np.all(shifted % 2 == 0, axis=1)
            rows = np.full(len(x), -1, dtype=np.int64)
            rows[ok] = index.lookup(shifted[ok] // 2)
            hit = rows >= 0
            if hit.any():
                np.add.at(out, rows[hit], x.features[hit] @ taps[k])
    return SparseTensor(coords, out, 2 * x.stride, x.spec)


def sparse_conv(x: SparseTensor, layer: SparseConvLayer) -> SparseTensor:
    if layer.kind == "strided":
        return strided_sparse_conv(x, layer)
    return submanifold_conv(x, layer)


def residual_block(x: SparseTensor, conv1: SparseConvLayer, conv2: SparseConvLayer) -> SparseTensor:
    """y = ReLU(x + conv2(ReLU(conv1(x))))."""
    if not (conv1.c_in == conv1.c_out == conv2.c_in == conv2.c_out == x.channels):
        raise DimensionError(
            f"residual block needs {x.channels} -> {x.channels} convolutions, "
            f"got {conv1.c_in}->{conv1.c_out}, {conv2.c_in}->{conv2.c_out}"
        )
    h = x.with_features(relu(submanifold_conv(x, conv1).features))
    return x.with_features(relu(x.features + submanifold_conv(h, conv2).features))


# --- Blocks ---


@dataclass(frozen=True)
class BlockConfig:
    channels_in: int
    channels_out: int
    stride: int = 2
    n_residual: int = 2

    def __post_init__(self) -> None:
        if self.channels_in < 1 or self.channels_out < 1:
            raise ContractError("block channels must be positive")
        if self.stride not in (1, 2):
            raise ContractError(f"block stride must be 1 or 2, got {self.stride}")
        if self.n_residual < 0:
            raise ContractError("n_residual must be >= 0")


@dataclass(frozen=True, eq=False)
class BlockParams:
    """Down-sampling convolution plus (conv1, conv2) pairs of the residual stack."""

    down: SparseConvLayer
    residual: tuple[tuple[SparseConvLayer, SparseConvLayer], ...]


def block_down(x: SparseTensor, params: BlockParams) -> SparseTensor:
    """Entry convolution of a block followed by ReLU."""
    y = sparse_conv(x, params.down)
    return y.with_features(relu(y.features))


def block_residuals(x: SparseTensor, params: BlockParams) -> SparseTensor:
    for conv1, conv2 in params.residual:
        x = residual_block(x, conv1, conv2)
    return x


def ordinary_block(x: SparseTensor, params: BlockParams) -> SparseTensor:
    """One backbone stage: entry convolution, then the residual stack."""
    y = block_residuals(block_down(x, params), params)
    logger.debug("block out: stride=%d active=%d channels=%d", y.stride, len(y), y.channels)
    return y


def stem_forward(x: SparseTensor, stem: SparseConvLayer) -> SparseTensor:
    y = submanifold_conv(x, stem)
    return y.with_features(relu(y.features))


def backbone_forward(x: SparseTensor, stem: SparseConvLayer, blocks: list[BlockParams]) -> list[SparseTensor]:
    """Single-modal backbone; returns every block's output."""
    h = stem_forward(x, stem)
    outputs = []
    for params in blocks:
        h = ordinary_block(h, params)
        outputs.append(h)
    return outputs


# --- Initialization ---


def init_sparse_conv(rng: np.random.Generator, kind: str, c_in: int, c_out: int, zero: bool = False) -> SparseConvLayer:
    """Seeded uniform init in [-k, k], k = 1/sqrt(27 C_in)."""
    stride = 2 if kind == "strided" else 1
    if zero:
        return SparseConvLayer(kind, np.zeros((3, 3, 3, c_in, c_out)), np.zeros(c_out), stride)
    k = 1.0 / np.sqrt(27 * c_in)
    return SparseConvLayer(
        kind,
        rng.uniform(-k, k, size=(3, 3, 3, c_in, c_out)),
        rng.uniform(-k, k, size=c_out),
        stride,
    )


def init_block(rng: np.random.Generator, cfg: BlockConfig) -> BlockParams:
    kind = "strided" if cfg.stride == 2 else "submanifold"
    down = init_sparse_conv(rng, kind, cfg.channels_in, cfg.channels_out)
    residual = tuple(
        (
            init_sparse_conv(rng, "submanifold", cfg.channels_out, cfg.channels_out),
            init_sparse_conv(rng, "submanifold", cfg.channels_out, cfg.channels_out),
        )
        for _ in range(cfg.n_residual)
    )
    return BlockParams(down, residual)
