"""Voxel and pillar grids, sparse tensors and the centroid map.

Coordinates are always (z, y, x) integer voxel indices. A SparseTensor at
stride s lives on the grid ceil(dims / s); its rows are kept in packed-key
order, which is also the order every reduction accumulates in.

Packed key layout (int64): x in bits 0-19, y in 20-39, z in 40-59,
log2(stride) in 60-62.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from radar_fusion.dataset_io import PointCloud, RangeSpec
from radar_fusion.errors import ContractError, DimensionError

AXIS_BITS = 20
AXIS_LIMIT = 1 << AXIS_BITS
SNAP_TOL = 1e-9


@dataclass(frozen=True)
class VoxelGridSpec:
    """Regular grid over a RangeSpec; cell is (x, y, z) meters."""

    range: RangeSpec
    cell: tuple[float, float, float]

    def __post_init__(self) -> None:
        cell = tuple(float(c) for c in self.cell)
        if len(cell) != 3 or not all(c > 0 for c in cell):
            raise ContractError(f"cell sizes must be three positive values, got {self.cell}")
        object.__setattr__(self, "cell", cell)
        counts = self.range.extent / np.array(cell)
        rounded = np.round(counts)
        if np.any(np.abs(counts - rounded) > 1e-6 * np.maximum(rounded, 1.0)) or np.any(rounded < 1):
            raise ContractError(
                f"range extent {tuple(self.range.extent)} is not divisible by cell {cell}"
            )
        if np.any(rounded >= AXIS_LIMIT):
            raise ContractError(f"grid of {tuple(rounded)} cells exceeds {AXIS_LIMIT} per axis")

    @classmethod
    def pillars(cls, r: RangeSpec, cell_xy: tuple[float, float]) -> VoxelGridSpec:
        """Single z-cell spanning the whole z-extent."""
        return cls(r, (float(cell_xy[0]), float(cell_xy[1]), r.max[2] - r.min[2]))

    @property
    def dims(self) -> tuple[int, int, int]:
        """(D, H, W) = cell counts along (z, y, x)."""
        nx, ny, nz = (int(round(v)) for v in self.range.extent / np.array(self.cell))
        return (nz, ny, nx)

    @property
    def cell_zyx(self) -> np.ndarray:
        return np.array(self.cell[::-1])

    @property
    def min_zyx(self) -> np.ndarray:
        return np.array(self.range.min[::-1])

    def shape_at(self, stride: int) -> tuple[int, int, int]:
        return tuple(math.ceil(d / stride) for d in self.dims)

    def voxel_indices(self, xyz: np.ndarray) -> np.ndarray:
        """N x 3 (z, y, x) indices of positions; quotients within 1e-9 of an integer snap to it."""
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        q = (xyz - np.array(self.range.min)) / np.array(self.cell)
        r = np.round(q)
        q = np.where(np.abs(q - r) <= SNAP_TOL * np.maximum(np.abs(r), 1.0), r, q)
        idx = np.floor(q).astype(np.int64)[:, ::-1]
        return np.clip(idx, 0, np.array(self.dims) - 1)

    def voxel_centers(self, coords: np.ndarray, stride: int = 1) -> np.ndarray:
        """N x 3 (x, y, z) geometric centers of (z, y, x) voxels at ``stride``."""
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
        zyx = self.min_zyx + (coords + 0.5) * self.cell_zyx * stride
        return zyx[:, ::-1]


def pack_coords(coords: np.ndarray, stride: int = 1) -> np.ndarray:
    """Pack (z, y, x) rows and the stride into int64 keys."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if coords.size and (coords.min() < 0 or coords.max() >= AXIS_LIMIT):
        raise ContractError("voxel coordinates out of packable range")
    level = int(stride).bit_length() - 1
    if stride < 1 or (1 << level) != stride or level > 7:
        raise ContractError(f"stride must be a power of two up to 128, got {stride}")
    return (
        (np.int64(level) << np.int64(60))
        | (coords[:, 0] << np.int64(40))
        | (coords[:, 1] << np.int64(20))
        | coords[:, 2]
    )


def unpack_coords(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of pack_coords: (coords, strides)."""
    keys = np.asarray(keys, dtype=np.int64)
    mask = np.int64(AXIS_LIMIT - 1)
    coords = np.stack([(keys >> 40) & mask, (keys >> 20) & mask, keys & mask], axis=1)
    return coords, np.int64(1) << ((keys >> 60) & np.int64(7))


class CoordIndex:
    """Sorted-key lookup table from (z, y, x) coordinates to row numbers."""

    def __init__(self, coords: np.ndarray, stride: int = 1) -> None:
        keys = pack_coords(coords, stride)
        self.stride = stride
        self._order = np.argsort(keys, kind="stable")
        self._keys = keys[self._order]

    def __len__(self) -> int:
        return int(self._keys.shape[0])

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row numbers of ``coords`` (-1 where absent or out of range)."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        out = np.full(coords.shape[0], -1, dtype=np.int64)
        ok = np.all((coords >= 0) & (coords < AXIS_LIMIT), axis=1)
        if not ok.any() or len(self) == 0:
            return out
        keys = pack_coords(coords[ok], self.stride)
        pos = np.searchsorted(self._keys, keys)
        pos_c = np.minimum(pos, len(self) - 1)
        hit = self._keys[pos_c] == keys
        rows = np.where(hit, self._order[pos_c], -1)
        out[ok] = rows
        return out


@dataclass(frozen=True, eq=False)
class SparseTensor:
    """Active voxels (coords, M x 3 int64) and their features (M x C)."""

    coords: np.ndarray
    features: np.ndarray
    stride: int
    spec: VoxelGridSpec

    def __post_init__(self) -> None:
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != coords.shape[0]:
            raise DimensionError(
                f"features {feats.shape} do not match {coords.shape[0]} coordinates"
            )
        shape = np.array(self.spec.shape_at(self.stride))
        if coords.size and (np.any(coords < 0) or np.any(coords >= shape)):
            raise ContractError(f"coordinates out of bounds for grid {tuple(shape)}")
        keys = pack_coords(coords, self.stride)
        if np.unique(keys).shape[0] != keys.shape[0]:
            raise ContractError("sparse tensor coordinates must be unique")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", feats)

    def __len__(self) -> int:
        return int(self.coords.shape[0])

    @property
    def channels(self) -> int:
        return int(self.features.shape[1])

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.spec.shape_at(self.stride)

    @property
    def keys(self) -> np.ndarray:
        return pack_coords(self.coords, self.stride)

    def index(self) -> CoordIndex:
        return CoordIndex(self.coords, self.stride)

    def with_features(self, features: np.ndarray) -> SparseTensor:
        return replace(self, features=features)

    def sorted(self) -> SparseTensor:
        order = np.argsort(self.keys, kind="stable")
        return replace(self, coords=self.coords[order], features=self.features[order])

    def to_dense(self) -> np.ndarray:
        """D x H x W x C array with zeros at inactive sites."""
        dense = np.zeros((*self.shape, self.channels))
        dense[self.coords[:, 0], self.coords[:, 1], self.coords[:, 2]] = self.features
        return dense


@dataclass(frozen=True, eq=False)
class CentroidMap:
    """Per-voxel centroid, point count and fallback flag, aligned with a tensor's rows."""

    centroids: np.ndarray
    point_count: np.ndarray
    is_center_fallback: np.ndarray

    def __len__(self) -> int:
        return int(self.point_count.shape[0])


def _check_inside(xyz: np.ndarray, spec: VoxelGridSpec) -> None:
    inside = spec.range.contains(xyz)
    if not inside.all():
        bad = xyz[~inside][0]
        raise ContractError(
            f"{int((~inside).sum())} points lie outside the grid range (first: {tuple(bad)}); "
            "crop the cloud first"
        )


def compute_centroids(
    xyz: np.ndarray,
    spec: VoxelGridSpec,
    active_coords: np.ndarray,
    stride: int = 1,
) -> CentroidMap:
    """Mean member position per active voxel; voxel center where no point falls.

    A point belongs to the stride-s voxel floor(base_index / s). Points that
    land in no active voxel are ignored.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    active_coords = np.asarray(active_coords, dtype=np.int64).reshape(-1, 3)
    m = active_coords.shape[0]
    sums = np.zeros((m, 3))
    counts = np.zeros(m, dtype=np.int64)
    if xyz.shape[0] and m:
        rows = CoordIndex(active_coords, stride).lookup(spec.voxel_indices(xyz) // stride)
        hit = rows >= 0
        rows, pts = rows[hit], xyz[hit]
        order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], rows))
        np.add.at(sums, rows[order], pts[order])
        np.add.at(counts, rows[order], 1)
    fallback = counts == 0
    centroids = np.empty((m, 3))
    centroids[~fallback] = sums[~fallback] / counts[~fallback, None]
    centroids[fallback] = spec.voxel_centers(active_coords[fallback], stride)
    return CentroidMap(centroids, counts, fallback)


def voxelize(pc: PointCloud, spec: VoxelGridSpec, reduce: str = "mean") -> tuple[SparseTensor, CentroidMap]:
    """Bin a cropped cloud into a stride-1 SparseTensor plus its centroid map.

    Features are the mean (or the first, in input order) of member point
    channel vectors. Rows come out in packed-key order; members are summed
    in (key, point value) order so the mean does not depend on input order.
    """
    if reduce not in ("mean", "first"):
        raise ContractError(f"reduce must be 'mean' or 'first', got {reduce!r}")
    pts = np.asarray(pc.points, dtype=np.float64)
    xyz = pts[:, :3]
    _check_inside(xyz, spec)
    if pts.shape[0] == 0:
        empty = SparseTensor(np.zeros((0, 3), np.int64), np.zeros((0, pts.shape[1])), 1, spec)
        return empty, CentroidMap(np.zeros((0, 3)), np.zeros(0, np.int64), np.zeros(0, bool))

    idx = spec.voxel_indices(xyz)
    keys = pack_coords(idx)
    if reduce == "mean":
        order = np.lexsort((*pts.T[::-1], keys))
    else:
        order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    starts = np.flatnonzero(np.r_[True, sorted_keys[1:] != sorted_keys[:-1]])
    counts = np.diff(np.r_[starts, sorted_keys.shape[0]])
    coords = idx[order][starts]

    if reduce == "mean":
        feats = np.add.reduceat(pts[order], starts, axis=0) / counts[:, None]
    else:
        feats = pts[order][starts]

    # Centroids follow the same sorted accumulation as the mean features.
    c_order = np.lexsort((*pts.T[::-1], keys))
    centroids = np.add.reduceat(xyz[c_order], starts, axis=0) / counts[:, None]
    cmap = CentroidMap(centroids, counts.astype(np.int64), np.zeros(coords.shape[0], bool))
    return SparseTensor(coords, feats, 1, spec), cmap


def pillarize(pc: PointCloud, spec: VoxelGridSpec, reduce: str = "mean") -> tuple[SparseTensor, CentroidMap]:
    """voxelize on a grid with a single z-cell (D = 1)."""
    if spec.dims[0] != 1:
        raise ContractError(f"pillar grids need exactly one z-cell, got dims {spec.dims}")
    return voxelize(pc, spec, reduce)
