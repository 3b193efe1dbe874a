"""Multi-scale neck: bring the last backbone stages onto one BEV grid."""

from __future__ import annotations

import logging

import numpy as np

from radar_fusion.errors import ContractError, DimensionError
from radar_fusion.pillar_path import BevMap, column_sum
from radar_fusion.voxel_grid import SparseTensor

logger = logging.getLogger("radar-fusion")


def rescale_coords(x: SparseTensor, reference_stride: int) -> SparseTensor:
    """Multiply coordinates by stride / reference_stride; features are unchanged."""
    if reference_stride < 1 or x.stride < reference_stride or x.stride % reference_stride:
        raise ContractError(
            f"cannot rescale stride {x.stride} to reference stride {reference_stride}"
        )
    factor = x.stride // reference_stride
    return SparseTensor(x.coords * factor, x.features, reference_stride, x.spec)


def combine_multiscale(tensors: list[SparseTensor], reference_stride: int | None = None) -> BevMap:
    """Union of all rescaled voxels, summed per (x, y) over z and over scales.

    Duplicated coordinates across scales are kept as separate rows and
    summed, so the result does not depend on the order of ``tensors``.
    """
    if not tensors:
        raise ContractError("combine_multiscale needs at least one tensor")
    ref = reference_stride if reference_stride is not None else min(t.stride for t in tensors)
    widths = {t.channels for t in tensors}
    if len(widths) != 1:
        raise DimensionError(f"neck inputs have differing channel widths {sorted(widths)}")
    spec = tensors[0].spec
    coords, feats = [], []
    for t in tensors:
        if t.spec != spec:
            raise ContractError("neck inputs must share one voxel grid")
        r = rescale_coords(t, ref)
        coords.append(r.coords)
        feats.append(r.features)
    data = column_sum(np.concatenate(coords), np.concatenate(feats), spec, ref)
    logger.debug("neck: %d tensors -> BEV %s at stride %d", len(tensors), data.shape, ref)
    return BevMap(data, spec, ref)
