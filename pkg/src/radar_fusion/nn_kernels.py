"""Framework-free numeric primitives.

Affine layers (Linear with batch norm folded in at inference), MLPs,
softmax/sigmoid, the bilinear image sampler with its analytic Jacobian,
focal loss, finite-difference gradient checking and the named-tensor
weights container.

Sampler convention: align_corners=False with zero padding. A normalized
coordinate (x, y) addresses source position (x * W - 0.5, y * H - 0.5) in
the feature map, so pixel centers sit at ((j + 0.5) / W, (i + 0.5) / H).
Neighbors outside the map contribute zero.
"""

from __future__ import annotations

import struct
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from radar_fusion.errors import DataError, DimensionError

# --- Layers ---


@dataclass(frozen=True, eq=False)
class AffineLayer:
    """y = W x + b with W of shape (C_out, C_in)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise DimensionError(f"affine weight {w.shape} and bias {b.shape} do not match")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise DimensionError("affine parameters must be finite")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def c_in(self) -> int:
        return int(self.weight.shape[1])

    @property
    def c_out(self) -> int:
        return int(self.weight.shape[0])


def affine_forward(layer: AffineLayer, x: np.ndarray) -> np.ndarray:
    """Apply W x + b to a vector or to each row of a matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.c_in:
        raise DimensionError(f"affine expects {layer.c_in} inputs, got {x.shape[-1]}")
    return x @ layer.weight.T + layer.bias


def fold_batchnorm(
    weight: np.ndarray,
    bias: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-3,
) -> AffineLayer:
    """Fold an inference-mode BatchNorm1d into the preceding Linear layer."""
    scale = np.asarray(gamma, dtype=np.float64) / np.sqrt(np.asarray(running_var) + eps)
    w = np.asarray(weight, dtype=np.float64) * scale[:, None]
    b = (np.asarray(bias, dtype=np.float64) - running_mean) * scale + beta
    return AffineLayer(w, b)


def init_affine(rng: np.random.Generator, c_in: int, c_out: int, zero: bool = False) -> AffineLayer:
    """Seeded uniform init in [-k, k], k = 1/sqrt(C_in)."""
    if zero:
        return AffineLayer(np.zeros((c_out, c_in)), np.zeros(c_out))
    k = 1.0 / np.sqrt(c_in)
    return AffineLayer(rng.uniform(-k, k, size=(c_out, c_in)), rng.uniform(-k, k, size=c_out))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function; strictly inside (0, 1) for finite x."""
    x = np.asarray(x, dtype=np.float64)
    flat = np.atleast_1d(x)
    out = np.empty_like(flat)
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ex = np.exp(flat[~pos])
    out[~pos] = ex / (1.0 + ex)
    out = np.clip(out, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    return out.reshape(x.shape)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax along ``axis``."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


_ACTIVATIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "relu": relu,
    "identity": lambda x: x,
}


def mlp_forward(layers: Sequence[AffineLayer], x: np.ndarray, activation: str = "relu") -> np.ndarray:
    """Alternate affine layers and ``activation``; the final layer stays linear."""
    if not layers:
        raise DimensionError("mlp needs at least one layer")
    act = _ACTIVATIONS[activation]
    h = np.asarray(x, dtype=np.float64)
    for i, layer in enumerate(layers):
        h = affine_forward(layer, h)
        if i < len(layers) - 1:
            h = act(h)
    return h


def init_mlp(rng: np.random.Generator, widths: Sequence[int]) -> tuple[AffineLayer, ...]:
    """Layers mapping widths[0] -> widths[1] -> ... -> widths[-1]."""
    return tuple(init_affine(rng, a, b) for a, b in zip(widths[:-1], widths[1:]))


# --- Feature pyramid and sampler ---


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    """n_I image feature maps, each H_i x W_i x C_i."""

    levels: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        levels = tuple(np.asarray(lv, dtype=np.float64) for lv in self.levels)
        if not levels:
            raise DimensionError("a feature pyramid needs at least one level")
        for i, lv in enumerate(levels):
            if lv.ndim != 3 or min(lv.shape) < 1:
                raise DimensionError(f"pyramid level {i} must be H x W x C, got {lv.shape}")
            if not np.all(np.isfinite(lv)):
                raise DimensionError(f"pyramid level {i} has non-finite entries")
        object.__setattr__(self, "levels", levels)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def shapes(self) -> list[tuple[int, int, int]]:
        return [tuple(int(s) for s in lv.shape) for lv in self.levels]

    @property
    def channels(self) -> int:
        """Common channel count; raises if levels disagree."""
        cs = {lv.shape[2] for lv in self.levels}
        if len(cs) != 1:
            raise DimensionError(f"pyramid levels have differing channel counts {sorted(cs)}")
        return int(cs.pop())


def _corner_terms(fmap: np.ndarray, coords: np.ndarray):
    """Shared bilinear setup: corner values (zero when out of bounds) and fractions."""
    h, w, _ = fmap.shape
    sx = coords[:, 0] * w - 0.5
    sy = coords[:, 1] * h - 0.5
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    def corner(yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        inside = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        vals = np.zeros((coords.shape[0], fmap.shape[2]))
        vals[inside] = fmap[yy[inside], xx[inside]]
        return vals

    v00 = corner(y0, x0)
    v01 = corner(y0, x0 + 1)
    v10 = corner(y0 + 1, x0)
    v11 = corner(y0 + 1, x0 + 1)
    return v00, v01, v10, v11, fx[:, None], fy[:, None]


def bilinear_sample_many(fmap: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample ``fmap`` (H x W x C) at N normalized coordinates -> N x C."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if coords.shape[0] == 0:
        return np.zeros((0, fmap.shape[2]))
    v00, v01, v10, v11, fx, fy = _corner_terms(fmap, coords)
    return (
        v00 * (1 - fx) * (1 - fy)
        + v01 * fx * (1 - fy)
        + v10 * (1 - fx) * fy
        + v11 * fx * fy
    )


def bilinear_sample(fmap: np.ndarray, coord: Sequence[float]) -> np.ndarray:
    """Sample one pyramid level at a normalized coordinate (x, y) -> C-vector."""
    return bilinear_sample_many(np.asarray(fmap, dtype=np.float64), np.asarray(coord))[0]


def bilinear_sample_grad(fmap: np.ndarray, coords: np.ndarray):
    """Values and analytic derivatives w.r.t. the normalized coordinate.

    Returns (value, d_value/dx, d_value/dy), each N x C. The sampler is
    piecewise linear, so the derivative is exact away from cell boundaries.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    h, w, _ = fmap.shape
    v00, v01, v10, v11, fx, fy = _corner_terms(fmap, coords)
    value = v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy) + v10 * (1 - fx) * fy + v11 * fx * fy
    d_sx = (v01 - v00) * (1 - fy) + (v11 - v10) * fy
    d_sy = (v10 - v00) * (1 - fx) + (v11 - v01) * fx
    return value, d_sx * w, d_sy * h


# --- Loss ---


def focal_loss(p: np.ndarray | float, label: np.ndarray | int, alpha: float = 0.25, gamma: float = 2.0):
    """Binary focal loss with p clamped to [1e-6, 1 - 1e-6]."""
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-6, 1.0 - 1e-6)
    y = np.asarray(label)
    pos = -alpha * (1.0 - p) ** gamma * np.log(p)
    neg = -(1.0 - alpha) * p**gamma * np.log(1.0 - p)
    loss = np.where(y == 1, pos, neg)
    return float(loss) if loss.ndim == 0 else loss


# --- Finite differences ---


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e.flat[k] = h
        grad.flat[k] = (f(x + e) - f(x - e)) / (2.0 * h)
    return grad


def finite_diff_jacobian(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian (M x N) of a vector function of N inputs."""
    x = np.asarray(x, dtype=np.float64).ravel()
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))).ravel() / (2.0 * h))
    return np.stack(cols, axis=1)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor), the usual gradient-check metric."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


# --- Weights container ---
#
# Layout (little endian): magic "RFWT", u32 version, u32 tensor count, then
# per tensor: u32 name length, UTF-8 name, u32 rank, u32 dims[rank],
# float32 payload in C order.

WEIGHTS_MAGIC = b"RFWT"
WEIGHTS_VERSION = 1


def write_weights(path: Path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors in insertion order."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<II", WEIGHTS_VERSION, len(tensors)))
        for name, arr in tensors.items():
            a = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(a.tobytes())


def read_weights(path: Path) -> dict[str, np.ndarray]:
    """Read a weights container written by write_weights (float64 arrays)."""
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read weights file {path}: {e}") from e
    if blob[:4] != WEIGHTS_MAGIC:
        raise DataError(f"{path} is not a weights container (bad magic)")
    pos = 4
    try:
        version, count = struct.unpack_from("<II", blob, pos)
        pos += 8
        if version != WEIGHTS_VERSION:
            raise DataError(f"{path}: unsupported weights version {version}")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            if pos + 4 * n > len(blob):
                raise DataError(f"{path}: tensor {name!r} truncated")
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape)
            pos += 4 * n
            tensors[name] = arr.astype(np.float64)
    except struct.error as e:
        raise DataError(f"{path}: truncated weights container ({e})") from e
    return tensors
