"""Point clouds, calibration, labels and feature pyramids on disk.

Dataset layout (KITTI style)::

    <root>/points/<frame_id>.bin     float32 LE rows, C channels per point
    <root>/calib/<frame_id>.txt      P2: / Tr_radar_to_cam: / image_size:
    <root>/labels/<frame_id>.txt     class l w h x y z yaw [u1 v1 u2 v2] [score]
    <root>/pyramids/<frame_id>.pyr   feature pyramid (see write_pyramid)
    <root>/images/<frame_id>.ppm     optional source image (P5/P6)

Labels are stored in the radar frame. The synthetic generator draws
every random quantity from numpy's PCG64 bit generator
(``np.random.default_rng(seed)``), so scenes are reproducible from the
seed alone.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from radar_fusion.errors import ContractError, DataError, DimensionError
from radar_fusion.geometry import (
    CalibrationSet,
    default_radar_to_camera,
    pinhole_intrinsic,
    project_points,
    rotation_z,
)
from radar_fusion.nn_kernels import FeaturePyramid

logger = logging.getLogger("radar-fusion")

SCHEMAS: dict[str, tuple[str, ...]] = {
    "VoD7": ("x", "y", "z", "RCS", "v_r", "v_rc", "t"),
    "TJ4D5": ("x", "y", "z", "v_rc", "Power"),
}

# Class sizes (l, w, h) in meters, from the datasets' anchor settings.
CLASS_SIZES: dict[str, tuple[float, float, float]] = {
    "Car": (3.9, 1.6, 1.56),
    "Pedestrian": (0.8, 0.6, 1.73),
    "Cyclist": (1.76, 0.6, 1.73),
    "Truck": (10.76, 2.66, 3.47),
}

PYRAMID_MAGIC = b"RFPY"
PYRAMID_STRIDES = (4, 8, 16, 32, 64, 128)


def resolve_schema(schema: str | tuple[str, ...] | list[str]) -> tuple[str, ...]:
    """Named schema (VoD7, TJ4D5) or a user list starting with x, y, z."""
    if isinstance(schema, str):
        try:
            return SCHEMAS[schema]
        except KeyError:
            raise DataError(f"unknown point schema {schema!r} (known: {sorted(SCHEMAS)})") from None
    names = tuple(schema)
    if names[:3] != ("x", "y", "z"):
        raise DataError(f"point schema must start with x, y, z; got {names}")
    return names


def wrap_angle(angle: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    k = math.ceil((angle - math.pi) / (2.0 * math.pi))
    return angle - 2.0 * math.pi * k


# --- Types ---


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N x C point matrix with named channels."""

    points: np.ndarray
    schema: tuple[str, ...]
    frame_id: str = ""

    def __post_init__(self) -> None:
        schema = resolve_schema(self.schema)
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != len(schema):
            raise DimensionError(
                f"point matrix {pts.shape} does not match schema of {len(schema)} channels"
            )
        object.__setattr__(self, "schema", schema)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def xyz(self) -> np.ndarray:
        """N x 3 float64 positions."""
        return self.points[:, :3].astype(np.float64)

    def with_points(self, points: np.ndarray) -> PointCloud:
        return replace(self, points=points)


@dataclass(frozen=True)
class RangeSpec:
    """Axis-aligned range [min, max) per axis, (x, y, z) meters."""

    min: tuple[float, float, float]
    max: tuple[float, float, float]

    def __post_init__(self) -> None:
        lo = tuple(float(v) for v in self.min)
        hi = tuple(float(v) for v in self.max)
        if len(lo) != 3 or len(hi) != 3 or not all(a < b for a, b in zip(lo, hi)):
            raise ContractError(f"range min {lo} must be < max {hi} component-wise")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def extent(self) -> np.ndarray:
        return np.array(self.max) - np.array(self.min)

    def contains(self, xyz: np.ndarray) -> np.ndarray:
        """Half-open membership mask for N x 3 positions."""
        xyz = np.asarray(xyz, dtype=np.float64)
        return np.all((xyz >= np.array(self.min)) & (xyz < np.array(self.max)), axis=1)


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box in the radar frame; ``score`` is 1.0 for ground truth."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    class_id: int
    score: float = 1.0
    box2d: tuple[float, float, float, float] | None = None

    def __post_init__(self) -> None:
        size = tuple(float(s) for s in self.size)
        if len(size) != 3 or not all(s > 0 for s in size):
            raise ContractError(f"box size must be three positive values, got {self.size}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        if self.box2d is not None:
            object.__setattr__(self, "box2d", tuple(float(v) for v in self.box2d))

    def to_local(self, xyz: np.ndarray) -> np.ndarray:
        """Express radar-frame points in the box frame (inverse rotate about z)."""
        d = np.asarray(xyz, dtype=np.float64).reshape(-1, 3) - np.array(self.center)
        return d @ rotation_z(self.yaw)  # row-vector form of R(-yaw) d

    def contains(self, xyz: np.ndarray) -> np.ndarray:
        """Closed-box membership mask (faces count as inside)."""
        local = np.abs(self.to_local(xyz))
        half = np.array(self.size) / 2.0
        return np.all(local <= half, axis=1)

    def corners_bev(self) -> np.ndarray:
        """4 x 2 footprint corners, counter-clockwise."""
        l, w, _ = self.size
        local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]]) / 2.0
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array(self.center[:2])

    def corners_3d(self) -> np.ndarray:
        """8 x 3 corners."""
        l, w, h = self.size
        signs = np.array([[sx, sy, sz] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)])
        local = signs * np.array([l, w, h]) / 2.0
        return local @ rotation_z(self.yaw).T + np.array(self.center)

    @property
    def volume(self) -> float:
        l, w, h = self.size
        return l * w * h


# Predictions share the box type; ``score`` carries the confidence.
Detection = Box3D


# --- Point clouds ---


def load_pointcloud(path: Path, schema: str | tuple[str, ...] = "VoD7", frame_id: str = "") -> PointCloud:
    """Read little-endian float32 rows; N is inferred from the file length."""
    names = resolve_schema(schema)
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read point cloud {path}: {e}") from e
    row = 4 * len(names)
    if len(blob) % row:
        expected = (len(blob) // row) * row
        raise DataError(
            f"{path}: size {len(blob)} bytes is not a multiple of {row} "
            f"(expected {expected} or {expected + row} bytes for {len(names)} channels)"
        )
    pts = np.frombuffer(blob, dtype="<f4").reshape(-1, len(names)).astype(np.float32)
    return PointCloud(pts, names, frame_id or Path(path).stem)


def write_pointcloud(path: Path, pc: PointCloud) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(pc.points, dtype="<f4").tobytes())


def crop_range(pc: PointCloud, r: RangeSpec) -> PointCloud:
    """Keep points with min <= p < max per axis, preserving order."""
    if pc.schema[:3] != ("x", "y", "z"):
        raise ContractError("crop_range needs a schema starting with x, y, z")
    return pc.with_points(pc.points[r.contains(pc.points[:, :3])])


# --- Calibration ---


def parse_calibration(text: str, image_size: tuple[int, int] | None = None, source: str = "<text>") -> CalibrationSet:
    """Parse ``P2:`` (3x4) and ``Tr_radar_to_cam:`` (3x4, bottom row implied)."""
    values: dict[str, list[float]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise DataError(f"{source}:{lineno}: expected 'key: values'")
        key, rest = line.split(":", 1)
        try:
            values[key.strip()] = [float(v) for v in rest.split()]
        except ValueError:
            raise DataError(f"{source}:{lineno}: non-numeric value in {key.strip()!r}") from None

    for key in ("P2", "Tr_radar_to_cam"):
        if key not in values:
            raise DataError(f"{source}: missing calibration entry {key}")
        if len(values[key]) != 12:
            raise DataError(f"{source}: {key} needs 12 values, got {len(values[key])}")

    if "image_size" in values:
        w, h = values["image_size"]
        image_size = (int(w), int(h))
    if image_size is None:
        raise DataError(f"{source}: no image_size entry and no default image size given")

    r2c = np.eye(4)
    r2c[:3, :] = np.array(values["Tr_radar_to_cam"]).reshape(3, 4)
    return CalibrationSet(np.array(values["P2"]).reshape(3, 4), r2c, image_size)


def load_calibration(path: Path, image_size: tuple[int, int] | None = None) -> CalibrationSet:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataError(f"cannot read calibration {path}: {e}") from e
    return parse_calibration(text, image_size, source=str(path))


def format_calibration(calib: CalibrationSet) -> str:
    def row(arr: np.ndarray) -> str:
        return " ".join(repr(float(v)) for v in arr.ravel())

    w, h = calib.image_size
    return (
        f"P2: {row(calib.intrinsic)}\n"
        f"Tr_radar_to_cam: {row(calib.radar_to_camera[:3])}\n"
        f"image_size: {w} {h}\n"
    )


def write_calibration(path: Path, calib: CalibrationSet) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_calibration(calib))


# --- Labels ---


def parse_labels(text: str, classes: tuple[str, ...], source: str = "<text>") -> list[Box3D]:
    """Parse label lines; unknown class names are skipped and reported once."""
    boxes: list[Box3D] = []
    rejected: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) not in (8, 9, 12, 13):
            raise DataError(
                f"{source}:{lineno}: expected 8, 9, 12 or 13 fields, got {len(fields)}"
            )
        name = fields[0]
        try:
            nums = [float(v) for v in fields[1:]]
        except ValueError:
            raise DataError(f"{source}:{lineno}: non-numeric field") from None
        if name not in classes:
            rejected.add(name)
            continue
        l, w, h, x, y, z, yaw = nums[:7]
        rest = nums[7:]
        score = 1.0
        if len(rest) in (1, 5):
            score = rest[-1]
            rest = rest[:-1]
        box2d = tuple(rest) if rest else None
        try:
            boxes.append(Box3D((x, y, z), (l, w, h), yaw, classes.index(name), score, box2d))
        except ContractError as e:
            raise DataError(f"{source}:{lineno}: {e}") from e
    if rejected:
        logger.warning("%s: skipped labels with unknown classes %s", source, sorted(rejected))
    return boxes


def load_labels(path: Path, classes: tuple[str, ...] = ("Car", "Pedestrian", "Cyclist")) -> list[Box3D]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataError(f"cannot read labels {path}: {e}") from e
    return parse_labels(text, tuple(classes), source=str(path))


def format_labels(boxes: list[Box3D], classes: tuple[str, ...]) -> str:
    lines = []
    for b in boxes:
        nums = [*b.size, *b.center, b.yaw]
        if b.box2d is not None:
            nums.extend(b.box2d)
        if b.score != 1.0:
            nums.append(b.score)
        lines.append(" ".join([classes[b.class_id], *(repr(float(v)) for v in nums)]))
    return "\n".join(lines) + ("\n" if lines else "")


def write_labels(path: Path, boxes: list[Box3D], classes: tuple[str, ...] = ("Car", "Pedestrian", "Cyclist")) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_labels(boxes, tuple(classes)))


# --- Feature pyramids ---
#
# Layout (little endian): magic "RFPY", u32 n_I, n_I x (u32 H, u32 W, u32 C),
# then each level's H x W x C float32 plane in C order.


def write_pyramid(path: Path, pyramid: FeaturePyramid) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(PYRAMID_MAGIC)
        f.write(struct.pack("<I", pyramid.n_levels))
        for h, w, c in pyramid.shapes:
            f.write(struct.pack("<III", h, w, c))
        for level in pyramid.levels:
            f.write(np.ascontiguousarray(level, dtype="<f4").tobytes())


def read_pyramid(path: Path) -> FeaturePyramid:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read pyramid {path}: {e}") from e
    if blob[:4] != PYRAMID_MAGIC:
        raise DataError(f"{path} is not a pyramid file (bad magic)")
    try:
        (n_levels,) = struct.unpack_from("<I", blob, 4)
        shapes = [struct.unpack_from("<III", blob, 8 + 12 * i) for i in range(n_levels)]
    except struct.error as e:
        raise DataError(f"{path}: truncated pyramid header") from e
    pos = 8 + 12 * n_levels
    expected = pos + sum(4 * h * w * c for h, w, c in shapes)
    if len(blob) != expected:
        raise DataError(f"{path}: expected {expected} bytes, got {len(blob)}")
    levels = []
    for h, w, c in shapes:
        n = h * w * c
        levels.append(np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(h, w, c))
        pos += 4 * n
    return FeaturePyramid(tuple(levels))


def read_pnm(path: Path) -> np.ndarray:
    """Decode a binary PGM (P5) or PPM (P6) into an H x W x {1,3} array in [0, 1]."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PNM header")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    magic = tokens[0]
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None:
        raise DataError(f"{path}: only binary P5/P6 images are supported, got {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: malformed PNM header {b' '.join(tokens)!r}") from None
    if w < 1 or h < 1 or not 1 <= maxval <= 65535:
        raise DataError(f"{path}: invalid PNM size {w}x{h} or maxval {maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * channels
    expected = n * np.dtype(dtype).itemsize
    if len(blob) - pos < expected:
        raise DataError(f"{path}: pixel data truncated, expected {expected} bytes, got {max(len(blob) - pos, 0)}")
    data = np.frombuffer(blob, dtype=dtype, count=n, offset=pos)
    return data.reshape(h, w, channels).astype(np.float64) / maxval


def _as_float32_grid(arr: np.ndarray) -> np.ndarray:
    # Pyramid values live on the float32 grid so files round-trip exactly.
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


def pyramid_from_image(image: np.ndarray, n_levels: int = 4, channels: int = 16, seed: int = 0) -> FeaturePyramid:
    """Average-pool an image at strides 4, 8, ... and project to ``channels``."""
    rng = np.random.default_rng(seed)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    proj = rng.normal(0.0, 1.0, size=(img.shape[2], channels))
    bias = rng.normal(0.0, 0.1, size=channels)
    levels = []
    for i in range(n_levels):
        s = PYRAMID_STRIDES[i]
        h, w = max(1, img.shape[0] // s), max(1, img.shape[1] // s)
        crop = img[: h * s, : w * s]
        if crop.shape[0] < s or crop.shape[1] < s:
            pooled = np.broadcast_to(img.mean(axis=(0, 1)), (h, w, img.shape[2]))
        else:
            pooled = crop.reshape(h, s, w, s, img.shape[2]).mean(axis=(1, 3))
        levels.append(_as_float32_grid(np.tanh(pooled @ proj + bias)))
    return FeaturePyramid(tuple(levels))


def synthetic_pyramid(
    rng: np.random.Generator,
    image_size: tuple[int, int],
    boxes: list[Box3D],
    n_levels: int = 4,
    channels: int = 16,
) -> FeaturePyramid:
    """Smooth background texture plus a per-class embedding inside each 2D box."""
    w_img, h_img = image_size
    freqs = rng.uniform(0.5, 3.0, size=(channels, 2))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(channels, 2))
    n_classes = max([b.class_id for b in boxes], default=0) + 1
    embeddings = rng.normal(0.0, 1.0, size=(max(n_classes, len(CLASS_SIZES)), channels))
    levels = []
    for i in range(n_levels):
        s = PYRAMID_STRIDES[i]
        h, w = max(1, h_img // s), max(1, w_img // s)
        ys = (np.arange(h) + 0.5) / h
        xs = (np.arange(w) + 0.5) / w
        tex = 0.2 * (
            np.sin(2 * np.pi * freqs[:, 0] * xs[None, :, None] + phases[:, 0])
            * np.cos(2 * np.pi * freqs[:, 1] * ys[:, None, None] + phases[:, 1])
        )
        level = np.broadcast_to(tex, (h, w, channels)).copy()
        for b in boxes:
            if b.box2d is None:
                continue
            u1, v1, u2, v2 = b.box2d
            px = xs * w_img
            py = ys * h_img
            mask = ((py >= v1) & (py <= v2))[:, None] & ((px >= u1) & (px <= u2))[None, :]
            level[mask] += embeddings[b.class_id]
        levels.append(_as_float32_grid(level))
    return FeaturePyramid(tuple(levels))


# --- Synthetic scenes ---


class SyntheticScene(NamedTuple):
    pointcloud: PointCloud
    boxes: list[Box3D]
    pyramid: FeaturePyramid


def default_calibration(image_size: tuple[int, int] = (640, 480)) -> CalibrationSet:
    """Forward-looking pinhole camera co-located with the radar."""
    w, h = image_size
    return CalibrationSet(
        pinhole_intrinsic(0.6 * w, w / 2.0, h / 2.0),
        default_radar_to_camera((0.0, 0.2, 0.0)),
        image_size,
    )


def project_box2d(box: Box3D, calib: CalibrationSet) -> tuple[float, float, float, float] | None:
    """Image-clipped 2D extent of a box's projected corners (None if not visible)."""
    proj = project_points(box.corners_3d(), calib)
    if not np.all(proj.valid & (proj.depth > 0)):
        return None
    w, h = calib.image_size
    u1, v1 = np.clip(proj.pixel.min(axis=0), 0, [w, h])
    u2, v2 = np.clip(proj.pixel.max(axis=0), 0, [w, h])
    if u2 <= u1 or v2 <= v1:
        return None
    return (float(u1), float(v1), float(u2), float(v2))


def _extra_channels(rng: np.random.Generator, schema: tuple[str, ...], n: int) -> np.ndarray:
    cols = []
    for name in schema[3:]:
        if name == "t":
            cols.append(-rng.integers(0, 5, size=n).astype(np.float64))
        elif name == "RCS":
            cols.append(rng.normal(0.0, 6.0, size=n))
        elif name == "Power":
            cols.append(rng.uniform(0.0, 30.0, size=n))
        else:
            cols.append(rng.normal(0.0, 2.0, size=n))
    return np.stack(cols, axis=1) if cols else np.zeros((n, 0))


def generate_synthetic_scene(
    seed: int,
    n_boxes: int,
    n_points: int,
    calib: CalibrationSet,
    *,
    crop: RangeSpec = RangeSpec((0.0, -6.4, -3.0), (12.8, 6.4, 2.0)),
    schema: str | tuple[str, ...] = "VoD7",
    classes: tuple[str, ...] = ("Car", "Pedestrian", "Cyclist"),
    n_levels: int = 4,
    channels: int = 16,
    frame_id: str = "",
    foreground_fraction: float = 0.3,
) -> SyntheticScene:
    """Deterministic scene: boxes on the ground plane, points, and a pyramid."""
    if n_boxes < 0:
        raise ContractError("n_boxes must be >= 0")
    names = resolve_schema(schema)
    rng = np.random.default_rng(seed)
    lo, hi = np.array(crop.min), np.array(crop.max)
    ground = lo[2] + 1.5

    boxes: list[Box3D] = []
    placed: list[tuple[np.ndarray, float]] = []
    for _ in range(n_boxes):
        cls = int(rng.integers(0, len(classes)))
        base = np.array(CLASS_SIZES.get(classes[cls], (1.0, 1.0, 1.5)))
        size = base * rng.uniform(0.9, 1.1, size=3)
        radius = 0.5 * float(np.hypot(size[0], size[1])) + 0.1
        for attempt in range(200):
            cx = rng.uniform(max(lo[0] + radius, 2.0 + radius), hi[0] - radius)
            cy = rng.uniform(lo[1] + radius, hi[1] - radius)
            center = np.array([cx, cy])
            if all(np.linalg.norm(center - c) > radius + r for c, r in placed) or attempt == 199:
                break
        placed.append((center, radius))
        yaw = float(rng.uniform(-np.pi, np.pi))
        cz = min(ground + size[2] / 2.0, hi[2] - size[2] / 2.0 - 0.01)
        boxes.append(Box3D((cx, cy, cz), tuple(size), yaw, cls))

    # Foreground: every box gets at least one point strictly inside.
    fg_parts = []
    per_box = max(1, int(round(foreground_fraction * n_points / max(n_boxes, 1))))
    for b in boxes:
        local = rng.uniform(-0.45, 0.45, size=(per_box, 3)) * np.array(b.size)
        fg_parts.append(local @ rotation_z(b.yaw).T + np.array(b.center))
    fg = np.concatenate(fg_parts) if fg_parts else np.zeros((0, 3))

    n_bg = max(n_points - fg.shape[0], 0)
    bg_parts: list[np.ndarray] = []
    have = 0
    while have < n_bg:
        cand = rng.uniform(lo, hi, size=(2 * (n_bg - have) + 8, 3)).astype(np.float32).astype(np.float64)
        keep = crop.contains(cand)
        for b in boxes:
            keep &= ~b.contains(cand)
        cand = cand[keep][: n_bg - have]
        bg_parts.append(cand)
        have += cand.shape[0]
    bg = np.concatenate(bg_parts) if bg_parts else np.zeros((0, 3))

    xyz = np.concatenate([fg, bg])
    extra = _extra_channels(rng, names, xyz.shape[0])
    points = np.concatenate([xyz, extra], axis=1)[rng.permutation(xyz.shape[0])]
    pc = PointCloud(points.astype(np.float32), names, frame_id)

    boxes = [replace(b, box2d=project_box2d(b, calib)) for b in boxes]
    pyramid = synthetic_pyramid(rng, calib.image_size, boxes, n_levels, channels)
    return SyntheticScene(pc, boxes, pyramid)


# --- Frames ---


@dataclass
class FrameRecord:
    """Everything the pipeline consumes for one frame."""

    frame_id: str
    pointcloud: PointCloud
    calib: CalibrationSet
    boxes: list[Box3D] = field(default_factory=list)
    pyramid: FeaturePyramid | None = None


def list_frames(root: Path) -> list[str]:
    points_dir = Path(root) / "points"
    if not points_dir.is_dir():
        raise DataError(f"dataset root {root} has no points/ directory")
    return sorted(p.stem for p in points_dir.glob("*.bin"))


def load_frame(
    root: Path,
    frame_id: str,
    schema: str | tuple[str, ...],
    classes: tuple[str, ...],
    *,
    image_size: tuple[int, int] | None = None,
    n_levels: int = 4,
    channels: int = 16,
    seed: int = 0,
) -> FrameRecord:
    """Load one frame; the pyramid comes from pyramids/ or, failing that, images/."""
    root = Path(root)
    pc = load_pointcloud(root / "points" / f"{frame_id}.bin", schema, frame_id)
    calib = load_calibration(root / "calib" / f"{frame_id}.txt", image_size)
    label_path = root / "labels" / f"{frame_id}.txt"
    boxes = load_labels(label_path, classes) if label_path.exists() else []

    pyramid = None
    pyr_path = root / "pyramids" / f"{frame_id}.pyr"
    if pyr_path.exists():
        pyramid = read_pyramid(pyr_path)
    else:
        for suffix in (".ppm", ".pgm"):
            img_path = root / "images" / f"{frame_id}{suffix}"
            if img_path.exists():
                pyramid = pyramid_from_image(read_pnm(img_path), n_levels, channels, seed)
                break
    return FrameRecord(frame_id, pc, calib, boxes, pyramid)


def write_frame(root: Path, frame: FrameRecord, classes: tuple[str, ...]) -> None:
    root = Path(root)
    write_pointcloud(root / "points" / f"{frame.frame_id}.bin", frame.pointcloud)
    write_calibration(root / "calib" / f"{frame.frame_id}.txt", frame.calib)
    write_labels(root / "labels" / f"{frame.frame_id}.txt", frame.boxes, classes)
    if frame.pyramid is not None:
        write_pyramid(root / "pyramids" / f"{frame.frame_id}.pyr", frame.pyramid)
