"""Configuration loading for the radar fusion pipeline.

A run is described by one JSON document (schema version 1). The document
names a dataset preset (``vod``, ``tj4d`` or ``synthetic``) and overrides
any of the sections below; everything not mentioned keeps the preset or
dataclass default. Resolution chain:
    1. Dataclass defaults
    2. Dataset preset (ranges, cells, schema, classes, IoU thresholds)
    3. The JSON document
    4. Environment variable overrides (RADAR_FUSION_SEED, RADAR_FUSION_THREADS)
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from types import UnionType
from typing import Any, Union, get_args, get_origin, get_type_hints

from radar_fusion.errors import ConfigError

logger = logging.getLogger("radar-fusion")

CONFIG_VERSION = 1

# --- Paths ---

FUSION_HOME = Path(os.environ.get("RADAR_FUSION_HOME", Path.home() / ".radar-fusion"))
DEFAULT_OUT_DIR = Path("radar-fusion-out")
DEBUG_LOG = Path(os.environ.get("RADAR_FUSION_DEBUG_LOG", "/tmp/radar_fusion_debug.log"))

# --- Debug logging ---


def debug(msg: str) -> None:
    """Append a timestamped debug line to the fusion debug log."""
    logger.debug(msg)
    try:
        with open(DEBUG_LOG, "a") as f:
            f.write(f"[{time.strftime('%H:%M:%S')}] {msg}\n")
    except OSError:
        pass


# --- Dataset presets ---

Vec3 = tuple[float, float, float]


@dataclass(frozen=True)
class DatasetPreset:
    """Published constants for one dataset. Ranges and cells are (x, y, z) meters."""

    name: str
    schema: tuple[str, ...]
    voxel_range: tuple[Vec3, Vec3]
    pillar_range: tuple[Vec3, Vec3]
    voxel_cell: Vec3
    pillar_cell: tuple[float, float]
    classes: tuple[str, ...]
    iou_thresholds: dict[str, float]
    ap_points: int
    iou_kind: str
    max_range: float | None = None


VOD_SCHEMA = ("x", "y", "z", "RCS", "v_r", "v_rc", "t")
TJ4D_SCHEMA = ("x", "y", "z", "v_rc", "Power")

PRESETS: dict[str, DatasetPreset] = {
    "vod": DatasetPreset(
        name="vod",
        schema=VOD_SCHEMA,
        voxel_range=((0.0, -25.6, -3.0), (51.2, 25.6, 2.0)),
        pillar_range=((0.0, -25.6, -3.0), (51.2, 25.6, 2.0)),
        voxel_cell=(0.05, 0.05, 0.125),
        pillar_cell=(0.16, 0.16),
        classes=("Car", "Pedestrian", "Cyclist"),
        iou_thresholds={"Car": 0.5, "Pedestrian": 0.25, "Cyclist": 0.25},
        ap_points=11,
        iou_kind="3d",
    ),
    "tj4d": DatasetPreset(
        name="tj4d",
        schema=TJ4D_SCHEMA,
        voxel_range=((0.0, -40.0, -4.0), (70.4, 40.0, 2.0)),
        pillar_range=((0.0, -39.68, -4.0), (69.12, 39.68, 2.0)),
        voxel_cell=(0.05, 0.05, 0.125),
        pillar_cell=(0.16, 0.16),
        classes=("Car", "Pedestrian", "Cyclist", "Truck"),
        iou_thresholds={"Car": 0.5, "Pedestrian": 0.25, "Cyclist": 0.25, "Truck": 0.5},
        ap_points=40,
        iou_kind="3d",
        max_range=70.0,
    ),
    # Desk-scale scenes: VoD schema and cells over a 12.8 m square.
    "synthetic": DatasetPreset(
        name="synthetic",
        schema=VOD_SCHEMA,
        voxel_range=((0.0, -6.4, -3.0), (12.8, 6.4, 2.0)),
        pillar_range=((0.0, -6.4, -3.0), (12.8, 6.4, 2.0)),
        voxel_cell=(0.05, 0.05, 0.125),
        pillar_cell=(0.16, 0.16),
        classes=("Car", "Pedestrian", "Cyclist"),
        iou_thresholds={"Car": 0.5, "Pedestrian": 0.25, "Cyclist": 0.25},
        ap_points=11,
        iou_kind="3d",
    ),
}


def get_preset(name: str) -> DatasetPreset:
    """Look up a dataset preset by name."""
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown dataset preset: {name!r} (known: {sorted(PRESETS)})") from None


# --- Config sections ---


@dataclass
class SyntheticSettings:
    """Synthetic scene generation (used when no data_root is given)."""

    n_frames: int = 1
    n_boxes: int = 4
    n_points: int = 400
    image_size: tuple[int, int] = (640, 480)


@dataclass
class FusionSettings:
    """Fusion block selection. Defaults: MSDFF, n=2, fusion before the residual stack."""

    kind: str = "MSDFF"
    n_fusion: int = 2
    placement: str = "BR"
    n_levels: int = 4
    n_samples: int = 4
    image_channels: int = 16
    modality: str = "full"
    mask_blur: bool = False
    zero_out_of_view: bool = False
    zero_out_proj: bool = False


@dataclass
class BackboneSettings:
    """Voxel backbone: six blocks, input stem, channel doubling."""

    base_channels: tuple[int, ...] = (16, 32, 64, 128, 128, 128)
    double_channels: bool = True
    strides: tuple[int, ...] = (1, 2, 2, 2, 2, 2)
    n_residual: int = 2
    neck_blocks: tuple[int, ...] = (4, 5, 6)

    @property
    def channels(self) -> tuple[int, ...]:
        factor = 2 if self.double_channels else 1
        return tuple(c * factor for c in self.base_channels)


@dataclass
class PillarSettings:
    """Pillar variant: dense BEV blocks, z-bins used when lifting."""

    channels: int = 64
    n_blocks: int = 6
    strides: tuple[int, ...] = (1, 1, 1, 1, 1, 1)
    z_bins: int = 10


@dataclass
class HeadSettings:
    """Semantic-guided head and the pass-through detection stub."""

    enabled: bool = True
    attach_stage: int | None = None
    hidden_layers: int = 2
    echo_ground_truth: bool = False
    echo_score: float = 0.9
    detections: list[dict] = field(default_factory=list)


@dataclass
class LossSettings:
    """Loss weights (alpha_seg, alpha_det) and focal-loss parameters."""

    alpha_seg: float = 1.0
    alpha_det: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class EvalSettings:
    """Evaluation regimes and blur-diagnostic grid."""

    regimes: tuple[str, ...] = ("EAA", "DC")
    ap_points: tuple[int, ...] = (11, 40)
    iou_thresholds: dict[str, float] = field(default_factory=dict)
    iou_kind: str = ""
    max_range: float | None = None
    corridor: tuple[float, float, float] = (-4.0, 4.0, 25.0)
    tau_step: float = 0.01
    detections_dir: str = ""


@dataclass
class RunConfig:
    """Fully merged run configuration."""

    version: int = CONFIG_VERSION
    dataset: str = "synthetic"
    variant: str = "voxel"
    seed: int = 0
    threads: int = 1
    data_root: str = ""
    frames: list[str] = field(default_factory=list)
    weights: str = ""
    synthetic: SyntheticSettings = field(default_factory=SyntheticSettings)
    fusion: FusionSettings = field(default_factory=FusionSettings)
    backbone: BackboneSettings = field(default_factory=BackboneSettings)
    pillar: PillarSettings = field(default_factory=PillarSettings)
    head: HeadSettings = field(default_factory=HeadSettings)
    loss: LossSettings = field(default_factory=LossSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    # Raw document for commands that need more detail
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def preset(self) -> DatasetPreset:
        return get_preset(self.dataset)

    @property
    def class_thresholds(self) -> dict[str, float]:
        """IoU thresholds per class name, preset values overridden by eval settings."""
        merged = dict(self.preset.iou_thresholds)
        merged.update(self.eval.iou_thresholds)
        return merged

    def to_dict(self) -> dict:
        """Canonical dict form (no raw document), used for hashing and manifests."""
        data = dataclasses.asdict(self)
        data.pop("raw", None)
        return data


_SECTIONS: dict[str, type] = {
    "synthetic": SyntheticSettings,
    "fusion": FusionSettings,
    "backbone": BackboneSettings,
    "pillar": PillarSettings,
    "head": HeadSettings,
    "loss": LossSettings,
    "eval": EvalSettings,
}

_CHOICES: dict[str, tuple[Any, ...]] = {
    "variant": ("voxel", "pillar"),
    "fusion.kind": ("SFF", "MSDFF"),
    "fusion.placement": ("BR", "AR"),
    "fusion.modality": ("full", "no_image", "no_voxel"),
    "eval.iou_kind": ("", "3d", "bev"),
}


# --- Config file I/O ---


def atomic_write_json(path: Path, data: dict) -> None:
    """Write JSON atomically via temp file + rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    try:
        with open(tmp, "w") as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write("\n")
            f.flush()
            os.fsync(f.fileno())
        tmp.replace(path)
    except Exception:
        tmp.unlink(missing_ok=True)
        raise


def load_raw_config(path: Path) -> dict:
    """Load a config document as a raw dict."""
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _coerce(name: str, hint: Any, value: Any) -> Any:
    """Check a JSON value against a field's annotated type, recursing into containers."""
    origin = get_origin(hint)
    args = get_args(hint)
    if origin in (Union, UnionType):
        if value is None and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _coerce(name, inner, value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config key {name} must be true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {name} must be an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {name} must be a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"config key {name} must be a string, got {value!r}")
        return value
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key {name} must be a list, got {value!r}")
        if origin is list:
            items = [args[0]] * len(value) if args else [Any] * len(value)
        elif len(args) == 2 and args[1] is Ellipsis:
            items = [args[0]] * len(value)
        elif len(value) != len(args):
            raise ConfigError(f"config key {name} must have {len(args)} entries, got {value!r}")
        else:
            items = list(args)
        checked = [_coerce(f"{name}[{i}]", h, v) for i, (h, v) in enumerate(zip(items, value))]
        return tuple(checked) if origin is tuple else checked
    if hint is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"config key {name} must be an object, got {value!r}")
        if not args:
            return value
        key_hint, value_hint = args
        return {
            _coerce(f"{name} key", key_hint, k): _coerce(f"{name}.{k}", value_hint, v)
            for k, v in value.items()
        }
    return value


def _apply_section(obj: Any, data: dict, prefix: str) -> None:
    hints = get_type_hints(type(obj))
    known = {f.name for f in dataclasses.fields(obj)}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if key not in known or key == "raw":
            raise ConfigError(f"unknown config key: {name}")
        setattr(obj, key, _coerce(name, hints[key], value))
        choices = _CHOICES.get(name)
        if choices is not None and getattr(obj, key) not in choices:
            raise ConfigError(f"config key {name} must be one of {list(choices)}, got {value!r}")


def _validate(cfg: RunConfig) -> None:
    get_preset(cfg.dataset)
    if cfg.version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {cfg.version} (expected {CONFIG_VERSION})")
    bb = cfg.backbone
    if len(bb.base_channels) != len(bb.strides):
        raise ConfigError("backbone.base_channels and backbone.strides must have equal length")
    if any(s not in (1, 2) for s in bb.strides):
        raise ConfigError("backbone.strides entries must be 1 or 2")
    if not 0 <= cfg.fusion.n_fusion <= len(bb.strides):
        raise ConfigError(f"fusion.n_fusion must lie in [0, {len(bb.strides)}]")
    if cfg.fusion.n_levels < 1 or cfg.fusion.n_samples < 1:
        raise ConfigError("fusion.n_levels and fusion.n_samples must be positive")
    if len(cfg.pillar.strides) != cfg.pillar.n_blocks:
        raise ConfigError("pillar.strides must list one stride per pillar block")
    if cfg.variant == "pillar" and cfg.fusion.n_fusion > cfg.pillar.n_blocks:
        raise ConfigError("fusion.n_fusion exceeds pillar.n_blocks")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    for cls, thr in cfg.class_thresholds.items():
        if not 0.0 < thr <= 1.0:
            raise ConfigError(f"IoU threshold for {cls} must lie in (0, 1], got {thr}")
    for regime in cfg.eval.regimes:
        if regime not in ("EAA", "DC"):
            raise ConfigError(f"eval.regimes entries must be EAA or DC, got {regime!r}")
    for pts in cfg.eval.ap_points:
        if pts not in (11, 40):
            raise ConfigError(f"eval.ap_points entries must be 11 or 40, got {pts!r}")


def config_from_dict(data: dict) -> RunConfig:
    """Build a RunConfig from a raw document merged over defaults."""
    cfg = RunConfig(raw=data)
    top = {k: v for k, v in data.items() if k not in _SECTIONS}
    _apply_section(cfg, top, "")
    for section, cls in _SECTIONS.items():
        sub = data.get(section)
        if sub is None:
            continue
        if not isinstance(sub, dict):
            raise ConfigError(f"config section {section} must be an object")
        obj = cls()
        _apply_section(obj, sub, f"{section}.")
        setattr(cfg, section, obj)

    # Environment variable overrides
    if env_seed := os.environ.get("RADAR_FUSION_SEED"):
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"RADAR_FUSION_SEED must be an integer, got {env_seed!r}") from None
    if env_threads := os.environ.get("RADAR_FUSION_THREADS"):
        try:
            cfg.threads = int(env_threads)
        except ValueError:
            raise ConfigError(
                f"RADAR_FUSION_THREADS must be an integer, got {env_threads!r}"
            ) from None

    _validate(cfg)
    return cfg


def load_config(path: Path | None = None) -> RunConfig:
    """Load the fully merged run config. ``None`` gives the synthetic defaults."""
    data = load_raw_config(path) if path is not None else {}
    cfg = config_from_dict(data)
    debug(f"Loaded config dataset={cfg.dataset} variant={cfg.variant} from {path}")
    return cfg


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 over the canonical (sorted-key) JSON form of the config.

    The thread count is left out: it never changes results.
    """
    data = cfg.to_dict()
    data.pop("threads", None)
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
