"""Error types shared by every stage of the fusion pipeline.

Each error carries the process exit code the CLI uses when it escapes a
command handler: 2 for configuration problems, 3 for data problems and
4 for numeric failures (NaN/Inf anywhere in the pipeline).
"""

from __future__ import annotations

import numpy as np


class FusionError(Exception):
    """Base class for all radar_fusion errors."""

    exit_code = 1


class ConfigError(FusionError):
    """Invalid or unknown configuration key/value."""

    exit_code = 2


class DataError(FusionError):
    """Missing, truncated or malformed input data."""

    exit_code = 3


class ContractError(FusionError, ValueError):
    """A caller broke an operation's precondition (e.g. points not cropped)."""

    exit_code = 3


class DimensionError(FusionError, ValueError):
    """Array shapes do not line up."""

    exit_code = 3


class NumericError(FusionError):
    """A NaN or Inf was produced; ``stage`` names where it was detected."""

    exit_code = 4

    def __init__(self, stage: str, detail: str = "") -> None:
        self.stage = stage
        msg = f"non-finite values detected at stage '{stage}'"
        if detail:
            msg = f"{msg}: {detail}"
        super().__init__(msg)


def check_finite(stage: str, *arrays: np.ndarray) -> None:
    """Raise NumericError if any array holds NaN or Inf."""
    for i, arr in enumerate(arrays):
        a = np.asarray(arr)
        if a.size and not np.all(np.isfinite(a)):
            bad = int(np.count_nonzero(~np.isfinite(a)))
            raise NumericError(stage, f"array {i} has {bad} non-finite entries")
