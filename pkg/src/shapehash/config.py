"""Pipeline configuration: one JSON document, field-level overrides.

``PipelineConfig`` collects every tunable of the pipeline stages.  The
hyperparameter grid mirrors the standard search space: bit sizes 16 to 80 in
steps of 8, learning rates {0.1, 0.01}, batch sizes {32, 48, 64}, L1/L2
weight penalties {0, 1e-8}, margins {24, 36, 48}, and quantization weights
{1e-3, 1e-5}.
"""

from __future__ import annotations

import itertools
import json
from pathlib import Path

from pydantic import BaseModel, Field, field_validator

from .cosfire import CosfireHyperparams, default_orientations
from .errors import DataError
from .hashnet import DshLossParams, TrainConfig

GRID_BIT_SIZES = (16, 24, 32, 40, 48, 56, 64, 72, 80)


class GridSpec(BaseModel):
    """Cartesian hyperparameter grid for the bit-size analysis."""

    bits: list[int] = list(GRID_BIT_SIZES)
    learning_rate: list[float] = [0.1, 0.01]
    batch_size: list[int] = [32, 48, 64]
    l1_weight: list[float] = [0.0, 1e-8]
    l2_weight: list[float] = [0.0, 1e-8]
    margin: list[float] = [24.0, 36.0, 48.0]
    reg_weight: list[float] = [1e-3, 1e-5]

    @field_validator("bits")
    @classmethod
    def _bits_supported(cls, value: list[int]) -> list[int]:
        bad = [b for b in value if b not in GRID_BIT_SIZES]
        if bad:
            raise ValueError(f"grid bit sizes must be among {GRID_BIT_SIZES}, got {bad}")
        return value

    def combos(self) -> list[dict]:
        """All non-bit hyperparameter combinations, in declared field order."""
        return [
            {
                "learning_rate": lr,
                "batch_size": bs,
                "l1_weight": l1,
                "l2_weight": l2,
                "margin": m,
                "reg_weight": rw,
            }
            for lr, bs, l1, l2, m, rw in itertools.product(
                self.learning_rate,
                self.batch_size,
                self.l1_weight,
                self.l2_weight,
                self.margin,
                self.reg_weight,
            )
        ]


class PipelineConfig(BaseModel):
    """Every stage setting, loadable from one JSON file."""

    manifest: Path | None = None
    workdir: Path | None = None
    n_sigma: float = 3.0
    clip_max_iters: int = 100
    cosfire: CosfireHyperparams = Field(default_factory=CosfireHyperparams)
    orientation_count: int = 12
    filters_per_class: int = 2
    bits: int = 72
    hidden: tuple[int, int] = (300, 200)
    train: TrainConfig = Field(default_factory=TrainConfig)
    loss: DshLossParams = Field(default_factory=DshLossParams)
    threshold: float = 0.0
    k_eval: int = 100
    threads: int = 1
    grid: GridSpec = Field(default_factory=GridSpec)

    @field_validator("bits", "orientation_count", "filters_per_class", "k_eval", "threads")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be a positive integer")
        return value

    def orientations(self) -> tuple[float, ...]:
        return default_orientations(self.orientation_count)

    @classmethod
    def load(cls, path: Path) -> "PipelineConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON: {exc}") from exc
        try:
            return cls.model_validate(doc)
        except ValueError as exc:
            raise DataError(f"{path}: invalid config: {exc}") from exc
