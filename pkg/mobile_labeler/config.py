#!/usr/bin/env python3
"""
Pipeline Configuration
One JSON document holding every stage's hyperparameters, validated up front
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from mobile_labeler.errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent.parent / "configs" / "pipeline_config.json"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class AggregationWindow(_Section):
    """Along-route window [h_start, h_end] and scan spacing for dense-cloud aggregation"""

    h_start: float = 0.0
    h_end: float = 70.0
    spacing: float = Field(2.0, gt=0)
    forward_only: bool = False

    @model_validator(mode="after")
    def _check_range(self):
        if not self.h_end > self.h_start:
            raise ValueError("h_end must be greater than h_start")
        if not self.h_start >= -self.h_end:
            raise ValueError("h_start must be >= -h_end")
        return self


class EphemeralityConfig(_Section):
    r: float = Field(0.3, gt=0)
    window: AggregationWindow = AggregationWindow()
    include_own_traversal: bool = True
    max_traversals: Optional[int] = Field(None, ge=2)
    # traversals above this size fall back to per-selection dense clouds
    shared_grid_max_points: int = Field(20_000_000, ge=0)


class GraphConfig(_Section):
    k: int = Field(70, ge=1)
    r_prime: float = Field(2.0, gt=0)


class DBSCANConfig(_Section):
    eps: float = Field(0.1, ge=0)
    min_samples: int = Field(10, ge=1)


class FilterConfig(_Section):
    """Cluster and box filters: PP percentile test plus the common-sense predicates"""

    alpha: float = Field(20.0, ge=0, le=100)
    gamma: float = Field(0.7, ge=0, le=1)
    min_points: int = Field(10, ge=1)
    volume_min: float = Field(0.5, ge=0)
    volume_max: float = Field(120.0, gt=0)
    height_max_min: float = 0.5
    height_min_max: float = 1.0

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.volume_min > self.volume_max:
            raise ValueError("volume_min must not exceed volume_max")
        return self


class GroundConfig(_Section):
    inlier_threshold: float = Field(0.15, gt=0)
    iterations: int = Field(200, ge=1)
    min_inlier_fraction: float = Field(0.2, ge=0, le=1)
    sensor_height: float = Field(1.7, gt=0)
    min_points: int = Field(50, ge=3)
    min_normal_z: float = Field(0.7, ge=0, le=1)
    seed: int = 0


class SeedLabelConfig(_Section):
    use_pp: bool = True
    # only used by the no-PP variant, which clusters raw geometry with Euclidean edge weights
    ground_clearance: float = Field(0.25, ge=0)
    no_pp_eps: float = Field(1.0, gt=0)


class DetectorConfig(_Section):
    name: Literal["baseline"] = "baseline"
    eps: float = Field(1.0, gt=0)
    min_samples: int = Field(10, ge=1)
    score_threshold: float = Field(0.5, ge=0, le=1)
    ground_clearance: float = Field(0.25, ge=0)
    max_range: float = Field(80.0, gt=0)
    logistic_center: float = Field(3.0, gt=0)
    logistic_slope: float = Field(1.5, gt=0)


class SelfTrainingConfig(_Section):
    rounds: int = Field(10, ge=0)
    pp_filter: bool = True
    seed_fraction: float = Field(1.0, ge=0, le=1)


class EvalConfig(_Section):
    iou_threshold: float = 0.25
    mode: Literal["bev", "3d"] = "bev"
    depth_buckets: List[Tuple[float, float]] = [(0.0, 30.0), (30.0, 50.0), (50.0, 80.0), (0.0, 80.0)]

    @field_validator("iou_threshold")
    @classmethod
    def _check_iou(cls, value: float) -> float:
        if value not in (0.25, 0.5):
            raise ValueError("iou_threshold must be 0.25 or 0.5")
        return value

    @field_validator("depth_buckets")
    @classmethod
    def _check_buckets(cls, buckets):
        if not buckets:
            raise ValueError("at least one depth bucket is required")
        for lo, hi in buckets:
            if not 0 <= lo < hi:
                raise ValueError(f"bucket ({lo}, {hi}) must satisfy 0 <= lo < hi")
        return buckets

    def bucket_names(self) -> List[str]:
        return [bucket_name(lo, hi) for lo, hi in self.depth_buckets]


def bucket_name(lo: float, hi: float) -> str:
    return f"{lo:g}-{hi:g}"


class PipelineConfig(_Section):
    threads: Optional[int] = Field(None, ge=1)
    seed: int = 7
    ephemerality: EphemeralityConfig = EphemeralityConfig()
    graph: GraphConfig = GraphConfig()
    dbscan: DBSCANConfig = DBSCANConfig()
    filters: FilterConfig = FilterConfig()
    ground: GroundConfig = GroundConfig()
    seed_labels: SeedLabelConfig = SeedLabelConfig()
    detector: DetectorConfig = DetectorConfig()
    self_training: SelfTrainingConfig = SelfTrainingConfig()
    eval: EvalConfig = EvalConfig()

    def with_overrides(self, overrides: Dict[str, Any]) -> "PipelineConfig":
        """Apply dotted-key overrides ("filters.alpha": 10); None values are ignored"""
        data = self.model_dump()
        for dotted, value in overrides.items():
            if value is None:
                continue
            node = data
            parts = dotted.split(".")
            for part in parts[:-1]:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigError("unknown configuration key", key=dotted)
                node = node[part]
            if parts[-1] not in node:
                raise ConfigError("unknown configuration key", key=dotted)
            node[parts[-1]] = value
        return parse_config(data)


def _describe(error: ValidationError) -> ConfigError:
    first = error.errors()[0]
    key = ".".join(str(p) for p in first["loc"]) or "<root>"
    if first["type"] == "extra_forbidden":
        return ConfigError("unknown configuration key", key=key)
    return ConfigError(first["msg"], key=key)


def parse_config(data: Union[Dict[str, Any], None]) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(data or {})
    except ValidationError as e:
        raise _describe(e) from None


def load_config(path: Optional[Union[str, Path]] = None) -> PipelineConfig:
    """Load a PipelineConfig; falls back to configs/pipeline_config.json, then built-in defaults"""
    config_path = Path(path) if path else DEFAULT_CONFIG_PATH
    if config_path.exists():
        try:
            with open(config_path, "r") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in {config_path}: {e}") from None
        config = parse_config(data)
        logger.debug(f"Loaded config from {config_path}")
    elif path:
        raise ConfigError(f"config file not found: {config_path}")
    else:
        logger.debug("No default config file, using built-in defaults")
        config = PipelineConfig()

    env_threads = os.environ.get("MOBILE_LABELER_THREADS")
    if env_threads and config.threads is None:
        if not env_threads.isdigit():
            raise ConfigError("must be a positive integer", key="MOBILE_LABELER_THREADS")
        config = config.with_overrides({"threads": int(env_threads)})
    return config
