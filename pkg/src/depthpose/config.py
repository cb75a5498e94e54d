"""Run configuration shared by the command-line tools."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .cascade import OBJECTIVES, CascadeConfig, CascadedPoseRegressor
from .depthcam import CameraModel, MotionConfig
from .forest import ForestTrainParams
from .skeleton import SkeletonModel


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    stage_counts: tuple = (5, 10, 5)
    n_trees: int = 16
    max_depth: int = 15
    n_candidates: int = 200
    n_thresholds: int = 10
    min_samples_leaf: int = 5
    bagging_fraction: float = 0.8
    n_descriptors: int = 1000
    probe_offset_mm: float = 100.0
    beta_max: float = 4.0
    line_search_tol: float = 1e-3
    bandwidth: float = 0.5
    objective: str = "gradient"
    seed: int = 0
    camera: dict = field(default_factory=lambda: CameraModel().to_dict())
    motion: dict = field(default_factory=lambda: MotionConfig().to_dict())
    skeleton: Optional[str] = None   # path to a skeleton JSON; None = bundled default

    def __post_init__(self):
        self.stage_counts = tuple(self.stage_counts)
        self.validate()

    def validate(self) -> None:
        try:
            if len(self.stage_counts) != 3 or any(not isinstance(h, int) or h < 0 for h in self.stage_counts):
                raise ConfigError("stage_counts must be three non-negative integers")
            if self.objective not in OBJECTIVES:
                raise ConfigError(f"objective must be one of {OBJECTIVES}")
            if self.probe_offset_mm <= 0 or self.beta_max <= 0 or self.line_search_tol <= 0 or self.bandwidth <= 0:
                raise ConfigError("probe_offset_mm, beta_max, line_search_tol and bandwidth must be positive")
            if self.n_descriptors < 1:
                raise ConfigError("n_descriptors must be >= 1")
            self.forest_params()
            self.camera_model()
            MotionConfig.from_dict(self.motion)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(doc)

    def replace(self, **overrides) -> "RunConfig":
        d = self.to_dict()
        d.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_counts"] = list(self.stage_counts)
        return d

    def forest_params(self) -> ForestTrainParams:
        return ForestTrainParams(self.n_trees, self.max_depth, self.n_candidates, self.n_thresholds,
                                 self.min_samples_leaf, self.bagging_fraction, 0)

    def camera_model(self) -> CameraModel:
        return CameraModel(**self.camera)

    def motion_config(self) -> MotionConfig:
        return MotionConfig.from_dict(self.motion)

    def skeleton_model(self) -> SkeletonModel:
        return SkeletonModel.default() if self.skeleton is None else SkeletonModel.load(self.skeleton)

    def cascade_config(self, n_jobs: int = 1) -> CascadeConfig:
        return CascadeConfig(self.stage_counts, self.forest_params(), self.probe_offset_mm / 1000.0,
                             self.n_descriptors, self.beta_max, self.line_search_tol, self.bandwidth,
                             self.objective, self.seed, n_jobs)

    def estimator(self, camera: Optional[CameraModel] = None, n_jobs: int = 1) -> CascadedPoseRegressor:
        return CascadedPoseRegressor(
            skeleton=self.skeleton_model(), camera=camera or self.camera_model(),
            stage_counts=self.stage_counts, n_trees=self.n_trees, max_depth=self.max_depth,
            n_candidates=self.n_candidates, n_thresholds=self.n_thresholds,
            min_samples_leaf=self.min_samples_leaf, bagging_fraction=self.bagging_fraction,
            n_descriptors=self.n_descriptors, probe_offset=self.probe_offset_mm / 1000.0,
            beta_max=self.beta_max, line_search_tol=self.line_search_tol, bandwidth=self.bandwidth,
            objective=self.objective, random_state=self.seed, n_jobs=n_jobs)
