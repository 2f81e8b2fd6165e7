"""Run configuration: every tunable of the pipeline in one serializable place."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .errors import ContractError, DataError


@dataclass
class PipelineConfig:
    # feature extraction
    stride: int = 16
    channels: int = 32

    # instance head: target encoding and center decoding
    sigma: float = 10.0
    nms_window: int = 7
    heatmap_threshold: float = 0.1
    top_k: int = 50
    foreground_threshold: float = 0.5
    decoder_channels: int = 16

    # head training
    learning_rate: float = 0.01
    momentum: float = 0.9
    train_steps: int = 300

    # appearance model
    model_channels: int = 96
    lambda1: float = 1e-2
    lambda2: float = 1e-2
    damping: float = 1e-4
    gn_iters_init: int = 5
    gn_iters_update: int = 2
    gn_iters_cg: int = 10
    relu_between: bool = False

    # verification and tracklet lifecycle
    th_reid: float = 0.6
    iou_gate: float = 0.5
    new_target_iou: float = 0.1
    score_threshold: float = 0.5
    retire_after: int = 20

    # memory bank
    gamma: float = 0.1
    capacity: int = 32
    update_period: int = 8

    seed: int = 0

    def __post_init__(self):
        for name in ("stride", "channels", "nms_window", "top_k", "decoder_channels",
                     "model_channels", "gn_iters_init", "gn_iters_update", "gn_iters_cg",
                     "capacity", "update_period", "retire_after", "train_steps"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be a positive count, got {getattr(self, name)}")
        for name in ("heatmap_threshold", "foreground_threshold", "iou_gate",
                     "new_target_iou", "score_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0,1], got {v}")
        if not 0.0 < self.gamma < 1.0:
            raise ContractError(f"gamma must lie in (0,1), got {self.gamma}")
        if self.th_reid < 0.0:
            raise ContractError(f"th_reid must be nonnegative, got {self.th_reid}")
        for name in ("lambda1", "lambda2", "damping"):
            if getattr(self, name) < 0.0:
                raise ContractError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.sigma <= 0.0:
            raise ContractError(f"sigma must be positive, got {self.sigma}")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise DataError("config JSON must be an object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                return cls.from_json(fh.read())
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)
