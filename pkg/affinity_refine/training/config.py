"""Training and run configuration records with JSON round-tripping."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from affinity_refine.constants import (
    DEFAULT_LAMBDA1,
    DEFAULT_LAMBDA2,
    DEFAULT_LR_LOSS_LAST_EPOCHS,
    DEFAULT_MOMENTUM,
    DEFAULT_PROB_FLOOR,
    DEFAULT_TOY_LR,
    TOY_KERNELS,
)
from affinity_refine.errors import ArgumentError, FormatError
from affinity_refine.losses.affinity import AffinityConfig
from affinity_refine.losses.label_reassign import LrConfig
from affinity_refine.pair_graph import KernelSet
from affinity_refine.synth import SceneSpec


def _reject_unknown(cls: type, d: dict[str, Any], section: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ArgumentError(f"unknown {section} config key(s): {', '.join(unknown)}")


@dataclass(slots=True)
class TrainConfig:
    epochs: int = 8
    steps_per_epoch: int = 25
    lr: float = DEFAULT_TOY_LR  # 1e-4 for pretrained backbones, see constants.SOURCE_LR
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = 0.0
    lambda1: float = DEFAULT_LAMBDA1  # affinity weight
    lambda2: float = DEFAULT_LAMBDA2  # label reassign weight
    lr_loss_last_epochs: int = DEFAULT_LR_LOSS_LAST_EPOCHS
    affinity: AffinityConfig = field(default_factory=lambda: AffinityConfig(kernels=KernelSet(TOY_KERNELS)))
    lr_loss: LrConfig = field(default_factory=LrConfig)
    ce_floor: float = DEFAULT_PROB_FLOOR
    seed: int = 0
    hidden_channels: int = 16
    embed_dim: int = 16
    lr_power: float = 0.0  # poly decay exponent; 0 keeps the rate constant
    refresh_pairs: bool = False  # rebuild pair sets each epoch where the model agrees with the pseudo map
    snapshot_every_epoch: bool = False

    def __post_init__(self) -> None:
        if isinstance(self.affinity, dict):
            self.affinity = AffinityConfig.from_dict(self.affinity)
        if isinstance(self.lr_loss, dict):
            self.lr_loss = LrConfig.from_dict(self.lr_loss)
        if self.epochs < 1:
            raise ArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if self.steps_per_epoch < 1:
            raise ArgumentError(f"steps_per_epoch must be >= 1, got {self.steps_per_epoch}")
        if not self.lr > 0:
            raise ArgumentError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ArgumentError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.lr_power < 0:
            raise ArgumentError(f"lr_power must be >= 0, got {self.lr_power}")
        if self.weight_decay < 0:
            raise ArgumentError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ArgumentError(f"lambda1 and lambda2 must be >= 0, got {self.lambda1}, {self.lambda2}")
        if not 0 <= self.lr_loss_last_epochs <= self.epochs:
            raise ArgumentError(
                f"lr_loss_last_epochs must be in [0, epochs={self.epochs}], got {self.lr_loss_last_epochs}"
            )
        if self.hidden_channels < 1 or self.embed_dim < 1:
            raise ArgumentError("hidden_channels and embed_dim must be >= 1")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def lr_at(self, step: int) -> float:
        """Learning rate for the 0-based global ``step``: lr * (1 - step / total) ** lr_power."""
        if self.lr_power == 0.0:
            return self.lr
        return self.lr * (1.0 - step / self.total_steps) ** self.lr_power

    def lr_loss_active(self, epoch: int) -> bool:
        """Label reassign runs in the last ``lr_loss_last_epochs`` epochs (1-based)."""
        return self.lambda2 > 0 and epoch > self.epochs - self.lr_loss_last_epochs

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = value.to_dict() if hasattr(value, "to_dict") else value
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TrainConfig:
        _reject_unknown(cls, d, "train")
        return cls(**d)


@dataclass(slots=True)
class RunConfig:
    """Everything a ``train`` run needs: the optimisation settings and the scene to train on."""

    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)

    def __post_init__(self) -> None:
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        if isinstance(self.scene, dict):
            self.scene = SceneSpec.from_dict(self.scene)

    def to_dict(self) -> dict[str, Any]:
        return {"train": self.train.to_dict(), "scene": self.scene.to_dict()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RunConfig:
        _reject_unknown(cls, d, "run")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        text = Path(path).read_text(encoding="utf-8")
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: invalid JSON: {e.msg}", offset=e.pos) from e
        if not isinstance(data, dict):
            raise FormatError(f"{path}: expected a JSON object", offset=0)
        return cls.from_dict(data)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
