"""Run configuration and model construction."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .decoder import DecoderConfig, TemporalPyramidConfig
from .encoder import EncoderConfig
from .model import Afformer, ModelConfig

MODES = ("supervised", "maskahand_pretrain", "zero_shot_eval", "finetune")
PRECISIONS = ("float32", "float64", "mixed16")


@dataclass
class RunConfig:
    # optimizer: AdamW with decoupled weight decay, cosine decay to zero
    optimizer: str = "adamw"
    lr: float = 3e-4
    weight_decay: float = 0.05
    schedule: str = "cosine"
    batch_size: int = 16
    iterations: int = 5000
    epochs: float | None = None
    backbone_lr_factor: float = 0.1
    # model
    spatial_size: int = 256
    max_frames: int = 64
    channels: int = 256
    heads: int = 4
    encoder_levels: tuple[int, ...] = (2, 3, 4, 5)
    image_levels: tuple[int, ...] = (2, 3, 4)
    video_level: int = 3
    temporal_schedule: tuple[int, ...] | None = None
    trunk_base_width: int = 16
    blocks_per_stage: int = 1
    share_decoder: bool = True
    num_actions: int | None = 7
    action_weight: float = 1.0
    # run
    precision: str = "float32"
    seed: int = 0
    mode: str = "supervised"
    deterministic: bool = True
    train_res: tuple[int, int] | None = None

    def __post_init__(self):
        self.encoder_levels = tuple(self.encoder_levels)
        self.image_levels = tuple(self.image_levels)
        if self.temporal_schedule is not None:
            self.temporal_schedule = tuple(self.temporal_schedule)
        if self.train_res is not None:
            self.train_res = tuple(self.train_res)
        if self.optimizer != "adamw":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.schedule != "cosine":
            raise ValueError(f"unsupported schedule {self.schedule!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {PRECISIONS}")
        for name in ("batch_size", "iterations", "spatial_size", "max_frames", "channels", "heads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or self.weight_decay < 0 or self.backbone_lr_factor < 0:
            raise ValueError("lr, weight_decay and backbone_lr_factor must be nonnegative")
        if self.heads != max(1, self.channels // 64):
            raise ValueError(f"heads must equal channels/64 (at least 1): {self.channels} channels -> "
                             f"{max(1, self.channels // 64)} heads, got {self.heads}")

    @classmethod
    def tiny(cls, **overrides) -> "RunConfig":
        """Desk-scale preset: 32x32 inputs, 32 channels, image levels {2, 3}."""
        base = dict(spatial_size=32, max_frames=8, channels=32, heads=1, encoder_levels=(2, 3),
                    image_levels=(2, 3), video_level=3, trunk_base_width=8, num_actions=3,
                    batch_size=16, iterations=200, lr=2e-3)
        base.update(overrides)
        return cls(**base)

    def iterations_for(self, dataset_size: int) -> int:
        """Iterations to run; ``epochs`` (if set) converts through the dataset size."""
        if self.epochs is None:
            return self.iterations
        return max(1, int(round(self.epochs * dataset_size / self.batch_size)))

    def model_config(self) -> ModelConfig:
        l_min = min(self.image_levels)
        extent = max(self.spatial_size // 2**l_min, 1)
        has_actions = self.mode in ("supervised", "finetune") and self.num_actions
        return ModelConfig(
            spatial_size=self.spatial_size,
            max_frames=self.max_frames,
            encoder=EncoderConfig(channels=self.channels, levels=self.encoder_levels,
                                  trunk_base_width=self.trunk_base_width),
            decoder=DecoderConfig(channels=self.channels, heads=self.heads, image_levels=self.image_levels,
                                  temporal=TemporalPyramidConfig(video_level=self.video_level,
                                                                 schedule=self.temporal_schedule),
                                  blocks_per_stage=self.blocks_per_stage, share_blocks=self.share_decoder,
                                  rel_pos_extent=extent),
            num_actions=self.num_actions if has_actions else None,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def build_model(cfg: RunConfig) -> Afformer:
    import torch

    torch.manual_seed(cfg.seed)
    model = Afformer(cfg.model_config())
    if cfg.precision == "float64":
        model = model.double()
    return model
