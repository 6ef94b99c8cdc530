"""The full grounding model: shared encoder, multi-scale decoder, prediction heads."""

from __future__ import annotations

import json
import zipfile
from dataclasses import asdict, dataclass, field
from io import BytesIO
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .decoder import Decoder, DecoderConfig, TemporalPyramidConfig
from .encoder import Encoder, EncoderConfig, uniform_sample_frames
from .heads import ActionHead, HeatmapHead, PredictionOutput


@dataclass
class ModelConfig:
    spatial_size: int = 256
    max_frames: int = 64
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    num_actions: int | None = None
    action_pool: int = 1

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.decoder, dict):
            self.decoder = DecoderConfig(**self.decoder)
        if self.decoder.channels != self.encoder.channels:
            raise ValueError("encoder and decoder widths differ")
        needed = set(self.decoder.image_levels) | {self.decoder.temporal.video_level}
        missing = needed - set(self.encoder.levels)
        if missing:
            raise ValueError(f"decoder uses levels the encoder does not produce: {sorted(missing)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = dict(d.pop("encoder"))
        dec = dict(d.pop("decoder"))
        dec["temporal"] = TemporalPyramidConfig(**dec["temporal"])
        return cls(encoder=EncoderConfig(**enc), decoder=DecoderConfig(**dec), **d)


class Afformer(nn.Module):
    def __init__(self, cfg: ModelConfig, trunk: nn.Module | None = None):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder, trunk)
        self.decoder = Decoder(cfg.decoder)
        self.heatmap_head = HeatmapHead(cfg.decoder.channels, cfg.decoder.l_min)
        self.action_head = (ActionHead(cfg.decoder.channels, cfg.num_actions, cfg.action_pool)
                            if cfg.num_actions else None)

    def forward(self, video: Tensor, image: Tensor) -> PredictionOutput:
        """``video`` ``(B, T, 3, H, W)`` and ``image`` ``(B, 3, H, W)``, pixel values in [0, 255]."""
        if video.shape[1] > self.cfg.max_frames:
            video = uniform_sample_frames(video.transpose(0, 1), self.cfg.max_frames).transpose(0, 1)
        img_pyr = self.encoder.encode_image(image)
        vid_pyr = self.encoder.encode_video(video)
        state = self.decoder.decode_multi(img_pyr, vid_pyr)
        heatmap = self.heatmap_head(state, tuple(image.shape[-2:]))
        action = self.action_head(state) if self.action_head is not None else None
        return PredictionOutput(heatmap, action)

    def param_groups(self, lr: float, backbone_lr_factor: float, weight_decay: float) -> list[dict]:
        backbone = list(self.encoder.backbone_parameters())
        ids = {id(p) for p in backbone}
        rest = [p for p in self.parameters() if id(p) not in ids]
        return [
            {"params": backbone, "lr": lr * backbone_lr_factor, "lr_factor": backbone_lr_factor,
             "weight_decay": weight_decay},
            {"params": rest, "lr": lr, "lr_factor": 1.0, "weight_decay": weight_decay},
        ]


# ---------------------------------------------------------------------------
# checkpoints: a zip of .npy arrays plus a JSON manifest, written with fixed
# timestamps so identical parameters give identical bytes

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, data)


def save_checkpoint(path: str | Path, model: Afformer, extra: dict | None = None) -> None:
    state = model.state_dict()
    manifest = {
        "model_config": model.cfg.to_dict(),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "dtypes": {k: str(v.dtype).replace("torch.", "") for k, v in state.items()},
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write_member(zf, "manifest.json", json.dumps(manifest, sort_keys=True).encode("utf-8"))
        for name in sorted(state):
            buf = BytesIO()
            np.lib.format.write_array(buf, state[name].detach().cpu().numpy(), allow_pickle=False)
            _write_member(zf, f"params/{name}.npy", buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[Afformer, dict]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json").decode("utf-8"))
        state = {}
        for name in manifest["shapes"]:
            arr = np.lib.format.read_array(BytesIO(zf.read(f"params/{name}.npy")), allow_pickle=False)
            state[name] = torch.from_numpy(arr.copy())
    model = Afformer(ModelConfig.from_dict(manifest["model_config"]))
    dtype = next(iter(state.values())).dtype
    model.to(dtype)
    model.load_state_dict(state)
    return model, manifest["extra"]
