"""Shared image/video multi-scale encoder.

Images and every sampled video frame pass through the same spatial trunk; the
trunk returns an FPN-style pyramid with ``channels`` features at each stride
``2**l``. Per-level 1x1 input projections sit on top of the trunk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F


@dataclass
class EncoderConfig:
    channels: int = 256
    levels: tuple[int, ...] = (2, 3, 4, 5)
    trunk: str = "reference_conv"
    shared_backbone: bool = True
    shared_input_proj_between_modalities: bool = True
    per_level_input_proj: bool = True
    trunk_base_width: int = 16
    pixel_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    pixel_std: tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self):
        self.levels = tuple(sorted(int(l) for l in self.levels))
        if not self.levels:
            raise ValueError("encoder needs at least one pyramid level")
        if self.levels != tuple(range(self.levels[0], self.levels[-1] + 1)):
            raise ValueError(f"pyramid levels must be contiguous, got {self.levels}")
        if self.levels[0] < 1:
            raise ValueError("pyramid levels start at stride 2**1")
        if self.trunk not in ("reference_conv", "pluggable"):
            raise ValueError(f"unknown trunk {self.trunk!r}")
        if self.channels <= 0:
            raise ValueError("channels must be positive")


@dataclass
class FeaturePyramid:
    """Map from stride exponent ``l`` to features.

    Image entries are ``(B, C, h/2**l, w/2**l)``; video entries carry a frame
    axis, ``(B, T, C, h/2**l, w/2**l)``.
    """

    levels: dict[int, Tensor] = field(default_factory=dict)

    def __getitem__(self, level: int) -> Tensor:
        if level not in self.levels:
            raise KeyError(f"pyramid has no level {level} (available: {sorted(self.levels)})")
        return self.levels[level]

    def __contains__(self, level: int) -> bool:
        return level in self.levels

    @property
    def channels(self) -> int:
        return next(iter(self.levels.values())).shape[-3]


class Trunk(Protocol):
    """Contract for pluggable backbones: normalized ``(N, 3, H, W)`` in, ``{l: (N, C, H/2**l, W/2**l)}`` out."""

    def __call__(self, x: Tensor) -> dict[int, Tensor]: ...


def _init_conv(m: nn.Module) -> None:
    if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d, nn.Linear)):
        nn.init.kaiming_uniform_(m.weight, a=1.0)
        if m.bias is not None:
            nn.init.zeros_(m.bias)


class ReferenceConvTrunk(nn.Module):
    """Small strided conv pyramid with top-down lateral fusion.

    One stride-2 3x3 conv per level down to ``2**max(levels)``; each requested
    level gets a 1x1 lateral to ``channels`` and adds the nearest-upsampled
    coarser output, as in FPN.
    """

    def __init__(self, channels: int, levels: tuple[int, ...], base_width: int = 16):
        super().__init__()
        self.levels = tuple(levels)
        widths = [base_width * 2 ** min(l - 1, 4) for l in range(1, max(levels) + 1)]
        self.stages = nn.ModuleList()
        in_ch = 3
        for w in widths:
            self.stages.append(nn.Conv2d(in_ch, w, 3, stride=2, padding=1))
            in_ch = w
        self.laterals = nn.ModuleDict({str(l): nn.Conv2d(widths[l - 1], channels, 1) for l in self.levels})
        self.apply(_init_conv)

    def forward(self, x: Tensor) -> dict[int, Tensor]:
        feats = {}
        for l, stage in enumerate(self.stages, start=1):
            x = F.gelu(stage(x))
            feats[l] = x
        out = {}
        prev = None
        for l in sorted(self.levels, reverse=True):
            y = self.laterals[str(l)](feats[l])
            if prev is not None:
                y = y + F.interpolate(prev, size=y.shape[-2:], mode="nearest")
            out[l] = prev = y
        return out


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, trunk: nn.Module | None = None, video_trunk: nn.Module | None = None):
        super().__init__()
        self.cfg = cfg
        if trunk is None:
            if cfg.trunk == "pluggable":
                raise ValueError("trunk='pluggable' requires a trunk module")
            trunk = ReferenceConvTrunk(cfg.channels, cfg.levels, cfg.trunk_base_width)
        self.trunk = trunk
        if cfg.shared_backbone:
            self.video_trunk = None
        else:
            if video_trunk is None:
                if cfg.trunk == "pluggable":
                    raise ValueError("unshared pluggable backbones need a video_trunk module")
                video_trunk = ReferenceConvTrunk(cfg.channels, cfg.levels, cfg.trunk_base_width)
            self.video_trunk = video_trunk
        self.image_proj = self._make_proj()
        self.video_proj = None if cfg.shared_input_proj_between_modalities else self._make_proj()
        self.register_buffer("pixel_mean", torch.tensor(cfg.pixel_mean).view(1, 3, 1, 1) * 255.0, persistent=False)
        self.register_buffer("pixel_std", torch.tensor(cfg.pixel_std).view(1, 3, 1, 1) * 255.0, persistent=False)

    def _make_proj(self) -> nn.ModuleDict:
        c = self.cfg.channels
        if self.cfg.per_level_input_proj:
            proj = nn.ModuleDict({str(l): nn.Conv2d(c, c, 1) for l in self.cfg.levels})
        else:
            shared = nn.Conv2d(c, c, 1)
            proj = nn.ModuleDict({"shared": shared})
        proj.apply(_init_conv)
        return proj

    def _project(self, proj: nn.ModuleDict, level: int, x: Tensor) -> Tensor:
        key = str(level) if self.cfg.per_level_input_proj else "shared"
        return proj[key](x)

    def backbone_parameters(self):
        yield from self.trunk.parameters()
        if self.video_trunk is not None:
            yield from self.video_trunk.parameters()

    def _check_dims(self, h: int, w: int) -> None:
        m = 2 ** max(self.cfg.levels)
        if h % m or w % m:
            raise ValueError(f"input {h}x{w} is not divisible by {m}; spatial dims must be multiples of {m}")

    def _run(self, x: Tensor, trunk: nn.Module, proj: nn.ModuleDict) -> dict[int, Tensor]:
        x = (x.to(self.pixel_mean.dtype) - self.pixel_mean) / self.pixel_std
        feats = trunk(x)
        return {l: self._project(proj, l, feats[l]) for l in self.cfg.levels}

    def encode_image(self, img: Tensor) -> FeaturePyramid:
        """Encode ``(B, 3, H, W)`` (or unbatched ``(3, H, W)``) images with pixel values in [0, 255]."""
        unbatched = img.dim() == 3
        if unbatched:
            img = img.unsqueeze(0)
        self._check_dims(*img.shape[-2:])
        levels = self._run(img, self.trunk, self.image_proj)
        if unbatched:
            levels = {l: v[0] for l, v in levels.items()}
        return FeaturePyramid(levels)

    def encode_video(self, clip: Tensor) -> FeaturePyramid:
        """Encode ``(B, T, 3, H, W)`` (or unbatched ``(T, 3, H, W)``) clips frame by frame."""
        unbatched = clip.dim() == 4
        if unbatched:
            clip = clip.unsqueeze(0)
        b, t = clip.shape[:2]
        if t == 0:
            raise ValueError("cannot encode an empty clip")
        self._check_dims(*clip.shape[-2:])
        trunk = self.video_trunk if self.video_trunk is not None else self.trunk
        proj = self.video_proj if self.video_proj is not None else self.image_proj
        flat = self._run(clip.reshape(b * t, *clip.shape[2:]), trunk, proj)
        levels = {l: v.reshape(b, t, *v.shape[1:]) for l, v in flat.items()}
        if unbatched:
            levels = {l: v[0] for l, v in levels.items()}
        return FeaturePyramid(levels)


def sample_indices(t: int, max_t: int) -> np.ndarray:
    """Evenly spaced frame indices over ``[0, t - 1]``, endpoints included, rounded half-down."""
    if max_t < 1:
        raise ValueError(f"max_t must be >= 1, got {max_t}")
    if t < 1:
        raise ValueError("cannot sample from an empty clip")
    if t <= max_t:
        return np.arange(t)
    if max_t == 1:
        return np.zeros(1, dtype=np.int64)
    # round_half_down(i * (t-1) / (max_t-1)) in exact integer arithmetic
    i = np.arange(max_t, dtype=np.int64)
    num = 2 * i * (t - 1) - (max_t - 1)
    den = 2 * (max_t - 1)
    return -((-num) // den)


def uniform_sample_frames(raw, max_t: int):
    """Keep at most ``max_t`` frames of ``raw`` (frame axis first), preserving order."""
    idx = sample_indices(len(raw), max_t)
    if len(idx) == len(raw):
        return raw
    if isinstance(raw, Tensor):
        return raw[torch.from_numpy(idx)]
    return raw[idx]


def pyramid_shape(h: int, w: int, level: int) -> tuple[int, int]:
    s = 2**level
    return math.ceil(h / s), math.ceil(w / s)
