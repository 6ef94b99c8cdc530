"""Fine-grained multi-scale decoder.

Image tokens at each pyramid level query the video tokens through cross
attention. Stages run coarse to fine; each finer stage adds the nearest
upsampled decoding of the previous stage to its self-attention input, and
attends to a progressively temporally strided copy of the video features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .encoder import FeaturePyramid, _init_conv


@dataclass
class TemporalPyramidConfig:
    """Temporal striding applied to the video features feeding each decode stage.

    ``schedule[i]`` is the number of stride-2 temporal convolutions applied
    before stage ``i`` (coarsest image stage first), so ``(0, 1, 2)`` gives
    lengths ``T, T/2, T/4`` and ``(0, 0, 0)`` keeps ``T`` everywhere.
    """

    video_level: int = 3
    schedule: tuple[int, ...] | None = None
    c3d_kernel: int = 3
    c3d_temporal_stride: int = 2

    def __post_init__(self):
        if self.schedule is not None:
            self.schedule = tuple(int(s) for s in self.schedule)
            if any(s < 0 for s in self.schedule):
                raise ValueError("schedule entries must be >= 0")
            if any(b < a for a, b in zip(self.schedule, self.schedule[1:])):
                raise ValueError(f"temporal lengths must be nonincreasing, got halvings {self.schedule}")

    def steps_for(self, n_stages: int) -> tuple[int, ...]:
        steps = self.schedule if self.schedule is not None else tuple(range(n_stages))
        if len(steps) != n_stages:
            raise ValueError(f"temporal schedule {steps} does not match {n_stages} decode stages")
        return steps

    def lengths(self, t: int, n_stages: int) -> list[int]:
        return [temporal_length(t, s, self.c3d_temporal_stride) for s in self.steps_for(n_stages)]


def temporal_length(t: int, halvings: int, stride: int = 2) -> int:
    for _ in range(halvings):
        t = (t + 2 * 1 - 3) // stride + 1
    return t


def key_token_counts(t: int, video_hw: tuple[int, int], tcfg: TemporalPyramidConfig, n_stages: int) -> list[int]:
    """Number of cross-attention key tokens per stage."""
    return [n * video_hw[0] * video_hw[1] for n in tcfg.lengths(t, n_stages)]


@dataclass
class DecoderConfig:
    channels: int = 256
    heads: int = 4
    image_levels: tuple[int, ...] = (2, 3, 4)
    temporal: TemporalPyramidConfig = None  # type: ignore[assignment]
    blocks_per_stage: int = 1
    share_blocks: bool = True
    mlp_ratio: int = 4
    rel_pos_extent: int = 64
    rel_pos: bool = True

    def __post_init__(self):
        if self.temporal is None:
            self.temporal = TemporalPyramidConfig()
        elif isinstance(self.temporal, dict):
            self.temporal = TemporalPyramidConfig(**self.temporal)
        self.image_levels = tuple(sorted(int(l) for l in self.image_levels))
        if self.image_levels != tuple(range(self.image_levels[0], self.image_levels[-1] + 1)):
            raise ValueError(f"image levels must be contiguous, got {self.image_levels}")
        if self.heads < 1 or self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible into {self.heads} heads")
        self.temporal.steps_for(len(self.image_levels))

    @property
    def l_min(self) -> int:
        return self.image_levels[0]


@dataclass
class DecoderState:
    tokens: Tensor  # (B, h*w, C)
    level: int
    hw: tuple[int, int]

    def __post_init__(self):
        if self.tokens.shape[-2] != self.hw[0] * self.hw[1]:
            raise ValueError(f"sequence length {self.tokens.shape[-2]} != {self.hw[0]}*{self.hw[1]}")

    def grid(self) -> Tensor:
        """Tokens reshaped to ``(B, C, h, w)``."""
        b, _, c = self.tokens.shape
        return self.tokens.transpose(1, 2).reshape(b, c, *self.hw)


def flatten(x: Tensor) -> Tensor:
    """``(B, C, h, w)`` -> ``(B, h*w, C)``, row-major over space."""
    return x.flatten(2).transpose(1, 2)


def up_nearest(tokens: Tensor, src_hw: Sequence[int], target_hw: Sequence[int]) -> Tensor:
    """Replicate each source token into a 2x2 block of the target grid."""
    h, w = src_hw
    if tuple(target_hw) != (2 * h, 2 * w):
        raise ValueError(f"up_nearest needs target {(2 * h, 2 * w)}, got {tuple(target_hw)}")
    lead = tokens.shape[:-2]
    grid = tokens.reshape(*lead, h, w, tokens.shape[-1])
    grid = grid.repeat_interleave(2, dim=-3).repeat_interleave(2, dim=-2)
    return grid.reshape(*lead, 4 * h * w, tokens.shape[-1])


def relative_offsets(n_q: int, n_k: int) -> Tensor:
    """Offsets ``q - k`` along one axis, measured in units of the finer of the two grids."""
    q = torch.arange(n_q, dtype=torch.float64) * max(n_k / n_q, 1.0)
    k = torch.arange(n_k, dtype=torch.float64) * max(n_q / n_k, 1.0)
    delta = q[:, None] - k[None, :]
    return torch.ceil(delta - 0.5).long()


def _lookup(table: Tensor, offsets: Tensor) -> Tensor:
    extent = (table.shape[0] + 1) // 2
    if offsets.abs().max() > extent - 1:
        raise ValueError(f"relative offset {int(offsets.abs().max())} outside table range +-{extent - 1}")
    return table[offsets + extent - 1]


def decomposed_relpos(query_hw: Sequence[int], key_thw: Sequence[int], q: Tensor,
                      r_h: Tensor, r_w: Tensor) -> Tensor:
    """Additive attention bias from separate height and width offset tables.

    ``q`` is ``(..., h_q*w_q, d)``; the result is ``(..., h_q*w_q, t*h_k*w_k)`` with
    ``R[q, k] = <q, r_h[dy]> + <q, r_w[dx]>``, repeated across the key frames.
    """
    hq, wq = query_hw
    t, hk, wk = key_thw
    rh = _lookup(r_h, relative_offsets(hq, hk))  # (hq, hk, d)
    rw = _lookup(r_w, relative_offsets(wq, wk))  # (wq, wk, d)
    lead = q.shape[:-2]
    qg = q.reshape(*lead, hq, wq, q.shape[-1])
    bias_h = torch.einsum("...yxd,ykd->...yxk", qg, rh.to(q.dtype))
    bias_w = torch.einsum("...yxd,xkd->...yxk", qg, rw.to(q.dtype))
    bias = bias_h[..., :, None] + bias_w[..., None, :]  # (..., hq, wq, hk, wk)
    bias = bias.reshape(*lead, hq * wq, hk * wk)
    return bias.repeat(*([1] * len(lead)), 1, t)


class MultiHeadAttention(nn.Module):
    """Multi-head attention ``softmax(q k^T / sqrt(d_head) + R) v`` followed by an output map."""

    def __init__(self, dim: int, heads: int, rel_pos_extent: int | None = None):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        for m in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            nn.init.xavier_uniform_(m.weight)
            nn.init.zeros_(m.bias)
        if rel_pos_extent:
            self.rel_pos_h = nn.Parameter(torch.randn(2 * rel_pos_extent - 1, self.head_dim) * 0.02)
            self.rel_pos_w = nn.Parameter(torch.randn(2 * rel_pos_extent - 1, self.head_dim) * 0.02)
        else:
            self.rel_pos_h = self.rel_pos_w = None
        self.record_attention = False
        self.last_attention: Tensor | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x_q: Tensor, x_k: Tensor, x_v: Tensor | None = None,
                query_hw: Sequence[int] | None = None, key_thw: Sequence[int] | None = None) -> Tensor:
        if x_v is None:
            x_v = x_k
        if x_k.shape[1] != x_v.shape[1]:
            raise ValueError(f"key length {x_k.shape[1]} != value length {x_v.shape[1]}")
        if x_q.shape[-1] != self.dim or x_k.shape[-1] != self.dim:
            raise ValueError(f"feature width mismatch: expected {self.dim}")
        q = self._split(self.q_proj(x_q))
        k = self._split(self.k_proj(x_k))
        v = self._split(self.v_proj(x_v))
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if self.rel_pos_h is not None and query_hw is not None:
            logits = logits + decomposed_relpos(query_hw, key_thw, q, self.rel_pos_h, self.rel_pos_w)
        weights = logits.softmax(dim=-1)
        if self.record_attention:
            self.last_attention = weights.detach()
        out = (weights @ v).transpose(1, 2).reshape(x_q.shape[0], x_q.shape[1], self.dim)
        return self.out_proj(out)


class MLP(nn.Module):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.fc2 = nn.Linear(dim * ratio, dim)
        for m in (self.fc1, self.fc2):
            nn.init.xavier_uniform_(m.weight)
            nn.init.zeros_(m.bias)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class DecoderBlock(nn.Module):
    """Pre-norm self-attention over image tokens, cross-attention to video tokens, MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4, rel_pos_extent: int | None = None):
        super().__init__()
        self.norm_sa = nn.LayerNorm(dim)
        self.msa = MultiHeadAttention(dim, heads)
        self.norm_ca = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.mca = MultiHeadAttention(dim, heads, rel_pos_extent)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio)

    def forward(self, x: Tensor, video: Tensor, query_hw, key_thw, up: Tensor | None = None) -> Tensor:
        s = self.norm_sa(x)
        if up is not None:
            s = s + up
        x = x + self.msa(s, s)
        kv = self.norm_kv(video)
        x = x + self.mca(self.norm_ca(x), kv, kv, query_hw=query_hw, key_thw=key_thw)
        return x + self.mlp(self.norm_mlp(x))

    def zero_output_maps(self) -> None:
        """Zero every residual-branch output map so the block is the identity."""
        for lin in (self.msa.out_proj, self.mca.out_proj, self.mlp.fc2):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)


class TemporalPyramid(nn.Module):
    """Stack of 3x3x3 convolutions striding 2 along time only."""

    def __init__(self, dim: int, n_steps: int, kernel: int = 3, stride: int = 2):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv3d(dim, dim, kernel, stride=(stride, 1, 1), padding=kernel // 2) for _ in range(n_steps)
        )
        self.apply(_init_conv)

    def forward(self, feats: Tensor) -> list[Tensor]:
        """``(B, T, C, h, w)`` -> ``[step0, step1, ...]`` with each step's length halved (ceil)."""
        out = [feats]
        x = feats.transpose(1, 2)  # (B, C, T, h, w)
        for conv in self.convs:
            x = conv(x)
            out.append(x.transpose(1, 2))
        return out


def video_tokens(feats: Tensor) -> Tensor:
    """``(B, T, C, h, w)`` -> ``(B, T*h*w, C)`` ordered by frame, row, column."""
    b, t, c, h, w = feats.shape
    return feats.permute(0, 1, 3, 4, 2).reshape(b, t * h * w, c)


class Decoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        n_stages = len(cfg.image_levels)
        extent = cfg.rel_pos_extent if cfg.rel_pos else None
        n_block_sets = 1 if cfg.share_blocks else n_stages

        def make_stage():
            return nn.ModuleList(DecoderBlock(cfg.channels, cfg.heads, cfg.mlp_ratio, extent)
                                 for _ in range(cfg.blocks_per_stage))

        self.stages = nn.ModuleList(make_stage() for _ in range(n_block_sets))
        steps = cfg.temporal.steps_for(n_stages)
        self.temporal = TemporalPyramid(cfg.channels, max(steps), cfg.temporal.c3d_kernel,
                                        cfg.temporal.c3d_temporal_stride)
        self.record_attention = False
        self.attention_maps: list[dict[str, Tensor]] = []

    def blocks_for(self, stage: int) -> nn.ModuleList:
        return self.stages[0 if self.cfg.share_blocks else stage]

    def set_record_attention(self, flag: bool) -> None:
        self.record_attention = flag
        for m in self.modules():
            if isinstance(m, MultiHeadAttention):
                m.record_attention = flag
        self.attention_maps = []

    def zero_output_maps(self) -> None:
        for stage in self.stages:
            for block in stage:
                block.zero_output_maps()

    def _stage(self, stage: int, img: Tensor, vid: Tensor, up: Tensor | None, level: int) -> DecoderState:
        if img.shape[1] != self.cfg.channels or vid.shape[2] != self.cfg.channels:
            raise ValueError(f"channel mismatch: decoder width {self.cfg.channels}, "
                             f"image {img.shape[1]}, video {vid.shape[2]}")
        hw = tuple(img.shape[-2:])
        thw = (vid.shape[1], *vid.shape[-2:])
        x = flatten(img)
        kv = video_tokens(vid)
        for i, block in enumerate(self.blocks_for(stage)):
            x = block(x, kv, hw, thw, up=up if i == 0 else None)
            if self.record_attention:
                self.attention_maps.append({
                    "level": level,
                    "block": i,
                    "msa": block.msa.last_attention,
                    "mca": block.mca.last_attention,
                })
        return DecoderState(x, level, hw)

    def decode_single(self, e_img: Tensor, e_vid: Tensor, level: int | None = None) -> DecoderState:
        """One stage without an upsampled prior: ``(B, C, h, w)`` image vs ``(B, T, C, hv, wv)`` video."""
        return self._stage(0, e_img, e_vid, None, level if level is not None else self.cfg.l_min)

    def forward(self, img_pyr: FeaturePyramid, vid_pyr: FeaturePyramid) -> DecoderState:
        return self.decode_multi(img_pyr, vid_pyr)

    def decode_multi(self, img_pyr: FeaturePyramid, vid_pyr: FeaturePyramid) -> DecoderState:
        levels = self.cfg.image_levels
        for l in levels:
            if l not in img_pyr:
                raise ValueError(f"image pyramid is missing level {l}")
        if self.cfg.temporal.video_level not in vid_pyr:
            raise ValueError(f"video pyramid is missing level {self.cfg.temporal.video_level}")
        if self.record_attention:
            self.attention_maps = []
        steps = self.cfg.temporal.steps_for(len(levels))
        vids = self.temporal(vid_pyr[self.cfg.temporal.video_level])
        state = None
        for stage, level in enumerate(sorted(levels, reverse=True)):
            img = img_pyr[level]
            up = None
            if state is not None:
                up = up_nearest(state.tokens, state.hw, img.shape[-2:])
            state = self._stage(stage, img, vids[steps[stage]], up, level)
        return state

    def dump_attention(self, path: str | Path) -> None:
        """Write recorded attention weights to an ``.npz`` archive, one entry per stage/block/kind."""
        arrays = {}
        for rec in self.attention_maps:
            for kind in ("msa", "mca"):
                if rec[kind] is not None:
                    arrays[f"level{rec['level']}_block{rec['block']}_{kind}"] = rec[kind].cpu().numpy()
        np.savez(path, **arrays)
