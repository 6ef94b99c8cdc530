"""Heatmap and action prediction heads and the training loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .decoder import DecoderState
from .encoder import _init_conv


@dataclass
class PredictionOutput:
    heatmap_logits: Tensor  # (B, H, W)
    action_logits: Tensor | None = None  # (B, c)


class HeatmapHead(nn.Module):
    """``l_min`` stride-2 transposed convolutions (4x4, padding 1) halving channels down to 1.

    With ``l_min == 0`` the head is a single 1x1 channel reduction.
    """

    def __init__(self, channels: int, l_min: int):
        super().__init__()
        self.l_min = l_min
        if l_min == 0:
            self.layers = nn.ModuleList([nn.Conv2d(channels, 1, 1)])
        else:
            widths = [max(channels // 2**i, 1) for i in range(l_min)] + [1]
            self.layers = nn.ModuleList(
                nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1) for cin, cout in zip(widths[:-1], widths[1:])
            )
        self.apply(_init_conv)

    def forward(self, state: DecoderState, target_hw: tuple[int, int] | None = None) -> Tensor:
        h, w = state.hw
        if target_hw is not None and tuple(target_hw) != (h * 2**self.l_min, w * 2**self.l_min):
            raise ValueError(f"decoder grid {state.hw} at level {self.l_min} cannot produce {tuple(target_hw)}")
        x = state.grid()
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x[:, 0]


class ActionHead(nn.Module):
    """Adaptive average pooling to a ``pool x pool`` grid followed by a two-layer MLP."""

    def __init__(self, channels: int, num_actions: int, pool: int = 1):
        super().__init__()
        if num_actions < 2:
            raise ValueError(f"action head needs at least 2 classes, got {num_actions}")
        self.num_actions = num_actions
        self.pool = pool
        self.fc1 = nn.Linear(channels * pool * pool, channels)
        self.fc2 = nn.Linear(channels, num_actions)
        self.apply(_init_conv)

    def forward(self, state: DecoderState) -> Tensor:
        x = F.adaptive_avg_pool2d(state.grid(), self.pool).flatten(1)
        return self.fc2(F.gelu(self.fc1(x)))


def heatmap_loss(gt: Tensor, logits: Tensor) -> Tensor:
    """KL divergence between the sum-normalized ground truth and the softmax of the logits.

    Works on ``(H, W)`` or batched ``(B, H, W)`` inputs; batched input returns the
    batch mean. Only cells with positive ground truth contribute.
    """
    if gt.shape != logits.shape:
        raise ValueError(f"shape mismatch: gt {tuple(gt.shape)} vs logits {tuple(logits.shape)}")
    unbatched = gt.dim() == 2
    if unbatched:
        gt, logits = gt[None], logits[None]
    g = gt.flatten(1)
    g = g / g.sum(dim=1, keepdim=True)
    log_p = logits.flatten(1).log_softmax(dim=1)
    support = g != 0  # NaN or negative targets propagate instead of vanishing
    log_g = torch.where(support, g, torch.ones_like(g)).log()
    per_sample = torch.where(support, g * (log_g - log_p), torch.zeros_like(g)).sum(dim=1)
    return per_sample[0] if unbatched else per_sample.mean()


def action_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Cross-entropy for 1-based action labels."""
    c = logits.shape[-1]
    if torch.any(labels < 1) or torch.any(labels > c):
        raise ValueError(f"action labels must lie in 1..{c}, got {labels.tolist()}")
    return F.cross_entropy(logits, labels.long() - 1)


def total_loss(out: PredictionOutput, gt_heatmap: Tensor, gt_action: Tensor | None = None,
               action_weight: float = 1.0) -> Tensor:
    """Heatmap KL plus (weighted) action cross-entropy when labels are given."""
    if (gt_action is None) != (out.action_logits is None):
        raise ValueError("action labels must be given exactly when the model predicts actions")
    loss = heatmap_loss(gt_heatmap, out.heatmap_logits)
    if gt_action is not None:
        loss = loss + action_weight * action_loss(out.action_logits, gt_action)
    return loss
