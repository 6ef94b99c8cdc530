"""Optimizer loop: AdamW, cosine-decayed learning rate, deterministic batching."""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import RunConfig, build_model
from .data import collate
from .heads import PredictionOutput, total_loss
from .model import Afformer, save_checkpoint
from .synthetic import Sample


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, trace: list[float]):
        super().__init__(f"loss became non-finite at iteration {iteration}")
        self.iteration = iteration
        self.trace = trace


def cosine_lr(base_lr: float, iteration: int, total: int) -> float:
    """``base_lr * (1 + cos(pi * i / total)) / 2``; reaches zero at ``i = total``."""
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(iteration, total) / total))


def configure_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


@dataclass
class TrainResult:
    model: Afformer
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    checkpoint: Path | None = None


def _dtype(cfg: RunConfig) -> torch.dtype:
    return torch.float64 if cfg.precision == "float64" else torch.float32


def resize_logits(logits: torch.Tensor, res) -> torch.Tensor:
    return torch.nn.functional.interpolate(logits[:, None], size=tuple(res), mode="bilinear",
                                           align_corners=False)[:, 0]


def resize_targets(gt: torch.Tensor, res) -> torch.Tensor:
    g = resize_logits(gt, res).clamp_min(0)
    return g / g.sum(dim=(1, 2), keepdim=True)


def batch_loss(model: Afformer, batch, cfg: RunConfig) -> torch.Tensor:
    out = model(batch.video, batch.image)
    gt = batch.heatmap
    if cfg.train_res is not None and tuple(cfg.train_res) != tuple(gt.shape[-2:]):
        out = PredictionOutput(resize_logits(out.heatmap_logits, cfg.train_res), out.action_logits)
        gt = resize_targets(gt, cfg.train_res)
    action = batch.action if model.action_head is not None else None
    return total_loss(out, gt, action, cfg.action_weight)


def batch_schedule(n: int, batch_size: int, iterations: int, seed: int) -> list[np.ndarray]:
    """Index batches drawn epoch by epoch from seeded permutations."""
    rng = np.random.default_rng(seed)
    bs = min(batch_size, n)
    order: list[int] = []
    batches = []
    for _ in range(iterations):
        if len(order) < bs:
            order.extend(rng.permutation(n).tolist())
        batches.append(np.array(order[:bs]))
        del order[:bs]
    return batches


def train(cfg: RunConfig, dataset: Sequence[Sample], out_dir: str | Path | None = None,
          model: Afformer | None = None, iterations: int | None = None) -> TrainResult:
    """Minimize the total loss over ``dataset``.

    ``model`` continues from existing weights (fine-tuning); otherwise a fresh
    model is built from ``cfg``. Writes ``loss_trace.jsonl`` and
    ``checkpoint.npz`` into ``out_dir`` when given.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    if cfg.deterministic:
        configure_determinism(cfg.seed)
    if model is None:
        model = build_model(cfg)
    dtype = _dtype(cfg)
    model.to(dtype)
    if cfg.mode == "maskahand_pretrain" and model.action_head is not None:
        raise ValueError("masked-hand pre-training must not build an action head")
    n_iter = iterations if iterations is not None else cfg.iterations_for(len(dataset))
    groups = model.param_groups(cfg.lr, cfg.backbone_lr_factor, cfg.weight_decay)
    opt = torch.optim.AdamW(groups, lr=cfg.lr, weight_decay=cfg.weight_decay)
    result = TrainResult(model)
    trace_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        trace_file = open(out_dir / "loss_trace.jsonl", "w", encoding="utf-8")
    autocast = (torch.autocast("cpu", dtype=torch.bfloat16) if cfg.precision == "mixed16"
                else contextlib.nullcontext())
    model.train()
    try:
        for it, idx in enumerate(batch_schedule(len(dataset), cfg.batch_size, n_iter, cfg.seed)):
            lr = cosine_lr(cfg.lr, it, n_iter)
            for g in opt.param_groups:
                g["lr"] = lr * g["lr_factor"]
            batch = collate([dataset[i] for i in idx], cfg.max_frames, dtype)
            with autocast:
                loss = batch_loss(model, batch, cfg)
            value = float(loss.detach())
            result.losses.append(value)
            result.lrs.append(lr)
            if trace_file is not None:
                trace_file.write(json.dumps({"iteration": it, "loss": value, "lr": lr}) + "\n")
            if not math.isfinite(value):
                raise TrainingDiverged(it, result.losses)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    finally:
        if trace_file is not None:
            trace_file.close()
    model.eval()
    if out_dir is not None:
        result.checkpoint = out_dir / "checkpoint.npz"
        save_checkpoint(result.checkpoint, model, {"run_config": cfg.to_dict()})
    return result


def finetune_model(pretrained: Afformer, cfg: RunConfig) -> Afformer:
    """Fresh model for ``cfg`` carrying over every pre-trained weight (the action head starts fresh)."""
    model = build_model(cfg)
    state = {k: v for k, v in pretrained.state_dict().items() if not k.startswith("action_head.")}
    missing, unexpected = model.load_state_dict(state, strict=False)
    if unexpected or any(not k.startswith("action_head.") for k in missing):
        raise ValueError(f"pre-trained weights incompatible: missing {missing}, unexpected {unexpected}")
    return model


def iterations_to_reach(losses: Sequence[float], threshold: float, window: int = 5) -> int | None:
    """First iteration (1-based count) whose trailing ``window``-mean loss is at or below ``threshold``."""
    arr = np.asarray(losses, dtype=np.float64)
    for i in range(len(arr)):
        lo = max(0, i - window + 1)
        if arr[lo:i + 1].mean() <= threshold:
            return i + 1
    return None
