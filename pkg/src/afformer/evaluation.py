"""Evaluation flows: supervised, zero-shot and the center-bias baseline."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import collate
from .heatmaps import GaussianTargetSpec, points_to_target, softmax_normalize
from .metrics import MetricReport, evaluate_at
from .model import Afformer
from .synthetic import Sample

# maps a batch of samples to (heatmap distributions (B, H, W), predicted 1-based actions or None)
Predictor = Callable[[Sequence[Sample]], tuple[np.ndarray, np.ndarray | None]]


@dataclass
class EvalResult:
    report: MetricReport
    action_accuracy: float | None
    per_sample: list[dict] = field(default_factory=list)

    def to_record(self) -> dict:
        return {"kld": self.report.kld, "sim": self.report.sim, "auc_j": self.report.auc_j,
                "resolution": list(self.report.resolution),
                "action_accuracy": "n/a" if self.action_accuracy is None else self.action_accuracy}


def model_predictor(model: Afformer, batch_size: int = 16) -> Predictor:
    dtype = next(model.parameters()).dtype

    def predict(samples):
        model.eval()
        with torch.no_grad():
            batch = collate(samples, model.cfg.max_frames, dtype)
            out = model(batch.video, batch.image)
        maps = np.stack([softmax_normalize(l.double().numpy()).values for l in out.heatmap_logits])
        actions = None
        if out.action_logits is not None:
            actions = out.action_logits.argmax(dim=1).numpy() + 1
        return maps, actions

    return predict


def oracle_predictor(samples: Sequence[Sample]):
    """Ground truth as prediction; scores the metric pipeline itself."""
    maps = np.stack([s.heatmap for s in samples])
    actions = None if samples[0].action is None else np.array([s.action for s in samples])
    return maps, actions


def center_bias_predictor(samples: Sequence[Sample]):
    """A fixed Gaussian at the frame center, built with the ground-truth target spec."""
    maps = []
    for s in samples:
        h, w = s.heatmap.shape
        maps.append(points_to_target([((w - 1) / 2, (h - 1) / 2)], h, w, GaussianTargetSpec.for_frame(h, w)).values)
    return np.stack(maps), None


def evaluate(predictor: Predictor | Afformer, dataset: Sequence[Sample], res: tuple[int, int] | None = None,
             out_file: str | Path | None = None, batch_size: int = 16, with_actions: bool = True) -> EvalResult:
    """Mean KLD / SIM / AUC-J over ``dataset`` at ``res`` plus top-1 action accuracy.

    AUC-J uses the sample's annotation points when present and the ground-truth
    half-max region otherwise.
    """
    if not dataset:
        raise ValueError("evaluation dataset is empty")
    if isinstance(predictor, Afformer):
        predictor = model_predictor(predictor, batch_size)
    native = dataset[0].heatmap.shape
    res = tuple(res) if res is not None else native
    if res[0] > native[0] or res[1] > native[1]:
        raise ValueError(f"resolution {res} exceeds native resolution {native}")
    rows = []
    correct = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        maps, actions = predictor(chunk)
        for j, s in enumerate(chunk):
            mode = "points" if s.points else "heatmap"
            rep = evaluate_at(s.heatmap, maps[j], res, points=s.points, auc_mode=mode)
            row = {"index": start + j, "kld": rep.kld, "sim": rep.sim, "auc_j": rep.auc_j}
            if with_actions and actions is not None and s.action is not None:
                row["action_pred"] = int(actions[j])
                row["action_gt"] = int(s.action)
                correct.append(int(actions[j]) == int(s.action))
            rows.append(row)
    report = MetricReport(
        kld=float(np.mean([r["kld"] for r in rows])),
        sim=float(np.mean([r["sim"] for r in rows])),
        auc_j=float(np.mean([r["auc_j"] for r in rows])),
        resolution=res,
    )
    acc = float(np.mean(correct)) if correct else None
    if out_file is not None:
        with open(out_file, "w", encoding="utf-8") as f:
            for r in rows:
                f.write(json.dumps(r) + "\n")
    return EvalResult(report, acc, rows)


def zero_shot_eval(model: Afformer, dataset: Sequence[Sample], res: tuple[int, int] | None = None,
                   with_actions: bool = False, out_file: str | Path | None = None) -> EvalResult:
    """Heatmap metrics of a masked-hand pre-trained model on affordance data; no action metrics."""
    if with_actions:
        raise ValueError("action head absent: zero-shot evaluation reports heatmap metrics only")
    return evaluate(model, dataset, res, out_file=out_file, with_actions=False)


def center_bias_baseline(dataset: Sequence[Sample], res: tuple[int, int] | None = None) -> EvalResult:
    return evaluate(center_bias_predictor, dataset, res, with_actions=False)
