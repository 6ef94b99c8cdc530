"""Dataset manifests, batching, and conversion of masked-hand samples into training samples."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .encoder import uniform_sample_frames
from .heatmaps import load_heatmap
from .io import load_clip, load_image
from .maskahand import SynthParams, make_pretrain_dataset, read_detections
from .synthetic import Sample


@dataclass
class SampleRecord:
    video_ref: str
    image_ref: str
    heatmap_ref: str
    action: int | None = None
    points: list | None = None
    detections_ref: str | None = None

    def load(self, root: Path) -> Sample:
        for ref in (self.video_ref, self.image_ref, self.heatmap_ref):
            if not (root / ref).exists():
                raise FileNotFoundError(f"sample file {root / ref} is missing")
        return Sample(
            video=load_clip(root / self.video_ref),
            image=load_image(root / self.image_ref),
            heatmap=load_heatmap(root / self.heatmap_ref).values,
            action=self.action,
            points=[tuple(p) for p in self.points] if self.points else None,
            detections=read_detections(root / self.detections_ref) if self.detections_ref else [],
        )


def read_manifest(path: str | Path) -> list[SampleRecord]:
    """Records from a JSON-lines manifest; masked-hand manifests map onto the same fields."""
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            r = json.loads(line)
            if "clip_dir" in r:
                records.append(SampleRecord(r["clip_dir"], r["target_image_file"], r["gt_heatmap_file"]))
            else:
                records.append(SampleRecord(r["video_ref"], r["image_ref"], r["heatmap_ref"],
                                            r.get("action"), r.get("points"), r.get("detections_ref")))
    has_action = {r.action is not None for r in records}
    if len(has_action) > 1:
        raise ValueError(f"{path}: action labels present on some samples only")
    return records


def load_dataset(manifest: str | Path) -> list[Sample]:
    root = Path(manifest).parent
    return [r.load(root) for r in read_manifest(manifest)]


def pretrain_samples(corpus: Sequence[Sample], params: SynthParams, clip_len: int, stride: int | None = None,
                     threshold: float = 0.99, per_video: int = 1_000_000) -> list[Sample]:
    """Masked-hand training samples from every video of a corpus (labels ignored)."""
    stride = stride or max(clip_len // 2, 1)
    out = []
    for v, smp in enumerate(corpus):
        try:
            synth = make_pretrain_dataset(smp.video, smp.detections, replace(params, seed=params.seed + 7919 * v),
                                          per_video, clip_len, stride, threshold)
        except ValueError:
            continue
        for s in synth:
            clip = smp.video[s.clip.start_frame:s.clip.start_frame + s.clip.length]
            out.append(Sample(video=clip, image=s.target_image, heatmap=s.gt_heatmap.values,
                              meta={"provenance": s.provenance}))
    if not out:
        raise ValueError("no minable interaction clip in the corpus")
    return out


@dataclass
class Batch:
    video: torch.Tensor  # (B, T, 3, H, W)
    image: torch.Tensor  # (B, 3, H, W)
    heatmap: torch.Tensor  # (B, H, W)
    action: torch.Tensor | None


def collate(samples: Sequence[Sample], max_frames: int, dtype=torch.float32) -> Batch:
    videos = [uniform_sample_frames(s.video, max_frames) for s in samples]
    video = torch.from_numpy(np.stack(videos)).to(dtype).permute(0, 1, 4, 2, 3)
    image = torch.from_numpy(np.stack([s.image for s in samples])).to(dtype).permute(0, 3, 1, 2)
    heatmap = torch.from_numpy(np.stack([s.heatmap for s in samples])).to(dtype)
    actions = [s.action for s in samples]
    action = None if actions[0] is None else torch.tensor(actions, dtype=torch.long)
    return Batch(video.contiguous(), image.contiguous(), heatmap, action)
