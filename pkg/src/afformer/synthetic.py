"""Procedural demonstration corpus for desk-scale runs.

Each sample is a short clip of a few colored shapes on a smooth background and
a skin-colored "hand" rectangle that slides in from the frame edge, touches one
shape and then either rests (action 1), wiggles sideways (action 2) or wiggles
vertically (action 3). The target image is the hand-free scene seen through a
random homography with a slight color shift; its ground-truth heatmap is a
Gaussian at the warped contact point. A scripted detector emits hand boxes with
interaction scores for every frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .heatmaps import AffordanceAnnotation, GaussianTargetSpec, points_to_target
from .maskahand import HandDetection, apply_homography, random_homography, warp_image

PALETTE = np.array([
    [230, 40, 40], [40, 90, 230], [40, 190, 60], [240, 220, 40],
    [150, 50, 200], [30, 200, 210], [250, 130, 20], [240, 240, 240],
], dtype=np.float64)
HAND_COLOR = np.array([235, 180, 140], dtype=np.float64)
NUM_ACTIONS = 3


@dataclass
class Sample:
    """One supervised (V, I, A, H) example held in memory."""

    video: np.ndarray  # (T, H, W, 3) uint8
    image: np.ndarray  # (H, W, 3) uint8
    heatmap: np.ndarray  # (H, W), sums to 1
    action: int | None = None
    points: list[tuple[float, float]] | None = None
    detections: list[HandDetection] = field(default_factory=list)
    meta: dict = field(default_factory=dict)


@dataclass
class CorpusSpec:
    n_samples: int = 16
    image_size: int = 32
    clip_len: int = 8
    seed: int = 0
    n_shapes: int = 3
    distortion: float = 0.3
    contact_frame: float = 0.5

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16 pixels")
        if self.clip_len < 2:
            raise ValueError("clip_len must be at least 2")


def _coverage(h: int, w: int, kind: str, box) -> np.ndarray:
    x0, y0, x1, y1 = box
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    if kind == "rect":
        return (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
    cx, cy, rx, ry = (x0 + x1) / 2, (y0 + y1) / 2, (x1 - x0) / 2, (y1 - y0) / 2
    return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0


def _background(rng: np.random.Generator, s: int) -> np.ndarray:
    c0 = rng.uniform(60, 120, size=3)
    c1 = rng.uniform(60, 120, size=3)
    t = np.linspace(0, 1, s)
    if rng.random() < 0.5:
        ramp = t[None, :, None]
    else:
        ramp = t[:, None, None]
    return np.broadcast_to(c0 * (1 - ramp) + c1 * ramp, (s, s, 3)).copy()


def _place_shapes(rng: np.random.Generator, s: int, n: int) -> list[dict]:
    shapes = []
    colors = rng.choice(len(PALETTE), size=n, replace=False)
    margin = s / 10
    for i in range(n):
        for _ in range(200):
            sw = rng.uniform(s / 5, s / 3.2)
            sh = rng.uniform(s / 5, s / 3.2)
            x0 = rng.uniform(margin, s - margin - sw)
            y0 = rng.uniform(margin, s - margin - sh)
            box = (x0, y0, x0 + sw, y0 + sh)
            pad = s / 16
            if all(box[0] > o[2] + pad or box[2] < o[0] - pad or box[1] > o[3] + pad or box[3] < o[1] - pad
                   for o in (sh_["box"] for sh_ in shapes)):
                break
        shapes.append({"box": box, "kind": "rect" if rng.random() < 0.5 else "ellipse",
                       "color": PALETTE[colors[i]]})
    return shapes


def _render(background: np.ndarray, shapes: list[dict], hand_box=None, color_gain=None) -> np.ndarray:
    img = background.copy()
    s = img.shape[0]
    for sh in shapes:
        img[_coverage(s, s, sh["kind"], sh["box"])] = sh["color"]
    if hand_box is not None:
        img[_coverage(s, s, "rect", hand_box)] = HAND_COLOR
    if color_gain is not None:
        img = img * color_gain
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def _hand_track(rng: np.random.Generator, s: int, contact, t: int, action: int, contact_frac: float):
    """Hand box per frame plus whether the hand touches the shape."""
    hw, hh = s / 5, s / 4
    side = rng.integers(4)
    edge = {0: (contact[0], -hh / 2), 1: (s + hw / 2, contact[1]),
            2: (contact[0], s + hh / 2), 3: (-hw / 2, contact[1])}[int(side)]
    t_contact = max(1, int(round(contact_frac * (t - 1))))
    amp = s / 12
    boxes, touching = [], []
    for f in range(t):
        if f < t_contact:
            a = f / t_contact
            cx = edge[0] * (1 - a) + contact[0] * a
            cy = edge[1] * (1 - a) + contact[1] * a
            touch = False
        else:
            k = f - t_contact
            dx = dy = 0.0
            if action == 2:
                dx = amp * (1 if k % 2 else -1) * (k > 0)
            elif action == 3:
                dy = amp * (1 if k % 2 else -1) * (k > 0)
            cx, cy = contact[0] + dx, contact[1] + dy
            touch = True
        boxes.append((cx - hw / 2, cy - hh / 2, cx + hw / 2, cy + hh / 2))
        touching.append(touch)
    return boxes, touching


def _scripted_detections(rng: np.random.Generator, boxes, touching, s: int) -> list[HandDetection]:
    out = []
    for f, (box, touch) in enumerate(zip(boxes, touching)):
        x0, y0, x1, y1 = max(box[0], 0.0), max(box[1], 0.0), min(box[2], float(s)), min(box[3], float(s))
        if x1 - x0 < 1 or y1 - y0 < 1:
            continue
        score = float(rng.uniform(0.992, 1.0)) if touch else float(rng.uniform(0.3, 0.95))
        out.append(HandDetection(f, (x0, y0, x1, y1), score, interacting=bool(touch)))
    return out


def render_sample(rng: np.random.Generator, spec: CorpusSpec) -> Sample:
    s, t = spec.image_size, spec.clip_len
    bg = _background(rng, s)
    shapes = _place_shapes(rng, s, spec.n_shapes)
    target = int(rng.integers(len(shapes)))
    x0, y0, x1, y1 = shapes[target]["box"]
    contact = (rng.uniform(x0 + (x1 - x0) / 3, x1 - (x1 - x0) / 3),
               rng.uniform(y0 + (y1 - y0) / 3, y1 - (y1 - y0) / 3))
    action = int(rng.integers(1, NUM_ACTIONS + 1))
    boxes, touching = _hand_track(rng, s, contact, t, action, spec.contact_frame)
    video = np.stack([_render(bg, shapes, b) for b in boxes])
    detections = _scripted_detections(rng, boxes, touching, s)

    H = random_homography(s, s, spec.distortion, rng)
    gain = rng.uniform(0.85, 1.15, size=3)
    image = np.clip(np.round(warp_image(_render(bg, shapes, color_gain=gain), H)), 0, 255).astype(np.uint8)
    warped = apply_homography(H, [contact])[0]
    # continuous coordinates -> pixel-index coordinates
    point = (float(np.clip(warped[0] - 0.5, 0, s - 1)), float(np.clip(warped[1] - 0.5, 0, s - 1)))
    heatmap = points_to_target(AffordanceAnnotation([point], action), s, s, GaussianTargetSpec.for_frame(s, s))
    return Sample(
        video=video, image=image, heatmap=heatmap.values, action=action, points=[point],
        detections=detections,
        meta={"transform": H.ravel().tolist(), "contact": list(contact), "target_shape": target,
              "shape_box": list(shapes[target]["box"])},
    )


def generate_synthetic_corpus(spec: CorpusSpec | dict, out_dir: str | Path | None = None) -> list[Sample]:
    """Render ``spec.n_samples`` samples deterministically from ``spec.seed``; optionally write them."""
    if isinstance(spec, dict):
        spec = CorpusSpec(**spec)
    rng = np.random.default_rng(spec.seed)
    samples = [render_sample(rng, spec) for _ in range(spec.n_samples)]
    if out_dir is not None:
        write_corpus(out_dir, samples, spec)
    return samples


def write_corpus(out_dir: str | Path, samples: list[Sample], spec: CorpusSpec | None = None) -> Path:
    """Write samples as clips, images, heatmaps and detection sidecars plus ``manifest.jsonl``."""
    from .heatmaps import Heatmap, HeatmapKind, save_heatmap
    from .io import save_clip, save_image
    from .maskahand import write_detections

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as f:
        for i, smp in enumerate(samples):
            name = f"{i:05d}"
            save_clip(out / "videos" / name, smp.video)
            save_image(out / "images" / f"{name}.png", smp.image)
            (out / "heatmaps").mkdir(exist_ok=True)
            save_heatmap(out / "heatmaps" / f"{name}.npy", Heatmap(smp.heatmap, HeatmapKind.SUM_NORMALIZED),
                         GaussianTargetSpec.for_frame(*smp.heatmap.shape))
            (out / "detections").mkdir(exist_ok=True)
            write_detections(out / "detections" / f"{name}.jsonl", smp.detections)
            rec = {
                "video_ref": f"videos/{name}",
                "image_ref": f"images/{name}.png",
                "heatmap_ref": f"heatmaps/{name}.npy",
                "detections_ref": f"detections/{name}.jsonl",
                "action": smp.action,
                "points": [list(p) for p in smp.points] if smp.points else None,
                "meta": smp.meta,
            }
            f.write(json.dumps(rec) + "\n")
    if spec is not None:
        (out / "corpus.json").write_text(json.dumps(spec.__dict__, sort_keys=True), encoding="utf-8")
    return manifest
