"""Masked-hand self-supervision: synthesize (clip, target image, hand heatmap) triples.

Hand detections come from an external interaction detector via a JSON-lines
sidecar. Clips containing a confident interacting hand are mined from the
video; a target image is made from one interaction frame by hiding the hand
(and a decoy region) under noise and warping the result with a random
homography. The ground truth is the original hand box pushed through the same
homography and blurred.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .heatmaps import GaussianTargetSpec, Heatmap, box_mask, gaussian_blur, sum_normalize

Box = tuple[float, float, float, float]


@dataclass
class HandDetection:
    frame_index: int
    box: Box
    score: float
    interacting: bool

    def __post_init__(self):
        self.box = tuple(float(v) for v in self.box)
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate hand box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    def to_record(self) -> dict:
        return {"frame": self.frame_index, "box": list(self.box), "score": self.score,
                "interacting": self.interacting}

    @classmethod
    def from_record(cls, r: dict) -> "HandDetection":
        return cls(int(r["frame"]), tuple(r["box"]), float(r["score"]), bool(r["interacting"]))


def read_detections(path: str | Path) -> list[HandDetection]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(HandDetection.from_record(json.loads(line)))
    return out


def write_detections(path: str | Path, detections: Iterable[HandDetection]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for d in detections:
            f.write(json.dumps(d.to_record()) + "\n")


@dataclass
class ClipSpan:
    start_frame: int
    length: int
    interaction_frames: list[int]

    def __post_init__(self):
        if not self.interaction_frames:
            raise ValueError("clip has no interaction frame")
        if any(not self.start_frame <= f < self.start_frame + self.length for f in self.interaction_frames):
            raise ValueError("interaction frame outside clip span")

    @property
    def frames(self) -> range:
        return range(self.start_frame, self.start_frame + self.length)


@dataclass
class SynthParams:
    hand_mask_count: int = 1
    random_mask_count: int = 1
    mask_scale: float = 1.5
    distortion: float = 0.5
    fill: str = "random_noise"
    seed: int = 0
    target_spec: GaussianTargetSpec | None = None

    def __post_init__(self):
        if self.hand_mask_count not in (0, 1):
            raise ValueError("hand_mask_count must be 0 or 1")
        if self.random_mask_count < 0:
            raise ValueError("random_mask_count must be >= 0")
        if self.mask_scale < 1:
            raise ValueError("mask_scale must be >= 1")
        if not 0 <= self.distortion < 1:
            raise ValueError("distortion must lie in [0, 1)")
        if self.fill not in ("random_noise", "zero"):
            raise ValueError(f"unknown fill {self.fill!r}")


@dataclass
class SynthSample:
    clip: ClipSpan
    target_image: np.ndarray  # (H, W, 3) uint8
    gt_heatmap: Heatmap
    transform: np.ndarray  # 3x3, source frame -> target image
    provenance: dict = field(default_factory=dict)


def mine_clips(detections: Sequence[HandDetection], video_length: int, clip_len: int = 32,
               stride: int = 16, threshold: float = 0.99) -> list[ClipSpan]:
    """Windows ``[s, s + clip_len)`` at ``s = 0, stride, ...`` holding a confident interacting hand."""
    if video_length < clip_len:
        warnings.warn(f"video of {video_length} frames is shorter than a {clip_len}-frame clip")
        return []
    frames = np.unique([d.frame_index for d in detections if d.interacting and d.score >= threshold])
    clips = []
    for start in range(0, video_length - clip_len + 1, stride):
        lo, hi = np.searchsorted(frames, [start, start + clip_len])
        if hi > lo:
            clips.append(ClipSpan(start, clip_len, frames[lo:hi].tolist()))
    return clips


def best_hand_boxes(detections: Sequence[HandDetection], threshold: float = 0.99) -> dict[int, Box]:
    """Highest-scoring qualifying interacting box per frame."""
    best: dict[int, HandDetection] = {}
    for d in detections:
        if d.interacting and d.score >= threshold:
            cur = best.get(d.frame_index)
            if cur is None or d.score > cur.score:
                best[d.frame_index] = d
    return {f: d.box for f, d in best.items()}


# ---------------------------------------------------------------------------
# homographies and warping (continuous corner coordinates)


def homography_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Exact 3x3 homography (``H[2, 2] = 1``) mapping four ``src`` points to ``dst``."""
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    h = np.linalg.solve(a, b)
    return np.append(h, 1.0).reshape(3, 3)


def apply_homography(H: np.ndarray, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    hom = np.c_[pts, np.ones(len(pts))] @ H.T
    return hom[:, :2] / hom[:, 2:3]


def _degenerate(quad: np.ndarray) -> bool:
    for i in range(4):
        a, b, c = quad[i], quad[(i + 1) % 4], quad[(i + 2) % 4]
        if abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])) < 1e-6:
            return True
    return False


def random_homography(w: int, h: int, distortion: float, rng: np.random.Generator,
                      max_tries: int = 8) -> np.ndarray:
    """Perspective warp moving each frame corner inward by up to ``distortion * (w/2, h/2)``."""
    if not 0 <= distortion < 1:
        raise ValueError("distortion must lie in [0, 1)")
    src = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64)
    inward = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=np.float64)
    for _ in range(max_tries):
        offsets = rng.uniform(0, 1, size=(4, 2)) * np.array([distortion * w / 2, distortion * h / 2])
        dst = src + inward * offsets
        if _degenerate(dst):
            continue
        H = homography_from_points(src, dst)
        if abs(np.linalg.det(H)) > 1e-9:
            return H
    raise RuntimeError(f"could not draw a non-degenerate homography in {max_tries} tries")


def _source_coords(H: np.ndarray, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous source coordinates for every target pixel center."""
    Hinv = np.linalg.inv(H)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)])
    src = Hinv @ pts
    return (src[0] / src[2]).reshape(h, w), (src[1] / src[2]).reshape(h, w)


def warp_image(img: np.ndarray, H: np.ndarray, interpolation: str = "bilinear") -> np.ndarray:
    """Inverse-map warp of an ``(H, W)`` or ``(H, W, C)`` array; samples outside the source are 0."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    sx, sy = _source_coords(H, h, w)
    if interpolation == "nearest":
        cols = np.floor(sx).astype(np.int64)
        rows = np.floor(sy).astype(np.int64)
        valid = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
        out = np.zeros_like(img)
        out[valid] = img[rows[valid], cols[valid]]
        return out
    if interpolation != "bilinear":
        raise ValueError(f"unknown interpolation {interpolation!r}")
    # pixel-index coordinates: pixel centers at integers
    fx = sx - 0.5
    fy = sy - 0.5
    valid = (fx >= 0) & (fx <= w - 1) & (fy >= 0) & (fy <= h - 1)
    x0 = np.clip(np.floor(fx).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(fy).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = fx - x0
    ay = fy - y0
    if img.ndim == 3:
        ax = ax[..., None]
        ay = ay[..., None]
    out = ((1 - ay) * ((1 - ax) * img[y0, x0] + ax * img[y0, x1])
           + ay * ((1 - ax) * img[y1, x0] + ax * img[y1, x1]))
    out[~valid] = 0
    return out


def warped_box_mask(box: Box, H: np.ndarray, h: int, w: int) -> np.ndarray:
    """Target pixels whose center maps back inside ``box`` under ``H``."""
    sx, sy = _source_coords(H, h, w)
    x0, y0, x1, y1 = box
    return ((sx >= x0) & (sx < x1) & (sy >= y0) & (sy < y1)).astype(np.float64)


# ---------------------------------------------------------------------------
# target synthesis


def enlarge_box(box: Box, scale: float, h: int, w: int) -> Box:
    """Scale a box about its center, clipped to the frame."""
    x0, y0, x1, y1 = box
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    hw, hh = (x1 - x0) * scale / 2, (y1 - y0) * scale / 2
    return (max(cx - hw, 0.0), max(cy - hh, 0.0), min(cx + hw, float(w)), min(cy + hh, float(h)))


def _fill(region: np.ndarray, fill: str, rng: np.random.Generator) -> np.ndarray:
    if fill == "zero":
        return np.zeros(region.shape)
    return rng.integers(0, 256, size=region.shape).astype(np.float64)


def synthesize_target(frames: np.ndarray, span: ClipSpan, hand_boxes: dict[int, Box],
                      params: SynthParams, frame_choice: int | None = None) -> SynthSample:
    """Build one masked, perspective-warped target image and its hand heatmap.

    ``frames`` is the whole video ``(N, H, W, 3)``. The interaction frame is drawn
    uniformly from ``span.interaction_frames`` unless ``frame_choice`` is given.
    """
    if not span.interaction_frames:
        raise ValueError("clip has no interaction frame")
    rng = np.random.default_rng(params.seed)
    pick = int(rng.integers(len(span.interaction_frames)))
    frame_idx = span.interaction_frames[pick] if frame_choice is None else frame_choice
    if frame_idx not in hand_boxes:
        raise ValueError(f"no qualifying hand box for frame {frame_idx}")
    frame = np.asarray(frames[frame_idx], dtype=np.float64)
    h, w = frame.shape[:2]
    hand = tuple(float(v) for v in hand_boxes[frame_idx])
    masked = frame.copy()

    rects = []
    big = enlarge_box(hand, params.mask_scale, h, w)
    if params.hand_mask_count:
        m = box_mask(big, h, w).astype(bool)
        if m.all():
            raise ValueError("mask degenerate: enlarged hand mask covers the whole frame")
        if not m.any():
            raise ValueError("mask degenerate: enlarged hand mask covers no pixel")
        masked[m] = _fill(masked[m], params.fill, rng)
        rects.append(big)
    bw, bh = big[2] - big[0], big[3] - big[1]
    for _ in range(params.random_mask_count):
        rx = rng.uniform(0, w - bw)
        ry = rng.uniform(0, h - bh)
        r = (rx, ry, rx + bw, ry + bh)
        m = box_mask(r, h, w).astype(bool)
        masked[m] = _fill(masked[m], params.fill, rng)
        rects.append(r)

    H = random_homography(w, h, params.distortion, rng)
    target = np.clip(np.round(warp_image(masked, H, "bilinear")), 0, 255).astype(np.uint8)
    warped_mask = warped_box_mask(hand, H, h, w)
    if not warped_mask.any():
        raise ValueError("warped hand box covers no pixel")
    spec = params.target_spec or GaussianTargetSpec.for_frame(h, w)
    gt = sum_normalize(gaussian_blur(warped_mask, spec))
    return SynthSample(
        clip=span,
        target_image=target,
        gt_heatmap=gt,
        transform=H,
        provenance={"source_frame": int(frame_idx), "hand_box": list(hand),
                    "mask_rects": [list(r) for r in rects], "seed": int(params.seed)},
    )


def make_pretrain_dataset(video_frames: np.ndarray, detections: Sequence[HandDetection], params: SynthParams,
                          count: int, clip_len: int = 32, stride: int = 16,
                          threshold: float = 0.99) -> list[SynthSample]:
    """Mine clips and synthesize up to ``count`` samples, one per (clip, interaction frame) pair.

    Sample ``i`` uses seed ``params.seed ^ i``. The clip itself is left untouched,
    so the chosen interaction frame stays in the video.
    """
    clips = mine_clips(detections, len(video_frames), clip_len, stride, threshold)
    if not clips:
        raise ValueError("no minable interaction clip in this video")
    boxes = best_hand_boxes(detections, threshold)
    pairs = [(c, f) for c in clips for f in c.interaction_frames]
    if count < len(pairs):
        order = np.random.default_rng(params.seed).permutation(len(pairs))[:count]
        pairs = [pairs[i] for i in sorted(order)]
    samples = []
    for i, (clip, f) in enumerate(pairs):
        p = replace(params, seed=params.seed ^ i)
        samples.append(synthesize_target(video_frames, clip, boxes, p, frame_choice=f))
    return samples


def write_dataset(out_dir: str | Path, samples: Sequence[SynthSample], video_frames: np.ndarray,
                  video_id: str = "video") -> Path:
    """Write clips, target images and heatmaps plus a JSON-lines manifest; returns the manifest path."""
    from .io import save_clip, save_image
    from .heatmaps import save_heatmap

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with open(manifest, "a", encoding="utf-8") as f:
        for i, s in enumerate(samples):
            name = f"{video_id}_{i:05d}"
            clip_dir = out / "clips" / f"{video_id}_{s.clip.start_frame:06d}"
            if not clip_dir.exists():
                save_clip(clip_dir, video_frames[s.clip.start_frame:s.clip.start_frame + s.clip.length])
            img_file = out / "images" / f"{name}.png"
            save_image(img_file, s.target_image)
            hm_file = out / "heatmaps" / f"{name}.npy"
            hm_file.parent.mkdir(parents=True, exist_ok=True)
            save_heatmap(hm_file, s.gt_heatmap)
            rec = {
                "clip_dir": str(clip_dir.relative_to(out)),
                "target_image_file": str(img_file.relative_to(out)),
                "gt_heatmap_file": str(hm_file.relative_to(out)),
                "transform": [float(v) for v in s.transform.ravel()],
                "provenance": s.provenance,
            }
            f.write(json.dumps(rec) + "\n")
    return manifest
