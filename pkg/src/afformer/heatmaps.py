"""Heatmap types, Gaussian target generation and the two heatmap normalizations.

Coordinate conventions used across the package:

* Annotation points are pixel-index coordinates: pixel ``(row, col)`` has its
  center at ``(x=col, y=row)``. Points snap to the nearest pixel, ties rounding
  down.
* Boxes and homographies use continuous corner coordinates: pixel ``(row, col)``
  covers ``[col, col + 1) x [row, row + 1)``. A pixel belongs to a box when its
  center ``(col + 0.5, row + 0.5)`` lies inside ``[x0, x1) x [y0, y1)``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

SUM_TOL = 1e-6


class HeatmapKind(str, enum.Enum):
    SUM_NORMALIZED = "sum_normalized"
    LOGITS = "logits"
    RAW = "raw"


@dataclass
class Heatmap:
    values: np.ndarray
    kind: HeatmapKind = HeatmapKind.RAW

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.kind = HeatmapKind(self.kind)
        if self.values.ndim != 2:
            raise ValueError(f"heatmap must be 2-D, got shape {self.values.shape}")
        if self.kind is HeatmapKind.SUM_NORMALIZED:
            if np.any(self.values < 0):
                raise ValueError("sum-normalized heatmap has negative values")
            total = self.values.sum()
            if abs(total - 1.0) > SUM_TOL:
                raise ValueError(f"sum-normalized heatmap sums to {total}, not 1")
        elif self.kind is HeatmapKind.RAW and np.any(self.values < 0):
            raise ValueError("raw heatmap has negative values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass
class AffordanceAnnotation:
    """Annotated interaction points on the target image, plus an optional action.

    ``action`` is 1-based, in ``1..c``.
    """

    points: list[tuple[float, float]]
    action: int | None = None

    def __post_init__(self):
        self.points = [(float(x), float(y)) for x, y in self.points]

    def validate(self, h: int, w: int) -> None:
        if not self.points:
            raise ValueError("no annotation points")
        for i, (x, y) in enumerate(self.points):
            if not (0 <= x < w and 0 <= y < h):
                raise ValueError(f"annotation point {i} at ({x}, {y}) lies outside the {h}x{w} frame")

    def to_dict(self) -> dict:
        return {"points": [list(p) for p in self.points], "action": self.action}

    @classmethod
    def from_dict(cls, d: dict) -> "AffordanceAnnotation":
        return cls(points=[tuple(p) for p in d["points"]], action=d.get("action"))


def default_kernel_size(h: int, w: int) -> int:
    """Largest odd integer not above sqrt(h * w) / 3 (85 for 256x256)."""
    k = int(math.floor(math.sqrt(h * w) / 3.0))
    if k % 2 == 0:
        k -= 1
    return max(k, 1)


def default_sigma(kernel_size: int) -> float:
    return 0.3 * ((kernel_size - 1) / 2 - 1) + 0.8


@dataclass(frozen=True)
class GaussianTargetSpec:
    kernel_size: int
    sigma: float = field(default=None)  # type: ignore[assignment]
    border: str = "reflect"

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be an odd positive integer, got {self.kernel_size}")
        if self.sigma is None:
            object.__setattr__(self, "sigma", default_sigma(self.kernel_size))
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @classmethod
    def for_frame(cls, h: int, w: int, **kwargs) -> "GaussianTargetSpec":
        return cls(kernel_size=default_kernel_size(h, w), **kwargs)

    def kernel_1d(self) -> np.ndarray:
        r = (self.kernel_size - 1) / 2
        x = np.arange(self.kernel_size, dtype=np.float64) - r
        k = np.exp(-(x**2) / (2 * self.sigma**2))
        return k / k.sum()

    def to_dict(self) -> dict:
        return {"kernel_size": self.kernel_size, "sigma": self.sigma, "border": self.border}


def gaussian_blur(m: np.ndarray, spec: GaussianTargetSpec) -> np.ndarray:
    """Separable Gaussian blur using the target spec's kernel size, sigma and border mode."""
    k = spec.kernel_1d()
    out = ndimage.correlate1d(np.asarray(m, dtype=np.float64), k, axis=0, mode=spec.border)
    return ndimage.correlate1d(out, k, axis=1, mode=spec.border)


def round_half_down(x):
    """Nearest integer, ties toward negative infinity."""
    return np.ceil(np.asarray(x, dtype=np.float64) - 0.5).astype(np.int64)


def point_to_pixel(x: float, y: float, h: int, w: int) -> tuple[int, int]:
    """Snap a pixel-index point to its ``(row, col)``."""
    col = int(np.clip(round_half_down(x), 0, w - 1))
    row = int(np.clip(round_half_down(y), 0, h - 1))
    return row, col


def sum_normalize(m) -> Heatmap:
    v = np.asarray(m, dtype=np.float64)
    if np.any(v < 0):
        raise ValueError("sum_normalize expects nonnegative values")
    total = v.sum()
    if not total > 0:
        raise ValueError("degenerate heatmap: values sum to zero")
    return Heatmap(v / total, HeatmapKind.SUM_NORMALIZED)


def softmax_normalize(m) -> Heatmap:
    v = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax_normalize expects finite logits")
    e = np.exp(v - v.max())
    return Heatmap(e / e.sum(), HeatmapKind.SUM_NORMALIZED)


def points_to_target(annotation: AffordanceAnnotation | Sequence, h: int, w: int,
                     spec: GaussianTargetSpec | None = None) -> Heatmap:
    """Blur a unit-impulse map of the annotation points and renormalize to sum 1.

    Every point carries equal weight; points snapping to the same pixel stack.
    """
    if not isinstance(annotation, AffordanceAnnotation):
        annotation = AffordanceAnnotation(points=list(annotation))
    annotation.validate(h, w)
    spec = spec or GaussianTargetSpec.for_frame(h, w)
    impulses = np.zeros((h, w))
    for x, y in annotation.points:
        impulses[point_to_pixel(x, y, h, w)] += 1.0
    return sum_normalize(gaussian_blur(impulses, spec))


def box_mask(box: Sequence[float], h: int, w: int) -> np.ndarray:
    """Binary mask of pixels whose centers fall inside ``[x0, x1) x [y0, y1)``."""
    x0, y0, x1, y1 = (float(v) for v in box)
    cols = np.arange(w) + 0.5
    rows = np.arange(h) + 0.5
    in_x = (cols >= x0) & (cols < x1)
    in_y = (rows >= y0) & (rows < y1)
    return (in_y[:, None] & in_x[None, :]).astype(np.float64)


def box_to_mask_heatmap(box: Sequence[float], h: int, w: int,
                        spec: GaussianTargetSpec | None = None) -> Heatmap:
    x0, y0, x1, y1 = (float(v) for v in box)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"box {tuple(box)} has no area")
    mask = box_mask(box, h, w)
    if not mask.any():
        raise ValueError(f"box {tuple(box)} covers no pixel of the {h}x{w} frame")
    spec = spec or GaussianTargetSpec.for_frame(h, w)
    return sum_normalize(gaussian_blur(mask, spec))


# ---------------------------------------------------------------------------
# serialization


def save_heatmap(path: str | Path, heatmap: Heatmap, spec: GaussianTargetSpec | None = None) -> None:
    """Write ``<path>.npy`` plus a ``<path>.json`` header (shape, kind, spec)."""
    path = Path(path).with_suffix("")
    np.save(path.with_suffix(".npy"), heatmap.values)
    header = {
        "shape": list(heatmap.shape),
        "kind": heatmap.kind.value,
        "spec": spec.to_dict() if spec is not None else None,
    }
    path.with_suffix(".json").write_text(json.dumps(header, sort_keys=True), encoding="utf-8")


def load_heatmap(path: str | Path) -> Heatmap:
    path = Path(path).with_suffix("")
    values = np.load(path.with_suffix(".npy"))
    header_path = path.with_suffix(".json")
    if header_path.exists():
        header = json.loads(header_path.read_text(encoding="utf-8"))
        if tuple(header["shape"]) != values.shape:
            raise ValueError(f"{header_path}: header shape {header['shape']} != array shape {values.shape}")
        kind = header["kind"]
    else:
        kind = HeatmapKind.RAW
    return Heatmap(values, kind)


def save_annotation(path: str | Path, annotation: AffordanceAnnotation) -> None:
    Path(path).write_text(json.dumps(annotation.to_dict()), encoding="utf-8")


def load_annotation(path: str | Path) -> AffordanceAnnotation:
    return AffordanceAnnotation.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
