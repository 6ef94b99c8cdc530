"""Image and clip files."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def save_image(path: str | Path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path, format="PNG")


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_clip(path: str | Path, frames: np.ndarray) -> None:
    """Write ``(T, H, W, 3)`` frames as ``path/000000.png, ...`` or, for ``.npy`` paths, one array file."""
    path = Path(path)
    if path.suffix == ".npy":
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, np.asarray(frames, dtype=np.uint8))
        return
    path.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        save_image(path / f"{i:06d}.png", f)


def load_clip(path: str | Path) -> np.ndarray:
    """Read a clip from a directory of numbered images or a multi-frame ``.npy`` array."""
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
        if not files:
            raise ValueError(f"no image frames in {path}")
        return np.stack([load_image(p) for p in files])
    return np.load(path)
