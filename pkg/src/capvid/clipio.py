"""Clip/image file I/O and figure-grid rendering.

A clip on disk is a directory of lossless PNGs (frame_0000.png, ...) plus a
manifest.json with frame count, fps, resolution, and caption. Frame grids
and attention heatmaps are emitted as single PNGs.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .errors import ParameterError, PathError, ShapeError


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0


def save_image(path: str | Path, img: np.ndarray) -> None:
    """img: (3, H, W) float in [0, 1] or (H, W) grayscale."""
    arr = np.asarray(img)
    if arr.ndim == 3:
        if arr.shape[0] != 3:
            raise ShapeError(f"expected (3, H, W), got {arr.shape}")
        Image.fromarray(to_uint8(arr.transpose(1, 2, 0)), mode="RGB").save(path)
    elif arr.ndim == 2:
        Image.fromarray(to_uint8(arr), mode="L").save(path)
    else:
        raise ShapeError(f"cannot save array of shape {arr.shape}")


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise PathError(f"no such image: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return from_uint8(arr).transpose(2, 0, 1)


def save_clip(
    directory: str | Path,
    frames: np.ndarray,
    caption: str = "",
    fps: int = 8,
    masks: np.ndarray | None = None,
) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = frames.shape[0]
    for f in range(n):
        save_image(directory / f"frame_{f:04d}.png", frames[f])
    if masks is not None:
        for f in range(n):
            save_image(directory / f"mask_{f:04d}.png", masks[f].astype(np.float64))
    manifest = {
        "frame_count": int(n),
        "fps": int(fps),
        "resolution": [int(frames.shape[-2]), int(frames.shape[-1])],
        "caption": caption,
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def load_clip(directory: str | Path) -> tuple[np.ndarray, dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise PathError(f"no clip manifest in {directory}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    frames = [
        load_image(directory / f"frame_{f:04d}.png") for f in range(manifest["frame_count"])
    ]
    return np.stack(frames), manifest


def load_masks(directory: str | Path, frame_count: int) -> np.ndarray | None:
    directory = Path(directory)
    paths = [directory / f"mask_{f:04d}.png" for f in range(frame_count)]
    if not all(p.exists() for p in paths):
        return None
    masks = []
    for p in paths:
        with Image.open(p) as im:
            masks.append(np.asarray(im.convert("L")) > 127)
    return np.stack(masks)


def frame_grid(rows: list[np.ndarray], labels: list[str] | None = None, pad: int = 2) -> np.ndarray:
    """Stack clips into one image: one row per clip, one column per frame."""
    if not rows:
        raise ParameterError("frame_grid needs at least one row")
    n = rows[0].shape[0]
    h, w = rows[0].shape[-2:]
    for r in rows:
        if r.shape[0] != n or r.shape[-2:] != (h, w):
            raise ShapeError("all rows must have the same frame count and resolution")
    grid_h = len(rows) * (h + pad) + pad
    grid_w = n * (w + pad) + pad
    grid = np.full((3, grid_h, grid_w), 1.0)
    for ri, row in enumerate(rows):
        for fi in range(n):
            y = pad + ri * (h + pad)
            x = pad + fi * (w + pad)
            grid[:, y : y + h, x : x + w] = row[fi]
    return grid


_HEAT_ANCHORS = np.array(
    [
        (0.00, (0.00, 0.00, 0.15)),
        (0.25, (0.23, 0.05, 0.45)),
        (0.50, (0.70, 0.15, 0.35)),
        (0.75, (0.95, 0.55, 0.10)),
        (1.00, (1.00, 0.98, 0.70)),
    ],
    dtype=object,
)


def colorize(values: np.ndarray) -> np.ndarray:
    """Map a 2-D array to a (3, H, W) heat image, normalizing by its range."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    norm = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    stops = np.array([a[0] for a in _HEAT_ANCHORS], dtype=np.float64)
    cols = np.array([a[1] for a in _HEAT_ANCHORS], dtype=np.float64)
    out = np.empty((3,) + v.shape)
    for c in range(3):
        out[c] = np.interp(norm, stops, cols[:, c])
    return out


def token_heatmap_grid(
    maps: np.ndarray,
    token_words: list[str],
    cell: int = 96,
) -> np.ndarray:
    """Per-token heatmap strip from a cross-attention map.

    maps: (heads, N, L) with N a square spatial dim; heads are averaged.
    Words are drawn under each upsampled heatmap.
    """
    heads_avg = np.asarray(maps).mean(axis=0)  # (N, L)
    n_pos, n_tok = heads_avg.shape
    side = int(round(np.sqrt(n_pos)))
    if side * side != n_pos:
        raise ShapeError(f"query dim {n_pos} is not square")
    if n_tok != len(token_words):
        raise ShapeError(f"{n_tok} columns vs {len(token_words)} words")
    label_h = 14
    img = Image.new("RGB", (n_tok * (cell + 2) + 2, cell + label_h + 4), color=(255, 255, 255))
    draw = ImageDraw.Draw(img)
    for i, word in enumerate(token_words):
        heat = colorize(heads_avg[:, i].reshape(side, side))
        tile = Image.fromarray(to_uint8(heat.transpose(1, 2, 0)), mode="RGB").resize(
            (cell, cell), resample=Image.NEAREST
        )
        x = 2 + i * (cell + 2)
        img.paste(tile, (x, 2))
        draw.text((x + 2, cell + 3), word[:12], fill=(0, 0, 0))
    return from_uint8(np.asarray(img)).transpose(2, 0, 1)
