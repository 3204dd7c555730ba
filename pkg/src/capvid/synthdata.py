"""Procedural corpus of captioned moving-shape clips with exact masks.

Every clip renders deterministically from its spec; subject masks come from
the same membership test as the renderer, so they are exact by construction
and power verification that a full-scale setup would do by eye.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "blue", "green", "yellow")
TEXTURES = ("solid", "striped")
MOTIONS = ("left-to-right", "up-to-down", "diagonal")
BACKGROUNDS = ("plain", "gradient", "checker")

COLOR_RGB = {
    "red": (0.85, 0.12, 0.12),
    "blue": (0.15, 0.25, 0.85),
    "green": (0.12, 0.72, 0.20),
    "yellow": (0.90, 0.85, 0.15),
}


@dataclass(frozen=True)
class ClipSpec:
    shape: str
    color: str
    texture: str
    motion: str
    background: str
    n_frames: int = 8
    resolution: int = 64
    seed: int = 0

    def __post_init__(self):
        for value, allowed in (
            (self.shape, SHAPES),
            (self.color, COLORS),
            (self.texture, TEXTURES),
            (self.motion, MOTIONS),
            (self.background, BACKGROUNDS),
        ):
            if value not in allowed:
                raise ParameterError(f"{value!r} not one of {allowed}")
        if self.n_frames < 1 or self.resolution < 16:
            raise ParameterError("need n_frames >= 1 and resolution >= 16")

    def caption(self) -> str:
        texture = "striped " if self.texture == "striped" else ""
        return f"a {self.color} {texture}{self.shape} moving on the {self.background}"

    def subject(self) -> tuple[str, str, str]:
        return (self.shape, self.color, self.texture)


@dataclass(frozen=True)
class ClipEntry:
    clip_id: int
    spec: ClipSpec
    caption: str
    split: str


@dataclass
class CorpusManifest:
    seed: int
    entries: list[ClipEntry]

    def clips(self, split: str | None = None) -> list[ClipEntry]:
        if split is None:
            return list(self.entries)
        return [e for e in self.entries if e.split == split]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"kind": "corpus", "seed": self.seed}) + "\n")
            for e in self.entries:
                row = {"clip_id": e.clip_id, "caption": e.caption, "split": e.split,
                       "spec": asdict(e.spec)}
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CorpusManifest":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        head = json.loads(lines[0])
        entries = []
        for line in lines[1:]:
            row = json.loads(line)
            entries.append(
                ClipEntry(
                    clip_id=row["clip_id"],
                    spec=ClipSpec(**row["spec"]),
                    caption=row["caption"],
                    split=row["split"],
                )
            )
        return cls(seed=head["seed"], entries=entries)


def _shape_mask(shape: str, cx: float, cy: float, radius: float, res: int) -> np.ndarray:
    ys, xs = np.mgrid[0:res, 0:res]
    if shape == "square":
        return (np.abs(xs - cx) <= radius) & (np.abs(ys - cy) <= radius)
    if shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= radius**2
    # upward-pointing triangle: width grows linearly from apex to base
    rel = (ys - (cy - radius)) / (2.0 * radius)
    half_w = radius * np.clip(rel, 0.0, 1.0)
    return (np.abs(xs - cx) <= half_w) & (ys >= cy - radius) & (ys <= cy + radius)


def _background(background: str, res: int) -> np.ndarray:
    if background == "plain":
        return np.full((3, res, res), 0.55)
    if background == "gradient":
        ramp = np.linspace(0.30, 0.75, res)
        return np.broadcast_to(ramp[None, None, :], (3, res, res)).copy()
    cell = max(4, res // 8)
    ys, xs = np.mgrid[0:res, 0:res]
    checker = ((ys // cell + xs // cell) % 2).astype(np.float64)
    return np.broadcast_to(0.45 + 0.20 * checker, (3, res, res)).copy()


def generate_clip(spec: ClipSpec) -> tuple[np.ndarray, str, np.ndarray]:
    """Render a clip: frames (n, 3, res, res) in [0, 1], caption, exact masks."""
    rng = np.random.default_rng(spec.seed)
    res = spec.resolution
    radius = res * (0.17 + 0.06 * rng.random())
    margin = radius + 1.0
    lo, hi = margin, res - 1 - margin
    jitter = (rng.random(2) - 0.5) * res * 0.08
    path = np.linspace(0.15, 0.85, spec.n_frames) if spec.n_frames > 1 else np.array([0.5])
    fixed = 0.5 + (rng.random() - 0.5) * 0.3
    frames = np.empty((spec.n_frames, 3, res, res))
    masks = np.empty((spec.n_frames, res, res), dtype=bool)
    bg = _background(spec.background, res)
    color = np.array(COLOR_RGB[spec.color])
    stripe_period = max(3, res // 10)
    for f in range(spec.n_frames):
        if spec.motion == "left-to-right":
            cx, cy = lo + path[f] * (hi - lo), lo + fixed * (hi - lo)
        elif spec.motion == "up-to-down":
            cx, cy = lo + fixed * (hi - lo), lo + path[f] * (hi - lo)
        else:  # diagonal
            cx = lo + path[f] * (hi - lo)
            cy = lo + path[f] * (hi - lo)
        cx = float(np.clip(cx + jitter[0], lo, hi))
        cy = float(np.clip(cy + jitter[1], lo, hi))
        mask = _shape_mask(spec.shape, cx, cy, radius, res)
        frame = bg.copy()
        fill = np.broadcast_to(color[:, None, None], (3, res, res)).copy()
        if spec.texture == "striped":
            ys = np.mgrid[0:res, 0:res][0]
            stripes = ((ys // stripe_period) % 2) == 0
            fill = np.where(stripes[None], fill, fill * 0.35)
        frame[:, mask] = fill[:, mask]
        frames[f] = frame
        masks[f] = mask
    return frames, spec.caption(), masks


def generate_corpus(
    n_clips: int,
    seed: int,
    n_frames: int = 8,
    resolution: int = 64,
    val_fraction: float = 0.1,
) -> CorpusManifest:
    """Uniformly sampled specs with a deterministic train/val split."""
    if n_clips < 1:
        raise ParameterError("n_clips must be >= 1")
    entries = []
    val_every = max(2, int(round(1.0 / val_fraction))) if val_fraction > 0 else 0
    for clip_id in range(n_clips):
        clip_seed = int(np.random.SeedSequence((seed, clip_id)).generate_state(1)[0])
        rng = np.random.default_rng(clip_seed)
        spec = ClipSpec(
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=COLORS[rng.integers(len(COLORS))],
            texture=TEXTURES[rng.integers(len(TEXTURES))],
            motion=MOTIONS[rng.integers(len(MOTIONS))],
            background=BACKGROUNDS[rng.integers(len(BACKGROUNDS))],
            n_frames=n_frames,
            resolution=resolution,
            seed=clip_seed,
        )
        split = "val" if val_every and clip_id % val_every == val_every - 1 else "train"
        entries.append(ClipEntry(clip_id=clip_id, spec=spec, caption=spec.caption(), split=split))
    return CorpusManifest(seed=seed, entries=entries)


def render_reference(
    shape: str,
    color: str,
    texture: str,
    pose_seed: int,
    resolution: int = 64,
) -> np.ndarray:
    """Single centered render on a neutral background, used as reference I."""
    rng = np.random.default_rng(pose_seed)
    res = resolution
    radius = res * (0.20 + 0.05 * rng.random())
    cx = res / 2.0 + (rng.random() - 0.5) * res * 0.08
    cy = res / 2.0 + (rng.random() - 0.5) * res * 0.08
    img = np.full((3, res, res), 0.5)
    mask = _shape_mask(shape, cx, cy, radius, res)
    fill = np.broadcast_to(np.array(COLOR_RGB[color])[:, None, None], (3, res, res)).copy()
    if texture == "striped":
        ys = np.mgrid[0:res, 0:res][0]
        stripes = ((ys // max(3, res // 10)) % 2) == 0
        fill = np.where(stripes[None], fill, fill * 0.35)
    img[:, mask] = fill[:, mask]
    return img


def subject_classes() -> list[tuple[str, str, str]]:
    """All 24 (shape, color, texture) combinations."""
    return [(s, c, t) for s in SHAPES for c in COLORS for t in TEXTURES]
