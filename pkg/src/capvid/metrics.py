"""Evaluation metrics: text alignment, perceptual deviation, temporal
consistency, and background preservation.

The embedders are pluggable. The toy alignment embedder is an attribute
classifier trained on the synthetic corpus; perceptual features come from
mid-depth activations of the trained subject encoder, with a raw-pixel
fallback. Full-scale CLIP/LPIPS networks can be dropped in through the same
interfaces; this package asserts orderings, not their absolute values.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .conditioning import subject_features
from .errors import ParameterError, ShapeError, StateError
from .nn import COMPUTE_DTYPE, ParamStore, init_conv, init_linear
from .synthdata import BACKGROUNDS, COLORS, SHAPES, TEXTURES

ATTRIBUTE_FAMILIES = {
    "shape": SHAPES,
    "color": COLORS,
    "texture": TEXTURES,
    "background": BACKGROUNDS,
}


@dataclass
class MetricReport:
    alignment_score: float | None
    perceptual_deviation: float
    temporal_inconsistency: float
    background_mse: float | None
    per_frame: dict[str, list[float]] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "alignment_score": self.alignment_score,
            "perceptual_deviation": self.perceptual_deviation,
            "temporal_inconsistency": self.temporal_inconsistency,
            "background_mse": self.background_mse,
            "per_frame": self.per_frame,
            "flags": self.flags,
        }


# --- toy attribute classifier --------------------------------------------

def init_probe_params(store: ParamStore, rng: np.random.Generator) -> None:
    store.register("probe.conv1.w", init_conv(rng, 16, 3, 3))
    store.register("probe.conv1.b", np.zeros(16))
    store.register("probe.conv2.w", init_conv(rng, 32, 16, 3))
    store.register("probe.conv2.b", np.zeros(32))
    for family, values in ATTRIBUTE_FAMILIES.items():
        store.register(f"probe.head.{family}.w", init_linear(rng, 32 * 4 * 4, len(values)))
        store.register(f"probe.head.{family}.b", np.zeros(len(values)))


def probe_logits(tensors: dict[str, Tensor], images: Tensor) -> dict[str, Tensor]:
    """images (B, 3, H, W) -> per-family logits (B, n_values)."""
    x = ad.silu(ad.conv2d(images, tensors["probe.conv1.w"], tensors["probe.conv1.b"], stride=2))
    x = ad.silu(ad.conv2d(x, tensors["probe.conv2.w"], tensors["probe.conv2.b"], stride=2))
    side = x.data.shape[-1]
    if side != 4:
        if side % 4:
            raise ShapeError(f"probe input resolution unsupported: map side {side}")
        x = ad.avg_pool2d(x, side // 4)
    feat = ad.reshape(x, (x.data.shape[0], 32 * 4 * 4))
    return {
        family: ad.linear(feat, tensors[f"probe.head.{family}.w"],
                          tensors[f"probe.head.{family}.b"])
        for family in ATTRIBUTE_FAMILIES
    }


class AttributeEmbedder:
    """Frame-level attribute probabilities from the trained probe."""

    def __init__(self, params: ParamStore):
        self.params = params
        self.trained = bool(params.meta.get("probe_trained", False))
        self._tensors = params.tensors(prefix="probe.")

    def frame_probs(self, frame: np.ndarray) -> dict[str, np.ndarray]:
        img = Tensor(np.asarray(frame, dtype=COMPUTE_DTYPE)[None])
        logits = probe_logits(self._tensors, img)
        out = {}
        for family, tensor in logits.items():
            z = tensor.data[0]
            e = np.exp(z - z.max())
            out[family] = e / e.sum()
        return out


class SubjectEncoderFeatures:
    """Perceptual features: mid-depth subject-encoder activations."""

    def __init__(self, params: ParamStore):
        self.params = params

    def __call__(self, frame: np.ndarray) -> np.ndarray:
        return subject_features(frame, self.params)

    @property
    def downscale(self) -> int:
        return 4


class PixelFeatures:
    """Raw-pixel fallback extractor."""

    def __call__(self, frame: np.ndarray) -> np.ndarray:
        return np.asarray(frame, dtype=np.float64)

    @property
    def downscale(self) -> int:
        return 1


def _caption_targets(caption: str) -> dict[str, str]:
    words = caption.lower().split()
    targets = {}
    for family, values in ATTRIBUTE_FAMILIES.items():
        for value in values:
            if value in words:
                targets[family] = value
    return targets


def alignment_score(clip: np.ndarray, caption: str, embedder) -> float:
    """Mean per-frame probability of the caption's attributes; in [0, 1]."""
    if not getattr(embedder, "trained", True):
        raise StateError("alignment embedder is untrained")
    targets = _caption_targets(caption)
    if not targets:
        raise ParameterError(f"caption mentions no known attributes: {caption!r}")
    scores = []
    for frame in clip:
        probs = embedder.frame_probs(frame)
        vals = [
            float(probs[family][ATTRIBUTE_FAMILIES[family].index(value)])
            for family, value in targets.items()
        ]
        scores.append(float(np.mean(vals)))
    return float(np.mean(scores))


def subject_class_score(clip: np.ndarray, subject: tuple[str, str, str], embedder) -> float:
    """Mean probability that frames show the given (shape, color, texture)."""
    shape, color, texture = subject
    scores = []
    for frame in clip:
        probs = embedder.frame_probs(frame)
        scores.append(
            float(
                np.mean(
                    [
                        probs["shape"][SHAPES.index(shape)],
                        probs["color"][COLORS.index(color)],
                        probs["texture"][TEXTURES.index(texture)],
                    ]
                )
            )
        )
    return float(np.mean(scores))


def perceptual_deviation(clip_a: np.ndarray, clip_b: np.ndarray, feature_extractor) -> float:
    """Mean per-frame squared feature distance; symmetric, zero at identity."""
    if clip_a.shape != clip_b.shape:
        raise ShapeError(f"clip shapes differ: {clip_a.shape} vs {clip_b.shape}")
    dists = [
        float(np.mean((feature_extractor(fa) - feature_extractor(fb)) ** 2))
        for fa, fb in zip(clip_a, clip_b)
    ]
    return float(np.mean(dists))


def _pool_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return mask.astype(bool)
    h, w = mask.shape
    return mask.reshape(h // factor, factor, w // factor, factor).any(axis=(1, 3))


def temporal_inconsistency(
    clip: np.ndarray, region_masks: np.ndarray | None = None, feature_extractor=None
) -> float:
    """Mean feature distance between consecutive frames, optionally
    restricted to the union of the two frames' region masks."""
    if clip.shape[0] < 2:
        raise ParameterError("temporal_inconsistency needs at least 2 frames")
    extractor = feature_extractor if feature_extractor is not None else PixelFeatures()
    feats = [extractor(frame) for frame in clip]
    factor = getattr(extractor, "downscale", 1)
    dists = []
    for i in range(len(feats) - 1):
        diff2 = (feats[i] - feats[i + 1]) ** 2
        if region_masks is not None:
            region = _pool_mask(region_masks[i] | region_masks[i + 1], factor)
            if not region.any():
                dists.append(0.0)
                continue
            dists.append(float(diff2[:, region].mean()))
        else:
            dists.append(float(diff2.mean()))
    return float(np.mean(dists))


def background_mse(
    source_clip: np.ndarray, edited_clip: np.ndarray, subject_masks: np.ndarray
) -> float:
    """MSE over mask-complement pixels, averaged over frames."""
    if source_clip.shape != edited_clip.shape:
        raise ShapeError(f"clip shapes differ: {source_clip.shape} vs {edited_clip.shape}")
    if subject_masks.shape[0] != source_clip.shape[0]:
        raise ShapeError("need one mask per frame")
    values = []
    for f in range(source_clip.shape[0]):
        bg = ~subject_masks[f].astype(bool)
        if not bg.any():
            warnings.warn("empty background (mask covers the whole frame); defining MSE as 0")
            values.append(0.0)
            continue
        diff2 = (source_clip[f][:, bg] - edited_clip[f][:, bg]) ** 2
        values.append(float(diff2.mean()))
    return float(np.mean(values))


def compute_report(
    source_clip: np.ndarray,
    edited_clip: np.ndarray,
    caption: str | None,
    subject_masks: np.ndarray | None,
    embedder=None,
    feature_extractor=None,
) -> MetricReport:
    extractor = feature_extractor if feature_extractor is not None else PixelFeatures()
    align = None
    if caption is not None and embedder is not None and getattr(embedder, "trained", False):
        align = alignment_score(edited_clip, caption, embedder)
    bg = None
    flags: list[str] = []
    if subject_masks is not None:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            bg = background_mse(source_clip, edited_clip, subject_masks)
            if caught:
                flags.append("empty_background")
    per_frame = {
        "perceptual_deviation": [
            float(np.mean((extractor(a) - extractor(b)) ** 2))
            for a, b in zip(source_clip, edited_clip)
        ]
    }
    temporal = (
        temporal_inconsistency(edited_clip, None, extractor)
        if edited_clip.shape[0] >= 2
        else 0.0
    )
    return MetricReport(
        alignment_score=align,
        perceptual_deviation=perceptual_deviation(source_clip, edited_clip, extractor),
        temporal_inconsistency=temporal,
        background_mse=bg,
        per_frame=per_frame,
        flags=flags,
    )
