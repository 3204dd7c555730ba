"""Cross-attention control: adjacent-frame injection, word swap, local blend.

The source branch records its attention maps into an AttentionStore; a write
hook built here intercepts each edit-branch cross-attention map, blends the
previous source frame's map into the current one (injection), then swaps
columns so that unedited tokens reuse source attention while edited and
subject tokens keep their own (word swap). A threshold mask over accumulated
subject-token attention localizes latent blending.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .conditioning import Condition, TokenAlignment
from .denoiser import AttentionRecord, HookSet, MapKey
from .errors import AlignmentError, ParameterError, ShapeError, StateError, StoreMissError
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class ControllerConfig:
    """Editing knobs; ratios are fractions of the DDIM ladder measured from
    the start of denoising (largest timesteps)."""

    cross_replace_ratio: float = 0.8
    injection_ratio: float = 0.8
    injection_weight: float = 0.5
    attention_threshold: float = 0.3
    local_blend_enabled: bool = True
    self_attention_replace_ratio: float = 0.0
    blend_start_ratio: float = 0.2
    two_pass_edit: bool = False

    def __post_init__(self):
        for name in ("cross_replace_ratio", "injection_ratio", "injection_weight",
                     "self_attention_replace_ratio", "blend_start_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name} must be in [0, 1], got {v}")
        if not 0.0 < self.attention_threshold < 1.0:
            raise ParameterError("attention_threshold must be in (0, 1)")

    @classmethod
    def disabled(cls) -> "ControllerConfig":
        """All gates closed: the edit branch equals plain sampling."""
        return cls(cross_replace_ratio=0.0, injection_ratio=0.0, local_blend_enabled=False)


def in_window(schedule: NoiseSchedule, t: int, ratio: float) -> bool:
    """True when t falls in the earliest ceil(ratio * S) denoising steps."""
    if ratio <= 0.0:
        return False
    active = math.ceil(ratio * schedule.num_ddim_steps)
    return schedule.step_index(t) < active


class AttentionStore:
    """Maps keyed by (timestep, layer, frame, kind) for one branch of a run.

    Single writer per branch; keys are unique. Only the configured kinds are
    retained (cross always; self only when self-attention replacement is on).
    """

    def __init__(self, branch: str, kinds: tuple[str, ...] = ("cross",)):
        self.branch = branch
        self.kinds = tuple(kinds)
        self.maps: dict[MapKey, np.ndarray] = {}

    def put(self, record: AttentionRecord) -> None:
        if record.kind not in self.kinds:
            return
        key = record.key()
        if key in self.maps:
            raise StateError(f"duplicate attention store key {key} on branch {self.branch!r}")
        self.maps[key] = record.map

    def get(self, timestep: int, layer: str, frame: int, kind: str = "cross") -> np.ndarray:
        key = MapKey(timestep, layer, frame, kind)
        try:
            return self.maps[key]
        except KeyError:
            raise StoreMissError(timestep, layer, frame, kind) from None

    def cross_keys(self) -> list[MapKey]:
        return [k for k in self.maps if k.kind == "cross"]

    def __len__(self) -> int:
        return len(self.maps)


@dataclass
class BlendMask:
    """Per-frame binary masks at latent resolution, plus provenance."""

    masks: np.ndarray  # (n_frames, h, w) of {0.0, 1.0}
    token_columns: dict[str, tuple[int, ...]]
    threshold: float
    empty: bool = False

    def __post_init__(self):
        if not np.all(np.isin(self.masks, (0.0, 1.0))):
            raise ShapeError("blend mask entries must be binary")


@dataclass(frozen=True)
class ColumnMap:
    """Condition-level column correspondence for word swap.

    ``mapped[p]`` is the source condition column feeding edit column p, or
    -1 where the edit branch keeps its own column (edited words, subject
    tokens, and anything without a source counterpart).
    """

    source_len: int
    edit_len: int
    mapped: np.ndarray

    def __post_init__(self):
        if self.mapped.shape != (self.edit_len,):
            raise AlignmentError("mapped must have one entry per edit column")
        hit = self.mapped[self.mapped >= 0]
        if hit.size and (hit.max() >= self.source_len or np.unique(hit).size != hit.size):
            raise AlignmentError("mapped columns must be unique, valid source columns")

    @classmethod
    def from_conditions(
        cls, alignment: TokenAlignment, source: Condition, edit: Condition
    ) -> "ColumnMap":
        src_col_of_token = {tp: p for p, tp in enumerate(source.token_positions) if tp >= 0}
        mapped = np.full(len(edit), -1, dtype=np.int64)
        for p, tp in enumerate(edit.token_positions):
            if tp < 0:
                continue  # subject rows stay edit-branch
            q = alignment.mapper.get(tp)
            if q is not None and q in src_col_of_token:
                mapped[p] = src_col_of_token[q]
        return cls(source_len=len(source), edit_len=len(edit), mapped=mapped)

    @classmethod
    def from_token_alignment(
        cls, alignment: TokenAlignment, source_len: int, edit_len: int
    ) -> "ColumnMap":
        mapped = np.full(edit_len, -1, dtype=np.int64)
        for p in range(edit_len):
            q = alignment.mapper.get(p)
            if q is not None:
                if q >= source_len:
                    raise AlignmentError(f"alignment maps past source length at {p} -> {q}")
                mapped[p] = q
        return cls(source_len=source_len, edit_len=edit_len, mapped=mapped)


def inject(
    m_prev: np.ndarray | None,
    m_cur: np.ndarray,
    t: int,
    cfg: ControllerConfig,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Blend the previous frame's map into the current one inside the
    injection window; a convex combination keeps rows stochastic. m_prev of
    None (frame 0) is the identity."""
    if m_prev is None:
        return m_cur
    if m_prev.shape != m_cur.shape:
        raise ShapeError(f"map shapes differ: {m_prev.shape} vs {m_cur.shape}")
    if not in_window(schedule, t, cfg.injection_ratio):
        return m_cur
    lam = cfg.injection_weight
    if lam == 0.0:
        return m_cur
    if lam == 1.0:
        return m_prev
    return lam * m_prev + (1.0 - lam) * m_cur


def edit_word_swap(
    m_plus: np.ndarray,
    m_star: np.ndarray,
    t: int,
    columns: ColumnMap,
    cfg: ControllerConfig,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Word-swap replacement inside the cross-replacement window.

    Mapped edit columns are copied from the (injected) source map; edited and
    subject columns keep the edit branch's own attention. Rows are not
    renormalized (P2P convention). Outside the window returns m_star as is.
    """
    if m_plus.shape[:-1] != m_star.shape[:-1]:
        raise ShapeError(f"query dims differ: {m_plus.shape} vs {m_star.shape}")
    if m_plus.shape[-1] != columns.source_len or m_star.shape[-1] != columns.edit_len:
        raise AlignmentError(
            f"alignment ({columns.source_len}, {columns.edit_len}) inconsistent with key dims "
            f"({m_plus.shape[-1]}, {m_star.shape[-1]})"
        )
    if not in_window(schedule, t, cfg.cross_replace_ratio):
        return m_star
    m_hat = m_star.copy()
    take = columns.mapped >= 0
    m_hat[..., take] = m_plus[..., columns.mapped[take]]
    return m_hat


def make_write_hook(
    store_source: AttentionStore,
    alignment: ColumnMap,
    cfg: ControllerConfig,
    schedule: NoiseSchedule,
    store_edit: AttentionStore | None = None,
) -> HookSet:
    """Controller hook set for the edit branch.

    For each edit-branch cross map at (t, layer, n): look up the source maps
    of frames n-1 and n at the same key, inject, word-swap, and return the
    result; frame 0 skips injection. Self maps are overridden by the source
    branch's map inside their own window when enabled. Returns None (no
    replacement) whenever the result would be bitwise identical.
    """

    def write_hook(key: MapKey, m_star: np.ndarray) -> np.ndarray | None:
        t, layer, frame, kind = key
        if kind == "self":
            if cfg.self_attention_replace_ratio > 0.0 and in_window(
                schedule, t, cfg.self_attention_replace_ratio
            ):
                return store_source.get(t, layer, frame, "self")
            return None
        if kind != "cross":
            return None
        if not in_window(schedule, t, cfg.cross_replace_ratio):
            return None
        m_cur = store_source.get(t, layer, frame, "cross")
        m_prev = store_source.get(t, layer, frame - 1, "cross") if frame > 0 else None
        m_plus = inject(m_prev, m_cur, t, cfg, schedule)
        return edit_word_swap(m_plus, m_star, t, alignment, cfg, schedule)

    if store_edit is not None:
        return HookSet(read_hook=store_edit.put, write_hook=write_hook,
                       read_kinds=store_edit.kinds)
    return HookSet(write_hook=write_hook)


def _accumulate_subject_attention(
    store: AttentionStore, columns: tuple[int, ...], n_frames: int, latent_hw: tuple[int, int]
) -> np.ndarray:
    """Mean subject-column cross attention per frame, upsampled to latent
    resolution; averages over heads, layers, and accumulated timesteps."""
    h, w = latent_hw
    acc = np.zeros((n_frames, h, w))
    counts = np.zeros(n_frames)
    for key in store.cross_keys():
        m = store.maps[key]  # (heads, N, L)
        n_pos = m.shape[1]
        side = int(round(math.sqrt(n_pos)))
        if side * side != n_pos:
            raise ShapeError(f"non-square query dim {n_pos} in stored map")
        sub = m[:, :, list(columns)].mean(axis=(0, 2)).reshape(side, side)
        if side != h:
            factor = h // side
            sub = np.repeat(np.repeat(sub, factor, axis=0), factor, axis=1)
        acc[key.frame] += sub
        counts[key.frame] += 1
    if counts.max() == 0:
        raise StateError("attention store holds no cross maps")
    counts = np.maximum(counts, 1)
    return acc / counts[:, None, None]


def compute_blend_mask(
    store_source: AttentionStore,
    store_edit: AttentionStore,
    source_subject_column: int,
    edit_subject_columns: tuple[int, ...],
    cfg: ControllerConfig,
    n_frames: int,
    latent_hw: tuple[int, int],
) -> BlendMask:
    """Threshold mask from accumulated subject-word attention.

    Each branch's subject-column attention is averaged, rescaled to [0, 1]
    by its per-frame max, and binarized at the attention threshold; the final
    mask is the union so both the cut and the paste regions stay editable.
    """
    union = np.zeros((n_frames,) + latent_hw)
    empty = True
    for store, cols in (
        (store_source, (source_subject_column,)),
        (store_edit, tuple(edit_subject_columns)),
    ):
        if not cols:
            continue
        avg = _accumulate_subject_attention(store, cols, n_frames, latent_hw)
        empty = False
        for f in range(n_frames):
            peak = avg[f].max()
            if peak <= 0:
                continue
            union[f] = np.maximum(union[f], (avg[f] / peak) >= cfg.attention_threshold)
    if empty:
        raise StateError("no subject columns to build a blend mask from")
    return BlendMask(
        masks=union,
        token_columns={
            "source": (source_subject_column,),
            "edit": tuple(edit_subject_columns),
        },
        threshold=cfg.attention_threshold,
    )


def local_blend(z_edit: np.ndarray, z_source: np.ndarray, mask: BlendMask) -> np.ndarray:
    """Per-pixel composite: edit latents inside the mask, source outside."""
    if z_edit.shape != z_source.shape:
        raise ShapeError(f"latent shapes differ: {z_edit.shape} vs {z_source.shape}")
    m = mask.masks
    if m.shape[0] != z_edit.shape[0] or m.shape[-2:] != z_edit.shape[-2:]:
        raise ShapeError(f"mask shape {m.shape} incompatible with latents {z_edit.shape}")
    m = m[:, None, :, :]
    return m * z_edit + (1.0 - m) * z_source
