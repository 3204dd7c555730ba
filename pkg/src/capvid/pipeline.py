"""End-to-end editing pipeline: fine-tune, invert, dual-branch denoise, blend.

Per denoising timestep the whole clip is processed jointly: the source
branch denoises and records every frame's cross-attention maps, then the
edit branch denoises under the controller write hook (adjacent-frame
injection followed by word swap at that same timestep) and is locally
blended toward the source latents outside the subject mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conditioning import (
    Condition,
    PromptSpec,
    SubjectEmbedding,
    TokenAlignment,
    Vocabulary,
    align_prompts,
    encode_subject,
    fuse,
    null_condition,
    text_condition,
    tokenize,
)
from .control import (
    AttentionStore,
    BlendMask,
    ColumnMap,
    ControllerConfig,
    compute_blend_mask,
    local_blend,
    make_write_hook,
)
from .denoiser import DenoiserParams, HookSet, denoise, finetune_on_source
from .errors import (
    InversionError,
    ParameterError,
    PipelineStageError,
    ShapeError,
    StateError,
)
from .metrics import (
    AttributeEmbedder,
    MetricReport,
    SubjectEncoderFeatures,
    compute_report,
)
from .schedule import (
    LatentClip,
    NoiseSchedule,
    SamplerConfig,
    ddim_invert_step,
    ddim_step,
)
from .synthdata import SHAPES


# --- fixed latent autoencoder ---------------------------------------------

def encode_frames(frames: np.ndarray, mode: str = "pool2x") -> LatentClip:
    """Frames in [0, 1] -> latents in [-1, 1] (2x average pool by default)."""
    x = np.asarray(frames, dtype=np.float64) * 2.0 - 1.0
    if mode == "identity":
        return x
    if mode != "pool2x":
        raise ParameterError(f"unknown autoencoder {mode!r}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"resolution {(h, w)} not divisible by 2")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def decode_latents(latents: LatentClip, mode: str = "pool2x") -> np.ndarray:
    """Latents in [-1, 1] -> frames in [0, 1] (nearest-neighbor upsample)."""
    z = np.asarray(latents, dtype=np.float64)
    if mode == "pool2x":
        z = np.repeat(np.repeat(z, 2, axis=2), 2, axis=3)
    elif mode != "identity":
        raise ParameterError(f"unknown autoencoder {mode!r}")
    return np.clip((z + 1.0) / 2.0, 0.0, 1.0)


def _predict_eps(
    z: LatentClip,
    t: int,
    condition: Condition,
    params: DenoiserParams,
    sampler: SamplerConfig,
    uncond: Condition | None = None,
    hooks: HookSet | None = None,
) -> np.ndarray:
    """Noise prediction with optional classifier-free guidance; hooks apply
    to the conditioned pass only."""
    eps_c, _ = denoise(z, t, condition, params, hooks=hooks, collect_records=False)
    if sampler.guidance_scale != 1.0 and uncond is not None:
        eps_u, _ = denoise(z, t, uncond, params, collect_records=False)
        return eps_u + sampler.guidance_scale * (eps_c - eps_u)
    return eps_c


def invert_clip(
    latents: LatentClip,
    source_condition: Condition,
    params: DenoiserParams,
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
) -> tuple[LatentClip, list[LatentClip]]:
    """DDIM inversion along the reversed ladder under the source condition.

    Guidance is off during inversion; the noise prediction for each hop is
    evaluated at the destination timestep. The trajectory (starting with the
    input latents) is returned for diagnostics.
    """
    z = np.asarray(latents, dtype=np.float64)
    trajectory = [z]
    for step, (t_from, t_to) in enumerate(schedule.inversion_pairs()):
        eps_hat, _ = denoise(z, t_to, source_condition, params, collect_records=False)
        z = ddim_invert_step(z, eps_hat, t_from, t_to, schedule)
        if not np.all(np.isfinite(z)):
            raise InversionError(step)
        trajectory.append(z)
    return z, trajectory


def sample_clip(
    z_T: LatentClip,
    condition: Condition,
    params: DenoiserParams,
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
    uncond: Condition | None = None,
    hooks: HookSet | None = None,
) -> LatentClip:
    """Plain deterministic DDIM sampling from z_T."""
    z = np.asarray(z_T, dtype=np.float64)
    for t, t_prev in schedule.sampling_pairs():
        eps_hat = _predict_eps(z, t, condition, params, sampler, uncond, hooks)
        z = ddim_step(z, eps_hat, t, t_prev, schedule)
    return z


@dataclass
class DualBranchResult:
    z0_source: LatentClip
    z0_edit: LatentClip
    store_source: AttentionStore
    store_edit: AttentionStore
    blend_mask: BlendMask | None


def run_dual_branch(
    z_T: LatentClip,
    source_condition: Condition,
    edit_condition: Condition,
    columns: ColumnMap,
    cfg: ControllerConfig,
    sampler: SamplerConfig,
    params: DenoiserParams,
    schedule: NoiseSchedule,
    uncond: Condition | None = None,
    source_subject_column: int | None = None,
    edit_subject_columns: tuple[int, ...] = (),
) -> DualBranchResult:
    """Alg.-1 loop: both branches start from z_T and walk the ladder jointly.

    At each timestep the source branch runs first (filling the store the
    controller reads at that same timestep), then the edit branch runs under
    the controller hook, then local blending composites the edit latents
    with the source latents outside the subject mask.
    """
    kinds = ("cross", "self") if cfg.self_attention_replace_ratio > 0 else ("cross",)
    store_source = AttentionStore("source", kinds=kinds)
    store_edit = AttentionStore("edit", kinds=("cross",))
    z_s = np.asarray(z_T, dtype=np.float64)
    z_e = z_s.copy()
    n_frames = z_s.shape[0]
    latent_hw = z_s.shape[-2:]
    can_blend = (
        cfg.local_blend_enabled
        and source_subject_column is not None
        and len(edit_subject_columns) > 0
    )
    blend_active_from = int(np.ceil(cfg.blend_start_ratio * schedule.num_ddim_steps))
    mask: BlendMask | None = None
    source_hooks = HookSet(read_hook=store_source.put, read_kinds=store_source.kinds)
    for step_idx, (t, t_prev) in enumerate(schedule.sampling_pairs()):
        eps_s = _predict_eps(z_s, t, source_condition, params, sampler, uncond, source_hooks)
        z_s = ddim_step(z_s, eps_s, t, t_prev, schedule)
        if cfg.two_pass_edit:
            # literal Alg. 1: one pass to compute the edit maps, a second with
            # the override; the hook recomputes identical maps either way
            denoise(z_e, t, edit_condition, params,
                    hooks=HookSet(read_hook=store_edit.put, read_kinds=store_edit.kinds),
                    collect_records=False)
            edit_hooks = make_write_hook(store_source, columns, cfg, schedule)
        else:
            edit_hooks = make_write_hook(store_source, columns, cfg, schedule, store_edit)
        eps_e = _predict_eps(z_e, t, edit_condition, params, sampler, uncond, edit_hooks)
        z_e = ddim_step(z_e, eps_e, t, t_prev, schedule)
        if can_blend and step_idx >= blend_active_from:
            mask = compute_blend_mask(
                store_source, store_edit, source_subject_column,
                edit_subject_columns, cfg, n_frames, latent_hw,
            )
            z_e = local_blend(z_e, z_s, mask)
    return DualBranchResult(
        z0_source=z_s, z0_edit=z_e, store_source=store_source,
        store_edit=store_edit, blend_mask=mask,
    )


@dataclass
class EditRequest:
    """One edit job: clip + prompts (+ optional reference image) + settings."""

    frames: np.ndarray  # (n, 3, H, W) in [0, 1]
    source_prompt: str
    edit_prompt: str
    params: DenoiserParams
    schedule: NoiseSchedule
    sampler: SamplerConfig
    controller: ControllerConfig
    vocab: Vocabulary
    reference_image: np.ndarray | None = None
    subject_word: str | None = None
    finetune_steps: int = 200
    finetune_lr: float = 1e-4
    autoencoder: str = "pool2x"
    fusion_mode: str = "adjacent"
    compute_metrics: bool = True
    subject_masks: np.ndarray | None = None  # ground truth, for metrics only

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 3 or self.frames.shape[0] < 1:
            raise ShapeError(f"frames must be (n, 3, H, W), got {self.frames.shape}")


@dataclass
class EditResult:
    reconstructed: np.ndarray
    edited: np.ndarray
    blend_masks: np.ndarray | None  # (n, H, W) at frame resolution
    metrics: MetricReport | None
    provenance: dict
    recon_latents: LatentClip
    edited_latents: LatentClip
    store_source: AttentionStore | None = None
    store_edit: AttentionStore | None = None
    finetune_losses: list[float] = field(default_factory=list)


def _infer_subject_word(tokens, vocab: Vocabulary) -> int | None:
    """Position of the last shape word in the sequence, if any."""
    position = None
    for idx, tok in enumerate(tokens):
        if vocab.word(tok) in SHAPES:
            position = idx
    return position


def subject_column_layout(
    prompt_spec: PromptSpec,
    alignment: TokenAlignment,
    source_cond: Condition,
    edit_cond: Condition,
) -> tuple[int | None, tuple[int, ...]]:
    """Source subject column and edit subject columns for blend masking."""
    je = prompt_spec.subject_word_position
    if je is None:
        return None, ()
    js = alignment.mapper.get(je, alignment.swapped_counterparts.get(je))
    source_col = None
    if js is not None:
        for p, tp in enumerate(source_cond.token_positions):
            if tp == js:
                source_col = p
                break
    edit_cols = [p for p, tp in enumerate(edit_cond.token_positions) if tp == je]
    edit_cols.extend(edit_cond.subject_columns())
    return source_col, tuple(edit_cols)


def _upsample_mask(mask: BlendMask, frame_hw: tuple[int, int]) -> np.ndarray:
    m = mask.masks
    factor = frame_hw[0] // m.shape[1]
    if factor > 1:
        m = np.repeat(np.repeat(m, factor, axis=1), factor, axis=2)
    return m


def edit_video(request: EditRequest, provenance: dict | None = None) -> EditResult:
    """Run the full pipeline; stage failures carry the stage name."""

    def stage(name, fn):
        try:
            return fn()
        except Exception as exc:
            raise PipelineStageError(name, exc) from exc

    vocab = request.vocab
    source_tokens = stage("tokenize", lambda: tokenize(request.source_prompt, vocab))
    edit_tokens = stage("tokenize", lambda: tokenize(request.edit_prompt, vocab))
    if request.subject_word is not None:
        subject_pos = edit_tokens.index(vocab.id(request.subject_word.lower()))
    else:
        subject_pos = _infer_subject_word(edit_tokens, vocab)
    if request.reference_image is not None and subject_pos is None:
        raise PipelineStageError(
            "conditions", StateError("reference image given but no subject word found")
        )
    prompt_spec = PromptSpec(
        source_tokens=source_tokens, edit_tokens=edit_tokens, subject_word_position=subject_pos
    )

    latents = stage("encode", lambda: encode_frames(request.frames, request.autoencoder))
    source_cond = stage("conditions", lambda: text_condition(source_tokens, request.params))

    finetune_losses: list[float] = []
    params = stage(
        "finetune",
        lambda: finetune_on_source(
            request.params, latents, source_cond, request.finetune_steps,
            request.finetune_lr, request.schedule, seed=request.sampler.seed,
            loss_history=finetune_losses,
        ),
    )

    def build_edit_condition():
        base = text_condition(edit_tokens, params)
        if request.reference_image is None:
            return base, None
        subject_token = edit_tokens[subject_pos]
        emb: SubjectEmbedding = encode_subject(request.reference_image, subject_token, params)
        return fuse(emb, base, subject_position=subject_pos, mode=request.fusion_mode), emb

    edit_cond, _ = stage("conditions", build_edit_condition)
    alignment = align_prompts(source_tokens, edit_tokens)
    columns = ColumnMap.from_conditions(alignment, source_cond, edit_cond)
    source_col, edit_cols = subject_column_layout(prompt_spec, alignment, source_cond, edit_cond)
    uncond = null_condition(params) if request.sampler.guidance_scale != 1.0 else None

    z_T, _ = stage(
        "invert",
        lambda: invert_clip(latents, source_cond, params, request.schedule, request.sampler),
    )
    branch = stage(
        "dual_branch",
        lambda: run_dual_branch(
            z_T, source_cond, edit_cond, columns, request.controller, request.sampler,
            params, request.schedule, uncond=uncond, source_subject_column=source_col,
            edit_subject_columns=edit_cols,
        ),
    )
    reconstructed = stage(
        "decode", lambda: decode_latents(branch.z0_source, request.autoencoder)
    )
    edited = stage("decode", lambda: decode_latents(branch.z0_edit, request.autoencoder))

    masks_px = None
    if branch.blend_mask is not None:
        masks_px = _upsample_mask(branch.blend_mask, request.frames.shape[-2:])

    report = None
    if request.compute_metrics:
        embedder = AttributeEmbedder(params)
        extractor = SubjectEncoderFeatures(params)
        report = stage(
            "metrics",
            lambda: compute_report(
                request.frames, edited, request.edit_prompt,
                request.subject_masks, embedder, extractor,
            ),
        )

    return EditResult(
        reconstructed=reconstructed,
        edited=edited,
        blend_masks=masks_px,
        metrics=report,
        provenance=dict(provenance or {}),
        recon_latents=branch.z0_source,
        edited_latents=branch.z0_edit,
        store_source=branch.store_source,
        store_edit=branch.store_edit,
        finetune_losses=finetune_losses,
    )
