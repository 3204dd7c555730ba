"""Toy trainable noise-prediction network with attention hook points.

A small two-level encoder-decoder over latent clips. Each attention block
runs spatial self-attention, cross-attention over condition tokens, and
frame-axis attention (per spatial location across frames), so conditioning
enters the network only through cross-attention values. Every attention
map can be observed (read hook) or replaced before the value product
(write hook), which is what the editing controller builds on.

All computation runs in float64; parameters are stored float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .conditioning import Condition
from .errors import HookError, NumericError, ParameterError, ShapeError
from .nn import (
    COMPUTE_DTYPE,
    Adam,
    ParamStore,
    init_conv,
    init_linear,
    positional_grid,
    sinusoidal_embedding,
)
from .schedule import LatentClip, NoiseSchedule, add_noise

DenoiserParams = ParamStore

ROW_SUM_TOL = 1e-5
ATTENTION_KINDS = ("self", "cross", "frame")


class MapKey(NamedTuple):
    timestep: int
    layer: str
    frame: int
    kind: str


@dataclass
class AttentionRecord:
    """One attention map: (heads, query_positions, key_positions)."""

    map: np.ndarray
    layer_id: str
    frame_index: int
    timestep: int
    kind: str

    def key(self) -> MapKey:
        return MapKey(self.timestep, self.layer_id, self.frame_index, self.kind)

    def validate(self) -> None:
        if self.map.ndim != 3:
            raise ShapeError(f"attention map must be 3-D, got {self.map.shape}")
        if np.any(self.map < 0.0):
            raise ShapeError("attention map has negative entries")
        sums = self.map.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > ROW_SUM_TOL):
            raise ShapeError("attention map rows do not sum to 1")


@dataclass
class HookSet:
    """Callbacks observing / replacing attention maps during a denoise call.

    read_kinds limits which kinds the read hook receives (None = all);
    replacement maps are validated against the AttentionRecord invariants.
    """

    read_hook: Callable[[AttentionRecord], None] | None = None
    write_hook: Callable[[MapKey, np.ndarray], np.ndarray | None] | None = None
    read_kinds: tuple[str, ...] | None = None


def default_arch(
    width: int = 32,
    heads: int = 2,
    cond_dim: int = 32,
    latent_channels: int = 3,
    levels: int = 2,
    blocks_per_level: int = 2,
    max_frames: int = 16,
) -> dict:
    if width % heads:
        raise ParameterError("width must be divisible by heads")
    return {
        "width": width,
        "heads": heads,
        "cond_dim": cond_dim,
        "latent_channels": latent_channels,
        "levels": levels,
        "blocks_per_level": blocks_per_level,
        "max_frames": max_frames,
    }


def layer_ids(arch: dict) -> list[str]:
    return [
        f"lvl{level}.blk{block}"
        for level in range(arch["levels"])
        for block in range(arch["blocks_per_level"])
    ]


def init_denoiser_params(store: ParamStore, rng: np.random.Generator, arch: dict) -> None:
    """Register all denoiser parameters; attention q/k/v/out get the
    projection tag (they are bias-free, so the tag covers exactly the
    projection matrices)."""
    w = arch["width"]
    ch = arch["latent_channels"]
    d_tau = arch["cond_dim"]

    def conv(name, cout, cin, gain=1.0):
        store.register(f"denoiser.{name}.w", init_conv(rng, cout, cin, 3) * gain)
        store.register(f"denoiser.{name}.b", np.zeros(cout))

    conv("conv_in", w, ch)
    store.register("denoiser.temb.w1", init_linear(rng, w, w))
    store.register("denoiser.temb.b1", np.zeros(w))
    store.register("denoiser.temb.w2", init_linear(rng, w, w))
    store.register("denoiser.temb.b2", np.zeros(w))
    for lid in layer_ids(arch):
        for kind in ATTENTION_KINDS:
            base = f"denoiser.{lid}.{kind}"
            store.register(f"{base}.ln.g", np.ones(w))
            store.register(f"{base}.ln.b", np.zeros(w))
            k_in = d_tau if kind == "cross" else w
            store.register(f"{base}.q", init_linear(rng, w, w), projection=True)
            store.register(f"{base}.k", init_linear(rng, k_in, w), projection=True)
            store.register(f"{base}.v", init_linear(rng, k_in, w), projection=True)
            store.register(f"{base}.o", init_linear(rng, w, w) * 0.5, projection=True)
        store.register(f"denoiser.{lid}.mlp.ln.g", np.ones(w))
        store.register(f"denoiser.{lid}.mlp.ln.b", np.zeros(w))
        conv(f"{lid}.mlp.conv1", w, w)
        conv(f"{lid}.mlp.conv2", w, w, gain=0.5)
    conv("down", w, w)
    conv("up", w, w)
    store.register("denoiser.out.ln.g", np.ones(w))
    store.register("denoiser.out.ln.b", np.zeros(w))
    conv("conv_out", ch, w)
    store.meta["arch"] = dict(arch)


_POS_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def _pos_grid(height: int, width: int, dim: int) -> np.ndarray:
    key = (height, width, dim)
    if key not in _POS_CACHE:
        _POS_CACHE[key] = 0.1 * positional_grid(height, width, dim)[None]
    return _POS_CACHE[key]


def _to_tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.data.shape
    return ad.reshape(ad.transpose(x, (0, 2, 3, 1)), (n, h * w, c))


def _from_tokens(x: Tensor, h: int, w: int) -> Tensor:
    n, hw, c = x.data.shape
    return ad.transpose(ad.reshape(x, (n, h, w, c)), (0, 3, 1, 2))


class _HookDispatch:
    """Applies read/write hooks to a freshly computed batched map tensor."""

    def __init__(self, hooks: HookSet | None, timestep: int, collect: bool,
                 records: list[AttentionRecord]):
        self.hooks = hooks
        self.timestep = timestep
        self.collect = collect
        self.records = records

    def _wants_read(self, kind: str) -> bool:
        if self.collect:
            return True
        hooks = self.hooks
        if hooks is None or hooks.read_hook is None:
            return False
        return hooks.read_kinds is None or kind in hooks.read_kinds

    def __call__(self, maps: Tensor, layer: str, kind: str, frame_of_batch) -> Tensor:
        """maps: (B, heads, Nq, Nk); frame_of_batch maps batch index -> frame."""
        hooks = self.hooks
        want_read = self._wants_read(kind)
        if not want_read and (hooks is None or hooks.write_hook is None):
            return maps
        data = maps.data
        replaced = None
        for b in range(data.shape[0]):
            frame = frame_of_batch(b)
            if want_read:
                rec = AttentionRecord(
                    map=data[b].copy(), layer_id=layer, frame_index=frame,
                    timestep=self.timestep, kind=kind,
                )
                if self.collect:
                    self.records.append(rec)
                if hooks is not None and hooks.read_hook is not None:
                    hooks.read_hook(rec)
            if hooks is not None and hooks.write_hook is not None:
                key = MapKey(self.timestep, layer, frame, kind)
                new_map = hooks.write_hook(key, data[b])
                if new_map is not None:
                    new_map = np.asarray(new_map, dtype=data.dtype)
                    if new_map.shape != data[b].shape:
                        raise HookError(
                            f"replacement shape {new_map.shape} != {data[b].shape} at {key}"
                        )
                    check = AttentionRecord(new_map, layer, frame, self.timestep, kind)
                    try:
                        check.validate()
                    except ShapeError as exc:
                        raise HookError(f"invalid replacement at {key}: {exc}") from exc
                    if replaced is None:
                        replaced = data.copy()
                    replaced[b] = new_map
        if replaced is not None:
            return Tensor(replaced)
        return maps


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, c = x.data.shape
    return ad.transpose(ad.reshape(x, (b, n, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.data.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _attention(
    q_in: Tensor,
    kv_in: Tensor,
    p: dict[str, Tensor],
    base: str,
    heads: int,
    dispatch: _HookDispatch,
    layer: str,
    kind: str,
    frame_of_batch,
) -> Tensor:
    """Multi-head attention; returns (B, Nq, width)."""
    q = _split_heads(ad.matmul(q_in, p[f"{base}.q"]), heads)
    k = _split_heads(ad.matmul(kv_in, p[f"{base}.k"]), heads)
    v = _split_heads(ad.matmul(kv_in, p[f"{base}.v"]), heads)
    dh = q.data.shape[-1]
    logits = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    maps = ad.softmax(logits, axis=-1)
    maps = dispatch(maps, layer, kind, frame_of_batch)
    out = _merge_heads(ad.matmul(maps, v))
    return ad.matmul(out, p[f"{base}.o"])


def _frame_attention(
    tokens: Tensor, p: dict[str, Tensor], base: str, heads: int,
    dispatch: _HookDispatch, layer: str,
) -> Tensor:
    """Attention across the frame axis per spatial location."""
    n, num_pos, c = tokens.data.shape
    frame_pos = sinusoidal_embedding(np.arange(n), c) * 0.1
    h = ad.add(tokens, Tensor(frame_pos[:, None, :].astype(tokens.data.dtype)))
    h = ad.transpose(h, (1, 0, 2))  # (N, n, c)
    q = _split_heads(ad.matmul(h, p[f"{base}.q"]), heads)
    k = _split_heads(ad.matmul(h, p[f"{base}.k"]), heads)
    v = _split_heads(ad.matmul(h, p[f"{base}.v"]), heads)
    dh = q.data.shape[-1]
    logits = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    maps = ad.softmax(logits, axis=-1)  # (N, heads, n, n)
    if dispatch.collect or dispatch.hooks is not None:
        maps = _dispatch_frame_maps(maps, dispatch, layer, n)
    out = _merge_heads(ad.matmul(maps, v))  # (N, n, c)
    out = ad.transpose(out, (1, 0, 2))
    return ad.matmul(out, p[f"{base}.o"])


def _dispatch_frame_maps(maps: Tensor, dispatch: _HookDispatch, layer: str, n_frames: int) -> Tensor:
    """Frame-kind records: for query frame f, map (heads, positions, n_frames)."""
    hooks = dispatch.hooks
    data = maps.data  # (N, heads, n, n)
    want_read = dispatch._wants_read("frame")
    replaced = None
    for f in range(n_frames):
        view = data[:, :, f, :].transpose(1, 0, 2)  # (heads, N, n)
        if want_read:
            rec = AttentionRecord(view.copy(), layer, f, dispatch.timestep, "frame")
            if dispatch.collect:
                dispatch.records.append(rec)
            if hooks is not None and hooks.read_hook is not None:
                hooks.read_hook(rec)
        if hooks is not None and hooks.write_hook is not None:
            key = MapKey(dispatch.timestep, layer, f, "frame")
            new_map = hooks.write_hook(key, view)
            if new_map is not None:
                new_map = np.asarray(new_map, dtype=data.dtype)
                if new_map.shape != view.shape:
                    raise HookError(f"replacement shape {new_map.shape} != {view.shape} at {key}")
                check = AttentionRecord(new_map, layer, f, dispatch.timestep, "frame")
                try:
                    check.validate()
                except ShapeError as exc:
                    raise HookError(f"invalid replacement at {key}: {exc}") from exc
                if replaced is None:
                    replaced = data.copy()
                replaced[:, :, f, :] = new_map.transpose(1, 0, 2)
    if replaced is not None:
        return Tensor(replaced)
    return maps


def _block(
    x: Tensor, cond: Tensor, p: dict[str, Tensor], lid: str, arch: dict,
    dispatch: _HookDispatch,
) -> Tensor:
    heads = arch["heads"]
    n, c, hh, ww = x.data.shape
    tokens = _to_tokens(x)

    def ln(base, t):
        return ad.layer_norm(t, p[f"{base}.ln.g"], p[f"{base}.ln.b"])

    base = f"denoiser.{lid}"
    h_self = ln(f"{base}.self", tokens)
    sa = _attention(
        h_self, h_self, p, f"{base}.self", heads, dispatch, lid, "self", lambda b: b,
    )
    tokens = ad.add(tokens, sa)
    cond_b = ad.reshape(cond, (1,) + cond.data.shape)
    ca = _attention(
        ln(f"{base}.cross", tokens), cond_b, p, f"{base}.cross",
        heads, dispatch, lid, "cross", lambda b: b,
    )
    tokens = ad.add(tokens, ca)
    fa = _frame_attention(ln(f"{base}.frame", tokens), p, f"{base}.frame",
                          heads, dispatch, lid)
    tokens = ad.add(tokens, fa)
    x = _from_tokens(tokens, hh, ww)
    h_mlp = _from_tokens(
        ad.layer_norm(_to_tokens(x), p[f"{base}.mlp.ln.g"], p[f"{base}.mlp.ln.b"]), hh, ww
    )
    h_mlp = ad.conv2d(h_mlp, p[f"{base}.mlp.conv1.w"], p[f"{base}.mlp.conv1.b"])
    h_mlp = ad.conv2d(ad.silu(h_mlp), p[f"{base}.mlp.conv2.w"], p[f"{base}.mlp.conv2.b"])
    return ad.add(x, h_mlp)


def forward_graph(
    p: dict[str, Tensor],
    latents: Tensor,
    t: int,
    cond: Tensor,
    arch: dict,
    hooks: HookSet | None = None,
    collect_records: bool = False,
) -> tuple[Tensor, list[AttentionRecord]]:
    """Full noise-prediction graph; returns (eps_hat, attention records)."""
    records: list[AttentionRecord] = []
    dispatch = _HookDispatch(hooks, t, collect_records, records)
    w = arch["width"]
    n, c, hh, ww = latents.data.shape

    temb_in = Tensor(sinusoidal_embedding(float(t), w).astype(COMPUTE_DTYPE))
    temb = ad.linear(ad.reshape(temb_in, (1, w)), p["denoiser.temb.w1"], p["denoiser.temb.b1"])
    temb = ad.linear(ad.silu(temb), p["denoiser.temb.w2"], p["denoiser.temb.b2"])
    temb = ad.reshape(temb, (1, w, 1, 1))

    x = ad.conv2d(latents, p["denoiser.conv_in.w"], p["denoiser.conv_in.b"])
    x = ad.add(ad.add(x, temb), Tensor(_pos_grid(hh, ww, w).astype(COMPUTE_DTYPE)))
    for block in range(arch["blocks_per_level"]):
        x = _block(x, cond, p, f"lvl0.blk{block}", arch, dispatch)
    skip = x
    x = ad.conv2d(x, p["denoiser.down.w"], p["denoiser.down.b"], stride=2)
    x = ad.add(ad.add(x, temb), Tensor(_pos_grid(hh // 2, ww // 2, w).astype(COMPUTE_DTYPE)))
    for block in range(arch["blocks_per_level"]):
        x = _block(x, cond, p, f"lvl1.blk{block}", arch, dispatch)
    x = ad.conv2d(ad.upsample_nearest(x, 2), p["denoiser.up.w"], p["denoiser.up.b"])
    x = ad.add(x, skip)
    x = _from_tokens(
        ad.layer_norm(_to_tokens(x), p["denoiser.out.ln.g"], p["denoiser.out.ln.b"]), hh, ww
    )
    eps = ad.conv2d(ad.silu(x), p["denoiser.conv_out.w"], p["denoiser.conv_out.b"])
    return eps, records


def _condition_vectors(condition: Condition | np.ndarray) -> np.ndarray:
    vec = condition.vectors if isinstance(condition, Condition) else np.asarray(condition)
    if vec.ndim != 2 or vec.shape[0] < 1:
        raise ParameterError("condition must be a non-empty (L, d) sequence")
    return vec.astype(COMPUTE_DTYPE)


def denoise(
    latents: LatentClip,
    t: int,
    condition: Condition | np.ndarray,
    params: DenoiserParams,
    hooks: HookSet | None = None,
    collect_records: bool = True,
) -> tuple[np.ndarray, list[AttentionRecord]]:
    """Predict noise for a latent clip at timestep t under a condition."""
    z = np.asarray(latents, dtype=COMPUTE_DTYPE)
    if not np.all(np.isfinite(z)):
        raise NumericError("latents contain non-finite values")
    vec = _condition_vectors(condition)
    arch = params.meta["arch"]
    tensors = params.tensors(prefix="denoiser.")
    eps, records = forward_graph(
        tensors, Tensor(z), t, Tensor(vec), arch, hooks=hooks, collect_records=collect_records
    )
    return eps.data, records


def training_step(
    clip: LatentClip,
    condition: Condition | np.ndarray,
    schedule: NoiseSchedule,
    params: DenoiserParams,
    rng_seed: int,
) -> tuple[float, dict[str, np.ndarray]]:
    """One denoising-objective evaluation with gradients over all
    denoiser parameters: sample t and Gaussian noise from the seed, noise the
    clip, and score mean squared error between added and predicted noise."""
    rng = np.random.default_rng(rng_seed)
    t = int(rng.integers(1, schedule.total_steps + 1))
    z0 = np.asarray(clip, dtype=COMPUTE_DTYPE)
    eps = rng.standard_normal(z0.shape)
    z_t = add_noise(z0, eps, t, schedule)
    vec = _condition_vectors(condition)
    arch = params.meta["arch"]
    tensors = params.tensors(requires_grad=True, prefix="denoiser.")
    eps_hat, _ = forward_graph(tensors, Tensor(z_t), t, Tensor(vec), arch)
    diff = ad.add(eps_hat, Tensor(-eps))
    loss = ad.tmean(ad.mul(diff, diff))
    loss.backward()
    grads = {name: tensor.grad for name, tensor in tensors.items() if tensor.grad is not None}
    return float(loss.data), grads


def finetune_on_source(
    params: DenoiserParams,
    clip: LatentClip,
    source_condition: Condition | np.ndarray,
    steps: int,
    lr: float,
    schedule: NoiseSchedule,
    seed: int = 0,
    loss_history: list[float] | None = None,
) -> DenoiserParams:
    """Adapt only attention projection matrices to one source clip.

    Returns a new parameter store; every non-projection array is
    bit-identical to the input. steps = 0 is a no-op copy.
    """
    if steps < 0:
        raise ParameterError("steps must be >= 0")
    tuned = params.copy()
    if steps == 0:
        return tuned
    names = [n for n in tuned.projection_names() if n.startswith("denoiser.")]
    opt = Adam(tuned, names, lr=lr)
    for i in range(steps):
        step_seed = int(np.random.SeedSequence((seed, i)).generate_state(1)[0])
        loss, grads = training_step(clip, source_condition, schedule, tuned, step_seed)
        opt.step({n: grads[n] for n in names if n in grads})
        if loss_history is not None:
            loss_history.append(loss)
    return tuned


def reconstruction_loss(
    clip: LatentClip,
    condition: Condition | np.ndarray,
    schedule: NoiseSchedule,
    params: DenoiserParams,
    probe_seeds: tuple[int, ...] = (11, 23, 37, 53),
) -> float:
    """Deterministic denoising-loss probe averaged over fixed (t, eps) draws."""
    total = 0.0
    vec = _condition_vectors(condition)
    arch = params.meta["arch"]
    tensors = params.tensors(prefix="denoiser.")
    z0 = np.asarray(clip, dtype=COMPUTE_DTYPE)
    for s in probe_seeds:
        rng = np.random.default_rng(s)
        t = int(rng.integers(1, schedule.total_steps + 1))
        eps = rng.standard_normal(z0.shape)
        z_t = add_noise(z0, eps, t, schedule)
        eps_hat, _ = forward_graph(tensors, Tensor(z_t), t, Tensor(vec), arch)
        total += float(np.mean((eps_hat.data - eps) ** 2))
    return total / len(probe_seeds)
