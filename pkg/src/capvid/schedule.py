"""Forward-noising coefficients and deterministic DDIM stepping/inversion.

A clip of latents is a plain ``np.ndarray`` of shape ``(n_frames, channels,
height, width)``; all operations here apply per frame and are pure functions
of their inputs. Timesteps are 1-based indices into the discrete forward
process; ``t = 0`` denotes clean data with ``alpha_bar = 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

# Latent clips are arrays of shape (n_frames, channels, height, width).
LatentClip = np.ndarray


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-process coefficients plus the DDIM timestep ladder.

    ``alpha_bars[i]`` is the running product of ``1 - betas`` up to timestep
    ``i + 1``; ``ddim_timesteps`` is a strictly decreasing subsequence of
    ``[1, total_steps]`` used for sampling (and, reversed, for inversion).
    """

    total_steps: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    ddim_timesteps: np.ndarray

    def __post_init__(self):
        if self.total_steps < 1:
            raise ParameterError("total_steps must be >= 1")
        if self.betas.shape != (self.total_steps,):
            raise ShapeError("betas must have shape (total_steps,)")
        if self.alpha_bars.shape != (self.total_steps,):
            raise ShapeError("alpha_bars must have shape (total_steps,)")
        if np.any(self.alpha_bars <= 0.0) or np.any(self.alpha_bars >= 1.0):
            raise ParameterError("alpha_bars must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bars) >= 0.0):
            raise ParameterError("alpha_bars must be strictly decreasing")
        ts = self.ddim_timesteps
        if ts.size:
            if np.any(np.diff(ts) >= 0):
                raise ParameterError("ddim_timesteps must be strictly decreasing")
            if ts[-1] < 1 or ts[0] > self.total_steps:
                raise ParameterError("ddim_timesteps must lie in [1, total_steps]")

    @property
    def num_ddim_steps(self) -> int:
        return int(self.ddim_timesteps.size)

    def alpha_bar(self, t: int) -> float:
        """alpha_bar at integer timestep t, with the t=0 -> 1.0 convention."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.total_steps:
            raise ParameterError(f"timestep {t} outside [0, {self.total_steps}]")
        return float(self.alpha_bars[t - 1])

    def sampling_pairs(self) -> list[tuple[int, int]]:
        """(t, t_prev) pairs walking the ladder down to 0."""
        ladder = [int(t) for t in self.ddim_timesteps]
        return list(zip(ladder, ladder[1:] + [0]))

    def inversion_pairs(self) -> list[tuple[int, int]]:
        """(t_from, t_to) pairs walking 0 up the reversed ladder."""
        ladder = [int(t) for t in self.ddim_timesteps[::-1]]
        return list(zip([0] + ladder[:-1], ladder))

    def step_index(self, t: int) -> int:
        """Position of timestep t in the descending DDIM ladder."""
        hits = np.nonzero(self.ddim_timesteps == t)[0]
        if hits.size == 0:
            raise ParameterError(f"timestep {t} is not on the DDIM ladder")
        return int(hits[0])


@dataclass(frozen=True)
class SamplerConfig:
    """Deterministic DDIM sampler settings (eta is fixed at 0)."""

    seed: int = 0
    num_ddim_steps: int = 50
    eta: float = 0.0
    guidance_scale: float = 1.0

    def __post_init__(self):
        if self.num_ddim_steps < 1:
            raise ParameterError("num_ddim_steps must be >= 1")
        if self.eta != 0.0:
            raise ParameterError("only deterministic DDIM (eta = 0) is supported")
        if self.guidance_scale < 0.0:
            raise ParameterError("guidance_scale must be >= 0")


def build_schedule(
    total_steps: int,
    beta_start: float = 1e-4,
    beta_end: float = 2e-2,
    spacing: str = "linear",
    num_ddim_steps: int = 50,
) -> NoiseSchedule:
    """Construct the forward-process schedule and DDIM ladder.

    ``spacing`` is ``"linear"`` (betas linear in t) or ``"scaled"`` (linear in
    sqrt-beta, the Stable-Diffusion convention). The DDIM ladder is uniformly
    spaced over ``[1, total_steps]`` and includes both endpoints.
    """
    if total_steps < 2:
        raise ParameterError("total_steps must be >= 2")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ParameterError("need 0 < beta_start < beta_end < 1")
    if spacing == "linear":
        betas = np.linspace(beta_start, beta_end, total_steps, dtype=np.float64)
    elif spacing == "scaled":
        betas = (
            np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), total_steps, dtype=np.float64)
            ** 2
        )
    else:
        raise ParameterError(f"unknown spacing {spacing!r}")
    alpha_bars = np.cumprod(1.0 - betas)
    ladder = ddim_ladder(total_steps, num_ddim_steps)
    return NoiseSchedule(
        total_steps=total_steps, betas=betas, alpha_bars=alpha_bars, ddim_timesteps=ladder
    )


def ddim_ladder(total_steps: int, num_steps: int) -> np.ndarray:
    """Strictly decreasing integer ladder from total_steps down to 1."""
    if num_steps < 0 or num_steps > total_steps:
        raise ParameterError("need 0 <= num_steps <= total_steps")
    if num_steps == 0:
        return np.zeros(0, dtype=np.int64)
    if num_steps == 1:
        return np.array([total_steps], dtype=np.int64)
    ladder = np.rint(np.linspace(total_steps, 1, num_steps)).astype(np.int64)
    if np.any(np.diff(ladder) >= 0):  # only possible when num_steps ~ total_steps
        ladder = np.unique(ladder)[::-1]
    return ladder


def _check_clip(z: np.ndarray, name: str) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError(f"{name} contains non-finite values")
    return z


def add_noise(z0: LatentClip, eps: LatentClip, t: int, schedule: NoiseSchedule) -> LatentClip:
    """Forward-noise clean latents: sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps."""
    z0 = _check_clip(z0, "z0")
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 shape {z0.shape} != eps shape {eps.shape}")
    if not 1 <= t <= schedule.total_steps:
        raise ParameterError(f"timestep {t} outside [1, {schedule.total_steps}]")
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def ddim_step(
    z_t: LatentClip, eps_hat: LatentClip, t: int, t_prev: int, schedule: NoiseSchedule
) -> LatentClip:
    """One deterministic DDIM update from timestep t down to t_prev.

    Predicts the clean latent from ``eps_hat`` and re-noises it to ``t_prev``
    (``t_prev = 0`` returns the clean prediction itself).
    """
    if not t > t_prev >= 0:
        raise ParameterError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    z_t = _check_clip(z_t, "z_t")
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if z_t.shape != eps_hat.shape:
        raise ShapeError(f"z_t shape {z_t.shape} != eps_hat shape {eps_hat.shape}")
    ab_t = schedule.alpha_bar(t)
    ab_p = schedule.alpha_bar(t_prev)
    z0_hat = (z_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    return math.sqrt(ab_p) * z0_hat + math.sqrt(1.0 - ab_p) * eps_hat


def ddim_invert_step(
    z_t: LatentClip, eps_hat: LatentClip, t: int, t_next: int, schedule: NoiseSchedule
) -> LatentClip:
    """Algebraic inverse of ddim_step under a fixed noise prediction."""
    if not t_next > t >= 0:
        raise ParameterError(f"need t_next > t >= 0, got t={t}, t_next={t_next}")
    z_t = _check_clip(z_t, "z_t")
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if z_t.shape != eps_hat.shape:
        raise ShapeError(f"z_t shape {z_t.shape} != eps_hat shape {eps_hat.shape}")
    ab_t = schedule.alpha_bar(t)
    ab_n = schedule.alpha_bar(t_next)
    z0_hat = (z_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    return math.sqrt(ab_n) * z0_hat + math.sqrt(1.0 - ab_n) * eps_hat
