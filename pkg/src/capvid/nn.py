"""Parameter storage, initialization, optimizer, and encoding tables."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ParameterError

# Canonical storage dtype (matches the checkpoint container) and the dtype
# all forward/backward computation upcasts to.
STORAGE_DTYPE = np.float32
COMPUTE_DTYPE = np.float64


@dataclass
class ParamStore:
    """Named float32 parameter arrays with a per-array projection tag.

    The projection tag marks attention-block projection matrices, the only
    parameters touched by source-clip fine-tuning.
    """

    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    projection: dict[str, bool] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def register(self, name: str, value: np.ndarray, projection: bool = False) -> None:
        if name in self.arrays:
            raise ParameterError(f"duplicate parameter name: {name}")
        self.arrays[name] = np.ascontiguousarray(value, dtype=STORAGE_DTYPE)
        self.projection[name] = bool(projection)

    def tensors(self, requires_grad: bool = False, prefix: str = "") -> dict[str, Tensor]:
        """Float64 Tensor views of (a prefix subset of) the store."""
        return {
            name: Tensor(arr.astype(COMPUTE_DTYPE), requires_grad=requires_grad)
            for name, arr in self.arrays.items()
            if name.startswith(prefix)
        }

    def copy(self) -> "ParamStore":
        return ParamStore(
            arrays={k: v.copy() for k, v in self.arrays.items()},
            projection=dict(self.projection),
            meta=dict(self.meta),
        )

    def projection_names(self) -> list[str]:
        return [k for k, tagged in self.projection.items() if tagged]

    def names(self, prefix: str = "") -> list[str]:
        return [k for k in self.arrays if k.startswith(prefix)]


class Adam:
    """Plain Adam over a ParamStore; updates only the listed names."""

    def __init__(self, store: ParamStore, names: list[str], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if not names:
            raise ParameterError("Adam needs at least one parameter name")
        self.store = store
        self.names = list(names)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(store.arrays[n], dtype=COMPUTE_DTYPE) for n in names}
        self.v = {n: np.zeros_like(store.arrays[n], dtype=COMPUTE_DTYPE) for n in names}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for n in self.names:
            g = grads.get(n)
            if g is None:
                continue
            self.m[n] = self.b1 * self.m[n] + (1.0 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1.0 - self.b2) * g * g
            mhat = self.m[n] / b1t
            vhat = self.v[n] / b2t
            update = self.lr * mhat / (np.sqrt(vhat) + self.eps)
            self.store.arrays[n] = (
                self.store.arrays[n].astype(COMPUTE_DTYPE) - update
            ).astype(STORAGE_DTYPE)


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Glorot-uniform weight of shape (fan_in, fan_out)."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_conv(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (cin * k * k + cout * k * k))
    return rng.uniform(-bound, bound, size=(cout, cin, k, k))


def sinusoidal_embedding(position, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Standard sin/cos positional code; position scalar or 1-D array."""
    if dim % 2:
        raise ParameterError("embedding dim must be even")
    pos = np.atleast_1d(np.asarray(position, dtype=COMPUTE_DTYPE))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=COMPUTE_DTYPE) / half)
    angles = pos[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    return emb if np.ndim(position) else emb[0]


def positional_grid(height: int, width: int, dim: int) -> np.ndarray:
    """Fixed 2-D positional code of shape (dim, height, width)."""
    if dim % 2:
        raise ParameterError("grid embedding dim must be even")
    row = sinusoidal_embedding(np.arange(height), dim // 2)  # (H, dim/2)
    col = sinusoidal_embedding(np.arange(width), dim // 2)  # (W, dim/2)
    grid = np.concatenate(
        [
            np.repeat(row[:, None, :], width, axis=1),
            np.repeat(col[None, :, :], height, axis=0),
        ],
        axis=-1,
    )  # (H, W, dim)
    return grid.transpose(2, 0, 1)
