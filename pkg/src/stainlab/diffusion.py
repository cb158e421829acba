"""DDPM core: noise schedule, forward/reverse steps, sampler, attention, loss.

Timesteps are 1-based: ``t`` in ``1..T``, with ``alpha_bar(0) == 1``. Functions
accept numpy arrays or torch tensors; ``t`` may be an int or a per-sample
integer array/tensor (broadcast over the trailing dims).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from stainlab.errors import ArgumentError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray
    kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=np.float64)
        if b.ndim != 1 or b.size < 1 or np.any(b <= 0) or np.any(b >= 1):
            raise ArgumentError("beta must be a non-empty vector in (0, 1)")
        b.setflags(write=False)
        object.__setattr__(self, "beta", b)
        ab = np.cumprod(1.0 - b)
        ab.setflags(write=False)
        object.__setattr__(self, "_alpha_bar", ab)

    @property
    def T(self) -> int:
        return self.beta.size

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return self._alpha_bar

    def beta_at(self, t):
        return _lookup(np.concatenate([[0.0], self.beta]), t)

    def alpha_bar_at(self, t):
        return _lookup(np.concatenate([[1.0], self._alpha_bar]), t)

    def to_dict(self) -> dict:
        return {"T": self.T, "kind": self.kind, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return make_schedule(d["T"], d.get("kind", "linear"), d.get("beta_start", 1e-4), d.get("beta_end", 0.02))


def _lookup(table: np.ndarray, t):
    if isinstance(t, torch.Tensor):
        return torch.as_tensor(table)[t.long()]
    if np.ndim(t) == 0:
        return float(table[int(t)])
    return table[np.asarray(t, dtype=np.int64)]


def make_schedule(T: int, kind: str = "linear", beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ArgumentError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ArgumentError("need 0 < beta_start <= beta_end < 1")
    if kind != "linear":
        raise ArgumentError(f"unknown schedule kind {kind!r}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(beta, kind, beta_start, beta_end)


def _coef(value, like):
    """Shape a scalar or per-sample coefficient to broadcast against ``like``."""
    if isinstance(value, float):
        return value
    if isinstance(like, torch.Tensor):
        v = torch.as_tensor(value, dtype=like.dtype, device=like.device)
    else:
        v = np.asarray(value, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (like.ndim - v.ndim))


def _sqrt(x):
    if isinstance(x, float):
        return math.sqrt(x)
    return x.sqrt() if isinstance(x, torch.Tensor) else np.sqrt(x)


def _check_t(t, T, lo=1):
    tt = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if np.any(tt < lo) or np.any(tt > T):
        raise ArgumentError(f"timestep out of range [{lo}, {T}]")


def forward_step(z_prev, t, noise, schedule: NoiseSchedule):
    """z_t = sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) noise."""
    _check_t(t, schedule.T)
    b = _coef(schedule.beta_at(t), z_prev)
    return _sqrt(1.0 - b) * z_prev + _sqrt(b) * noise


def forward_marginal(z0, t, noise, schedule: NoiseSchedule):
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) noise."""
    _check_t(t, schedule.T, lo=0)
    ab = _coef(schedule.alpha_bar_at(t), z0)
    return _sqrt(ab) * z0 + _sqrt(1.0 - ab) * noise


def reverse_step(z_t, t, eps_hat, schedule: NoiseSchedule, noise=None, t_prev: int | None = None):
    """One ancestral step from ``t`` to ``t_prev`` (default ``t - 1``).

    Uses the effective alpha = abar_t / abar_{t_prev} over the (possibly
    skipped) span and fixed variance sigma^2 = 1 - alpha. No noise is added
    when landing on t_prev = 0.
    """
    if not isinstance(t, (int, np.integer)):
        raise ArgumentError("reverse_step takes a scalar timestep")
    if t < 1 or t > schedule.T:
        raise ArgumentError(f"timestep {t} out of range [1, {schedule.T}]")
    t_prev = t - 1 if t_prev is None else int(t_prev)
    if not 0 <= t_prev < t:
        raise ArgumentError(f"t_prev={t_prev} must be in [0, {t})")
    ab_t = schedule.alpha_bar_at(t)
    alpha = ab_t / schedule.alpha_bar_at(t_prev)
    beta = 1.0 - alpha
    mean = (z_t - (beta / math.sqrt(1.0 - ab_t)) * eps_hat) / math.sqrt(alpha)
    if t_prev == 0 or noise is None:
        return mean
    return mean + math.sqrt(beta) * noise


def subsample_timesteps(T: int, n_steps: int) -> list[int]:
    """``n_steps`` strictly decreasing timesteps from T down to 1.

    Uniform grid floor(1 + (T - 1) k / (n - 1)); n = 1 gives [T].
    """
    if n_steps < 1 or n_steps > T:
        raise ArgumentError(f"n_steps must be in [1, {T}], got {n_steps}")
    if n_steps == 1:
        return [T]
    grid = [int(math.floor(1 + (T - 1) * k / (n_steps - 1))) for k in range(n_steps)]
    grid[0], grid[-1] = 1, T
    return grid[::-1]


Denoiser = Callable[[torch.Tensor, int, object], torch.Tensor]


@torch.no_grad()
def sample(denoiser: Denoiser, schedule: NoiseSchedule, n_steps: int, conditioning=None, seed: int | Sequence[int] = 0,
           shape: tuple[int, ...] = (1,), dtype=torch.float32, init_noise: torch.Tensor | None = None) -> torch.Tensor:
    """Ancestral sampling over the subsampled grid; returns z_0.

    ``denoiser(z_t, t, conditioning)`` predicts the noise. All randomness
    comes from a generator seeded with ``seed``. A sequence of seeds gives
    each batch row its own generator, so a row's noise does not depend on
    what else shares the batch.
    """
    grid = subsample_timesteps(schedule.T, n_steps)
    if isinstance(seed, (int, np.integer)):
        gens = None
        gen = torch.Generator().manual_seed(int(seed))

        def draw(shp):
            return torch.randn(shp, generator=gen, dtype=dtype)
    else:
        gens = [torch.Generator().manual_seed(int(s)) for s in seed]
        if len(gens) != shape[0]:
            raise ArgumentError(f"{len(gens)} seeds for a batch of {shape[0]}")

        def draw(shp):
            return torch.cat([torch.randn((1, *shp[1:]), generator=g, dtype=dtype) for g in gens])
    z = draw(shape) if init_noise is None else init_noise.to(dtype)
    for i, t in enumerate(grid):
        t_prev = grid[i + 1] if i + 1 < len(grid) else 0
        eps = denoiser(z, t, conditioning)
        noise = draw(z.shape) if t_prev > 0 else None
        z = reverse_step(z, t, eps, schedule, noise, t_prev=t_prev)
    return z


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    """Projections for one cross-attention site; rows of inputs are tokens."""

    W_Q: np.ndarray  # d_query x d
    W_K: np.ndarray  # d_context x d
    W_V: np.ndarray  # d_context x d_v

    @property
    def d(self) -> int:
        return self.W_Q.shape[1]


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def cross_attention(query_feats: np.ndarray, context_feats: np.ndarray, weights: AttentionWeights,
                    return_weights: bool = False):
    """softmax(Q K^T / sqrt(d)) V with Q from the query tokens, K and V from context."""
    q = np.asarray(query_feats, dtype=np.float64) @ weights.W_Q
    k = np.asarray(context_feats, dtype=np.float64) @ weights.W_K
    v = np.asarray(context_feats, dtype=np.float64) @ weights.W_V
    attn = softmax(q @ k.T / math.sqrt(weights.d), axis=-1)
    out = attn @ v
    return (out, attn) if return_weights else out


def diffusion_loss(eps, eps_hat):
    """Mean squared error over all elements."""
    if isinstance(eps, torch.Tensor):
        return torch.mean((eps - eps_hat) ** 2)
    return float(np.mean((np.asarray(eps) - np.asarray(eps_hat)) ** 2))
