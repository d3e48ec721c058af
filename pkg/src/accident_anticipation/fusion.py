"""Stage-1 feature fusion.

Dual vision attention refines per-frame features, dynamic object attention
refines per-object features by iterative routing with diffuse noise, and a
three-layer perceptron fuses both into cross-modal features.

Tensors are batched: frame features ``(B, T, D_v)``, object features
``(B, T, N, D_o)``, object masks ``(B, T, N)``. Unbatched inputs are accepted
and returned unbatched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigurationError, NumericError, ShapeError

NOISE_MODES = ("none", "same", "different", "linear", "markov")
BETA_MIN, BETA_MAX = 1e-6, 0.999

NoiseSource = Union[torch.Generator, Callable[[torch.Size], torch.Tensor], None]


def squash(x: torch.Tensor, dim: int = -1, eps: float = 1e-12) -> torch.Tensor:
    """Capsule squash: rescale ``x`` to norm |x|^2 / (1 + |x|^2) along ``dim``."""
    sq = (x * x).sum(dim=dim, keepdim=True)
    return (sq / (1.0 + sq)) * x / torch.sqrt(sq + eps)


def masked_softmax(logits: torch.Tensor, mask: Optional[torch.Tensor], dim: int) -> torch.Tensor:
    """Softmax with masked entries forced to exactly 0; fully masked rows give all zeros."""
    if mask is None:
        return torch.softmax(logits, dim=dim)
    logits = logits.masked_fill(~mask, float("-inf"))
    any_valid = mask.any(dim=dim, keepdim=True)
    logits = torch.where(any_valid, logits, torch.zeros_like(logits))
    return torch.softmax(logits, dim=dim) * any_valid


def _check_finite(x: torch.Tensor, name: str) -> None:
    if not torch.isfinite(x).all():
        raise NumericError(f"{name} contains non-finite values")


class DualVisionAttention(nn.Module):
    """Position attention over frames plus projection-free channel attention.

    ``out = F_P + F_C`` with
    ``F_P = gamma * up(softmax(Q K^T) V) + O_V`` and
    ``F_C = beta * softmax(x x^T) x + O_V`` evaluated per frame over channels.
    Q, K, V are projected into a latent width ``d_v // down_factor``; with
    ``down_factor == 1`` there is no up-projection. With ``causal`` set, frame
    t only attends to frames <= t.
    """

    def __init__(self, d_v: int, down_factor: int = 2, causal: bool = True):
        super().__init__()
        if down_factor < 1 or d_v % down_factor:
            raise ConfigurationError(f"d_v={d_v} must be a positive multiple of down_factor={down_factor}")
        d_lat = d_v // down_factor
        self.d_v, self.down_factor, self.causal = d_v, down_factor, causal
        self.q_proj = nn.Linear(d_v, d_lat)
        self.k_proj = nn.Linear(d_v, d_lat)
        self.v_proj = nn.Linear(d_v, d_lat)
        self.up = nn.Linear(d_lat, d_v, bias=False) if down_factor > 1 else nn.Identity()
        self.gamma = nn.Parameter(torch.zeros(()))
        self.beta = nn.Parameter(torch.zeros(()))

    def attention_maps(self, o_v: torch.Tensor):
        """Position (B, T, T) and channel (B, T, D, D) attention weights."""
        q, k = self.q_proj(o_v), self.k_proj(o_v)
        logits = q @ k.transpose(-1, -2)
        mask = None
        if self.causal:
            T = o_v.shape[-2]
            mask = torch.ones(T, T, dtype=torch.bool, device=o_v.device).tril()
        pos = masked_softmax(logits, mask, dim=-1)
        chan = torch.softmax(o_v[..., :, None] * o_v[..., None, :], dim=-1)
        return pos, chan

    def forward(self, o_v: torch.Tensor) -> torch.Tensor:
        unbatched = o_v.dim() == 2
        if unbatched:
            o_v = o_v.unsqueeze(0)
        if o_v.shape[-1] != self.d_v:
            raise ShapeError(f"expected feature width {self.d_v}, got {o_v.shape[-1]}")
        _check_finite(o_v, "O_V")
        pos, chan = self.attention_maps(o_v)
        f_p = self.gamma * self.up(pos @ self.v_proj(o_v)) + o_v
        f_c = self.beta * (chan @ o_v[..., :, None])[..., 0] + o_v
        out = f_p + f_c
        return out[0] if unbatched else out


def noise_schedule(n_iter: int, mode: str = "markov") -> np.ndarray:
    """Per-iteration alphas: ``1 - clip(linspace(0.1/n, 20/n, n), 1e-6, 0.999)``.

    ``mode`` only picks the downstream noise law; it is validated here so a
    bad mode fails at configuration time.
    """
    if mode not in NOISE_MODES:
        raise ConfigurationError(f"unknown noise mode {mode!r}")
    if n_iter < 1:
        raise ConfigurationError("n_iter must be >= 1")
    return 1.0 - noise_betas(n_iter)


def noise_betas(n_iter: int) -> np.ndarray:
    if n_iter < 1:
        raise ConfigurationError("n_iter must be >= 1")
    raw = np.linspace(0.1 / n_iter, 20.0 / n_iter, n_iter)
    return np.clip(raw, BETA_MIN, BETA_MAX)


def alpha_bar(alphas) -> np.ndarray:
    return np.cumprod(np.asarray(alphas, dtype=np.float64))


def _draw(rng: NoiseSource, like: torch.Tensor) -> torch.Tensor:
    if callable(rng) and not isinstance(rng, torch.Generator):
        return torch.as_tensor(rng(like.shape), dtype=like.dtype, device=like.device)
    return torch.randn(like.shape, generator=rng, dtype=like.dtype, device=like.device)


def diffuse_noise_step(
    d_prev: torch.Tensor,
    alpha_n: float,
    rng: NoiseSource,
    mode: str = "markov",
    fixed_eps: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """One step of the iteration noise D^(n).

    ``rng`` is a ``torch.Generator`` or a callable ``shape -> tensor``. In
    ``same`` mode ``fixed_eps`` is returned when given (the caller draws it
    once per forward pass).
    """
    if mode not in NOISE_MODES:
        raise ConfigurationError(f"unknown noise mode {mode!r}")
    if not 0.0 < alpha_n < 1.0:
        raise NumericError(f"alpha must lie in (0, 1), got {alpha_n}")
    if mode == "none":
        return torch.zeros_like(d_prev)
    if mode == "same":
        return fixed_eps if fixed_eps is not None else _draw(rng, d_prev)
    eps = _draw(rng, d_prev)
    if mode == "different":
        return eps
    if mode == "linear":
        return alpha_n * d_prev + (1.0 - alpha_n) * eps
    return math.sqrt(alpha_n) * d_prev + math.sqrt(1.0 - alpha_n) * eps


@dataclass
class RoutingState:
    """Routing iteration state, kept for inspection after a forward pass."""

    w_b: torch.Tensor
    noise: torch.Tensor
    alphas: np.ndarray
    alpha_bar: np.ndarray
    n_iter: int
    dropout_rate: float


class DynamicObjectAttention(nn.Module):
    """Iterative routing over detected objects.

    ``F_B = down(W V_B)``; starting from ``W_B = 0`` each iteration computes
    ``S = softmax_N(W_B)``, ``H = S * dropout(F_B)``, ``W_B += S * squash(H) + D``.
    The result is up-projected back to ``d_r``. Noise is only injected in
    training mode.
    """

    def __init__(
        self,
        d_o: int,
        d_r: int,
        down_factor: int = 2,
        n_iter: int = 6,
        noise_mode: str = "markov",
        dropout: float = 0.1,
    ):
        super().__init__()
        if down_factor < 1 or d_r % down_factor:
            raise ConfigurationError(f"d_r={d_r} must be a positive multiple of down_factor={down_factor}")
        if noise_mode not in NOISE_MODES:
            raise ConfigurationError(f"unknown noise mode {noise_mode!r}")
        if not 0.0 <= dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")
        d_lat = d_r // down_factor
        self.d_o, self.d_r, self.d_lat = d_o, d_r, d_lat
        self.n_iter, self.noise_mode, self.dropout_rate = n_iter, noise_mode, dropout
        self.W = nn.Linear(d_o, d_r)
        if down_factor > 1:
            self.down = nn.Linear(d_r, d_lat, bias=False)
            self.up = nn.Linear(d_lat, d_r, bias=False)
        else:
            self.down, self.up = nn.Identity(), nn.Identity()
        self.dropout = nn.Dropout(dropout)
        self.last_state: Optional[RoutingState] = None

    def embed(self, v_b: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self.down(self.W(v_b)) * mask[..., None]

    def route(
        self,
        f_b: torch.Tensor,
        mask: torch.Tensor,
        n_iter: int,
        rng: NoiseSource = None,
        noise_mode: str = "none",
        w_b_init: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Run the routing loop on embedded features; returns the final W_B (latent width)."""
        w_b = torch.zeros_like(f_b) if w_b_init is None else w_b_init
        if w_b.shape != f_b.shape:
            raise ConfigurationError(f"W_B shape {tuple(w_b.shape)} != embedded shape {tuple(f_b.shape)}")
        noise = torch.zeros_like(f_b)
        alphas = noise_schedule(max(n_iter, 1), noise_mode)
        fixed_eps = None
        if noise_mode == "same" and n_iter > 0:
            fixed_eps = _draw(rng, f_b)
        mask_e = mask[..., None]
        for n in range(n_iter):
            s = masked_softmax(w_b, mask_e, dim=-2)
            h = s * self.dropout(f_b)
            noise = diffuse_noise_step(noise, float(alphas[n]), rng, noise_mode, fixed_eps) * mask_e
            w_b = w_b + s * squash(h, dim=-1) + noise
        self.last_state = RoutingState(
            w_b.detach(), noise.detach(), alphas[:n_iter], alpha_bar(alphas[:n_iter]), n_iter, self.dropout_rate
        )
        return w_b

    def forward(
        self,
        v_b: torch.Tensor,
        mask: Optional[torch.Tensor] = None,
        n_iter: Optional[int] = None,
        rng: NoiseSource = None,
        noise_mode: Optional[str] = None,
    ) -> torch.Tensor:
        unbatched = v_b.dim() == 3
        if unbatched:
            v_b = v_b.unsqueeze(0)
            mask = None if mask is None else mask.unsqueeze(0)
        if mask is None:
            mask = torch.ones(v_b.shape[:-1], dtype=torch.bool, device=v_b.device)
        _check_finite(v_b, "V_B")
        n_iter = self.n_iter if n_iter is None else n_iter
        mode = (noise_mode or self.noise_mode) if self.training else "none"
        w_b = self.route(self.embed(v_b, mask), mask, n_iter, rng, mode)
        out = self.up(w_b) * mask[..., None]
        return out[0] if unbatched else out


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over the object axis (-2) of ``x`` restricted to occupied slots."""
    m = mask[..., None].to(x.dtype)
    return (x * m).sum(dim=-2) / m.sum(dim=-2).clamp(min=1.0)


class Fusion(nn.Module):
    """Masked-mean-pool object features, concatenate with frame features, apply a 3-layer MLP."""

    def __init__(self, d_v: int, d_r: int, d_c: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(d_v + d_r, d_c), nn.ReLU(),
            nn.Linear(d_c, d_c), nn.ReLU(),
            nn.Linear(d_c, d_c),
        )

    def forward(self, o_v: torch.Tensor, o_b: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if mask is None:
            mask = torch.ones(o_b.shape[:-1], dtype=torch.bool, device=o_b.device)
        if o_v.shape[:-1] != o_b.shape[:-2]:
            raise ShapeError(f"frame axes disagree: {tuple(o_v.shape)} vs {tuple(o_b.shape)}")
        pooled = masked_mean(o_b, mask)
        return self.mlp(torch.cat([o_v, pooled], dim=-1))
