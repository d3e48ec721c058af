"""Stage-2 heads: per-frame accident probability and per-object involvement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigurationError
from .fusion import masked_softmax

INVOLVEMENT_THRESHOLD = 0.5


class CausalConvDeconv(nn.Module):
    """Left-padded conv followed by a transposed conv cropped to the first T outputs.

    Both stages only look backwards in time, so output t depends on inputs <= t.
    """

    def __init__(self, channels: int, kernel: int):
        super().__init__()
        self.kernel = kernel
        self.conv = nn.Conv1d(channels, channels, kernel)
        self.deconv = nn.ConvTranspose1d(channels, channels, kernel)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # x: (B, C, T)
        T = x.shape[-1]
        h = torch.relu(self.conv(F.pad(x, (self.kernel - 1, 0))))
        return self.deconv(h)[..., :T]


class AnticipationHead(nn.Module):
    def __init__(self, d_c: int, hidden: int = 64, branch_kernels=(3, 5, 7)):
        super().__init__()
        if len(branch_kernels) == 0 or min(branch_kernels) < 1:
            raise ConfigurationError("branch_kernels must be positive widths")
        self.branch_kernels = tuple(branch_kernels)
        self.gru = nn.GRU(d_c, hidden, batch_first=True)
        self.mlp = nn.Sequential(nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, hidden))
        self.branches = nn.ModuleList(CausalConvDeconv(hidden, k) for k in self.branch_kernels)
        self.score_head = nn.Linear(hidden, 1)
        self.clip_head = nn.Linear(hidden, 1)

    def forward(self, o_c: torch.Tensor):
        """Return per-frame scores ``(B, T)`` and clip probabilities ``(B,)``."""
        unbatched = o_c.dim() == 2
        if unbatched:
            o_c = o_c.unsqueeze(0)
        T = o_c.shape[1]
        if T < max(self.branch_kernels):
            raise ConfigurationError(f"T={T} shorter than the widest branch kernel {max(self.branch_kernels)}")
        seq, last = self.gru(o_c)
        z = self.mlp(seq).transpose(1, 2)
        merged = sum(branch(z) for branch in self.branches)
        s = torch.sigmoid(self.score_head(torch.relu(merged).transpose(1, 2)))[..., 0]
        l_a = torch.sigmoid(self.clip_head(last[-1]))[..., 0]
        return (s[0], l_a[0]) if unbatched else (s, l_a)


def _stream_mlp(d_in: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, hidden), nn.ReLU(), nn.Linear(hidden, hidden))


class LocalizationHead(nn.Module):
    """Attention from each frame to its objects, then a per-object GRU over time.

    The per-object GRU input is the attention-weighted frame value together with
    the object's own key. Objects that never appear are skipped: occupied slots
    are gathered into one packed batch, run through the GRU together and
    scattered back.
    """

    def __init__(self, d_v: int, d_r: int, d_c: int, d_k: int = 32, hidden: int = 64, k: int = 3):
        super().__init__()
        if d_k < 1:
            raise ConfigurationError("d_k must be positive")
        self.d_k, self.k = d_k, k
        self.mlp_q = _stream_mlp(d_v, hidden)
        self.mlp_k = _stream_mlp(d_r, hidden)
        self.mlp_v = _stream_mlp(d_c, hidden)
        self.wq = nn.Linear(hidden, d_k, bias=False)
        self.wk = nn.Linear(hidden, d_k, bias=False)
        self.wv = nn.Linear(hidden, d_k, bias=False)
        self.hidden = hidden
        self.refiner = nn.GRU(2 * d_k, hidden, batch_first=True)
        self.object_head = nn.Linear(hidden, 1)

    def project(self, o_v, o_b, o_c, mask):
        q = F.normalize(self.wq(self.mlp_q(o_v)), dim=-1)
        k = F.normalize(self.wk(self.mlp_k(o_b)), dim=-1) * mask[..., None]
        v = F.normalize(self.wv(self.mlp_v(o_c)), dim=-1)
        return q, k, v

    def forward(self, o_v, o_b, o_c, mask):
        """Return object scores ``(B, T, N)`` and attention weights ``(B, T, N)``."""
        q, k, v = self.project(o_v, o_b, o_c, mask)
        logits = (q[..., None, :] * k).sum(-1) / math.sqrt(self.d_k)
        attn = masked_softmax(logits, mask, dim=-1)
        per_obj = torch.cat([attn[..., None] * v[..., None, :], k], dim=-1)  # (B, T, N, 2 d_k)
        B, T, N, D = per_obj.shape
        seqs = per_obj.permute(0, 2, 1, 3).reshape(B * N, T, D)
        present = mask.permute(0, 2, 1).reshape(B * N, T).any(dim=1)
        idx = present.nonzero(as_tuple=True)[0]
        refined = seqs.new_zeros(B * N, T, self.hidden)
        if idx.numel():
            out, _ = self.refiner(seqs.index_select(0, idx))
            refined = refined.index_copy(0, idx, out)
        refined = refined.reshape(B, N, T, self.hidden).permute(0, 2, 1, 3)
        scores = torch.sigmoid(self.object_head(refined))[..., 0]
        return scores, attn


def topk_objects(scores: np.ndarray, mask: np.ndarray, k: int) -> list[list[int]]:
    """Per frame, up to k occupied slot indices by descending score, lower index first on ties."""
    out = []
    for row, m in zip(scores, mask):
        occupied = [i for i in range(len(row)) if m[i]]
        occupied.sort(key=lambda i: (-row[i], i))
        out.append(occupied[:k])
    return out


@dataclass
class ScoreTrace:
    s: np.ndarray
    l_a: float

    def t_theta(self, s_theta: float, tau: int) -> Optional[int]:
        """First frame (1-indexed) from which s_t >= s_theta holds through tau."""
        from .metrics import crossing_frame

        return crossing_frame(self.s, s_theta, tau)


@dataclass
class LocalizationTrace:
    obj_scores: np.ndarray  # (T, N)
    object_mask: np.ndarray  # (T, N)
    k: int = 3
    involved: np.ndarray = field(init=False)
    topk: list = field(init=False)

    def __post_init__(self):
        self.obj_scores = np.asarray(self.obj_scores, dtype=np.float64)
        self.object_mask = np.asarray(self.object_mask, dtype=bool)
        self.involved = (self.obj_scores > INVOLVEMENT_THRESHOLD) & self.object_mask
        self.topk = topk_objects(self.obj_scores, self.object_mask, self.k)
