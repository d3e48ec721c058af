"""Full model: stage-1 fusion feeding the two stage-2 heads, plus batching."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .dataset import ClipPack
from .errors import ConfigurationError, ShapeError
from .fusion import NOISE_MODES, DualVisionAttention, DynamicObjectAttention, Fusion
from .heads import AnticipationHead, LocalizationHead, LocalizationTrace, ScoreTrace


@dataclass
class ModelConfig:
    d_v: int = 64
    d_o: int = 32
    d_r: int = 32
    d_c: int = 64
    hidden: int = 64
    down_factor: int = 2
    causal_vision: bool = True
    n_iter_train: int = 6
    n_iter_test: int = 6
    noise_mode: str = "markov"
    dropout: float = 0.1
    branch_kernels: list = field(default_factory=lambda: [3, 5, 7])
    k: int = 3
    d_k: int = 32

    def validate(self) -> None:
        for name in ("d_v", "d_o", "d_r", "d_c", "hidden", "down_factor", "d_k", "k"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"model.{name} must be >= 1")
        if self.n_iter_train < 0 or self.n_iter_test < 0:
            raise ConfigurationError("routing iteration counts must be >= 0")
        if self.noise_mode not in NOISE_MODES:
            raise ConfigurationError(f"noise_mode must be one of {NOISE_MODES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")
        if not self.branch_kernels or min(self.branch_kernels) < 1:
            raise ConfigurationError("branch_kernels must be positive")


@dataclass
class Batch:
    frame: torch.Tensor  # (B, T, D_v)
    objects: torch.Tensor  # (B, T, N, D_o)
    mask: torch.Tensor  # (B, T, N) bool
    involvement: torch.Tensor  # (B, T, N) bool
    labels: torch.Tensor  # (B,) 0/1
    taus: list  # accident frame or None per clip
    fps: list
    clip_ids: list
    has_involvement: bool = True

    def __len__(self):
        return self.frame.shape[0]


def collate(clips: Sequence[ClipPack], dtype=torch.float32) -> Batch:
    """Stack clips of equal length; object slots are zero-padded to the widest clip."""
    if not clips:
        raise ShapeError("empty batch")
    T = clips[0].num_frames
    if any(c.num_frames != T for c in clips):
        raise ShapeError("all clips in a batch need the same number of frames")
    N = max(c.num_slots for c in clips)
    B = len(clips)
    d_o = clips[0].object_features.shape[2]
    objects = np.zeros((B, T, N, d_o), dtype=np.float32)
    mask = np.zeros((B, T, N), dtype=bool)
    inv = np.zeros((B, T, N), dtype=bool)
    for b, c in enumerate(clips):
        n = c.num_slots
        objects[b, :, :n] = c.object_features
        mask[b, :, :n] = c.object_mask
        inv[b, :, :n] = c.involvement
    return Batch(
        frame=torch.as_tensor(np.stack([c.frame_features for c in clips])).to(dtype),
        objects=torch.as_tensor(objects).to(dtype),
        mask=torch.as_tensor(mask),
        involvement=torch.as_tensor(inv),
        labels=torch.as_tensor([1.0 if c.is_positive else 0.0 for c in clips], dtype=dtype),
        taus=[c.accident_frame for c in clips],
        fps=[c.fps for c in clips],
        clip_ids=[c.clip_id for c in clips],
    )


class AccidentModel(nn.Module):
    def __init__(self, cfg: Optional[ModelConfig] = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        cfg.validate()
        self.vision = DualVisionAttention(cfg.d_v, cfg.down_factor, causal=cfg.causal_vision)
        self.objects = DynamicObjectAttention(
            cfg.d_o, cfg.d_r, cfg.down_factor, cfg.n_iter_train, cfg.noise_mode, cfg.dropout
        )
        self.fusion = Fusion(cfg.d_v, cfg.d_r, cfg.d_c)
        self.anticipation = AnticipationHead(cfg.d_c, cfg.hidden, cfg.branch_kernels)
        self.localization = LocalizationHead(cfg.d_v, cfg.d_r, cfg.d_c, cfg.d_k, cfg.hidden, cfg.k)

    def stage_parameters(self, phase: int):
        """Parameters trained in ``phase`` (1: fusion + anticipation, 2: localization)."""
        if phase == 1:
            mods = (self.vision, self.objects, self.fusion, self.anticipation)
            return [p for m in mods for p in m.parameters()]
        if phase == 2:
            return list(self.localization.parameters())
        raise ConfigurationError(f"phase must be 1 or 2, got {phase}")

    def forward(self, frame, objects, mask, n_iter: Optional[int] = None, rng=None, localize: bool = True):
        if n_iter is None:
            n_iter = self.cfg.n_iter_train if self.training else self.cfg.n_iter_test
        o_v = self.vision(frame)
        o_b = self.objects(objects, mask, n_iter=n_iter, rng=rng)
        o_c = self.fusion(o_v, o_b, mask)
        s, l_a = self.anticipation(o_c)
        out = {"s": s, "l_a": l_a, "o_v": o_v, "o_b": o_b, "o_c": o_c}
        if localize:
            out["obj_scores"], out["attn"] = self.localization(o_v, o_b, o_c, mask)
        return out

    def run(self, batch: Batch, n_iter: Optional[int] = None, rng=None, localize: bool = True):
        return self(batch.frame, batch.objects, batch.mask, n_iter=n_iter, rng=rng, localize=localize)

    @torch.no_grad()
    def predict(self, clips: Sequence[ClipPack], n_iter: Optional[int] = None, batch_size: int = 32):
        """Inference traces for each clip: list of (ScoreTrace, LocalizationTrace)."""
        was_training = self.training
        self.eval()
        dtype = next(self.parameters()).dtype
        results = []
        try:
            for start in range(0, len(clips), batch_size):
                chunk = clips[start:start + batch_size]
                batch = collate(chunk, dtype=dtype)
                out = self.run(batch, n_iter=n_iter)
                for b, clip in enumerate(chunk):
                    n = clip.num_slots
                    score = ScoreTrace(out["s"][b].double().numpy(), float(out["l_a"][b]))
                    loc = LocalizationTrace(out["obj_scores"][b, :, :n].double().numpy(), clip.object_mask, self.cfg.k)
                    results.append((score, loc))
        finally:
            self.train(was_training)
        return results
