"""Losses, the two-phase training loop, checkpoints and finite-difference gradient checks."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .dataset import ClipPack, pack_arrays, split_container, unpack_array
from .errors import ConfigurationError
from .metrics import ClipEval, EvalBundle, aola, bundle_ap, fmt, mtta, threshold_grid
from .model import AccidentModel, Batch, ModelConfig, collate

log = logging.getLogger(__name__)

LOG_EPS = 1e-12
CHECKPOINT_MAGIC = b"CLIPCKPT1\n"
HISTORY_COLUMNS = ("epoch", "L_S", "L_A", "L_M", "val_AP", "val_mTTA", "lr")


@dataclass
class LossConfig:
    lam: float = 20.0
    eta: float = 10.0
    phase: int = 1

    def validate(self) -> None:
        if self.lam <= 0:
            raise ConfigurationError("lambda must be > 0")
        if self.eta < 0:
            raise ConfigurationError("eta must be >= 0")
        if self.phase not in (1, 2):
            raise ConfigurationError("phase must be 1 or 2")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 10
    min_epochs: int = 10
    plateau_patience: int = 3
    plateau_factor: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.min_epochs < 1 or self.epochs < self.min_epochs:
            raise ConfigurationError("need 1 <= min_epochs <= epochs")
        if self.plateau_patience < 1 or not 0 < self.plateau_factor < 1:
            raise ConfigurationError("plateau needs patience >= 1 and factor in (0, 1)")


# -- losses -------------------------------------------------------------------


def frame_weights(taus: Sequence[Optional[int]], T: int, lam: float, dtype=torch.float64) -> torch.Tensor:
    """exp(-max((tau - t) / lam, 0)) per clip and frame; 1 for clips without tau."""
    t = torch.arange(1, T + 1, dtype=dtype)
    rows = []
    for tau in taus:
        if tau is None:
            rows.append(torch.ones(T, dtype=dtype))
        else:
            rows.append(torch.exp(-torch.clamp((tau - t) / lam, min=0.0)))
    return torch.stack(rows)


def score_loss(s: torch.Tensor, labels: torch.Tensor, taus: Sequence[Optional[int]], cfg: LossConfig) -> torch.Tensor:
    """Time-weighted per-frame cross-entropy, averaged over frames and clips."""
    B, T = s.shape
    pos = labels.to(torch.bool)
    for b in range(B):
        if pos[b] and taus[b] is None:
            raise ConfigurationError("positive clip without an accident frame")
    w = frame_weights([tau if pos[b] else None for b, tau in enumerate(taus)], T, cfg.lam, s.dtype)
    nll = torch.where(
        pos[:, None],
        -torch.log(torch.clamp(s, min=LOG_EPS)),
        -torch.log(torch.clamp(1.0 - s, min=LOG_EPS)),
    )
    return (w * nll).mean()


def bce(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return -(y * torch.log(torch.clamp(p, min=LOG_EPS)) + (1 - y) * torch.log(torch.clamp(1 - p, min=LOG_EPS)))


def anticipation_loss(l_a: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return bce(l_a, labels.to(l_a.dtype)).mean()


def localization_loss(obj_scores: torch.Tensor, involvement: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Cross-entropy averaged over occupied slots per frame, then frames, then clips.

    Frames and clips without occupied slots are left out of the averages.
    """
    m = mask.to(obj_scores.dtype)
    per_slot = bce(obj_scores, involvement.to(obj_scores.dtype)) * m
    n_slots = m.sum(-1)
    frame_has = (n_slots > 0).to(obj_scores.dtype)
    per_frame = per_slot.sum(-1) / n_slots.clamp(min=1.0)
    n_frames = frame_has.sum(-1)
    per_clip = per_frame.sum(-1) / n_frames.clamp(min=1.0)
    clip_has = (n_frames > 0).to(obj_scores.dtype)
    return (per_clip * clip_has).sum() / clip_has.sum().clamp(min=1.0)


def phase_loss(out: dict, batch: Batch, cfg: LossConfig) -> tuple[torch.Tensor, dict]:
    """Phase 1: L_S + eta * L_A. Phase 2: L_M only."""
    if cfg.phase == 1:
        ls = score_loss(out["s"], batch.labels, batch.taus, cfg)
        la = anticipation_loss(out["l_a"], batch.labels)
        return ls + cfg.eta * la, {"L_S": ls.item(), "L_A": la.item()}
    if cfg.phase == 2:
        lm = localization_loss(out["obj_scores"], batch.involvement, batch.mask)
        return lm, {"L_M": lm.item()}
    raise ConfigurationError("phase must be 1 or 2")


# -- evaluation helpers ------------------------------------------------------


def build_bundle(model: AccidentModel, clips: Sequence[ClipPack], n_iter: Optional[int] = None,
                 grid_size: int = 100, with_localization: bool = True) -> EvalBundle:
    rows = []
    for clip, (score, loc) in zip(clips, model.predict(clips, n_iter=n_iter)):
        rows.append(ClipEval(
            clip.clip_id, score, int(clip.is_positive), clip.fps, clip.accident_frame,
            loc if with_localization else None, clip.involvement if with_localization else None,
        ))
    return EvalBundle(rows, threshold_grid(grid_size))


def default_validation(clips: Sequence[ClipPack], phase: int, grid_size: int = 100):
    def run(model: AccidentModel, epoch: int) -> dict:
        bundle = build_bundle(model, clips, grid_size=grid_size, with_localization=phase == 2)
        out = {"val_AP": bundle_ap(bundle), "val_mTTA": mtta(bundle)}
        if phase == 2:
            out["val_AOLA"] = aola(bundle)
        return out

    return run


# -- training loop -----------------------------------------------------------


class Plateau:
    """Multiply the learning rate by ``factor`` once the monitored value has
    not improved for ``patience`` consecutive epochs."""

    def __init__(self, optimizer, patience: int = 3, factor: float = 0.5):
        self.optimizer, self.patience, self.factor = optimizer, patience, factor
        self.best = -math.inf
        self.bad_epochs = 0

    def step(self, value: float) -> bool:
        if value > self.best:
            self.best, self.bad_epochs = value, 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            for group in self.optimizer.param_groups:
                group["lr"] *= self.factor
            self.bad_epochs = 0
            return True
        return False


@dataclass
class History:
    rows: list = field(default_factory=list)
    lr_events: list = field(default_factory=list)  # (epoch, new lr)

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for row in self.rows:
                w.writerow([row["epoch"]] + [
                    "" if row.get(c) is None else fmt(row[c]) for c in HISTORY_COLUMNS[1:]
                ])


def _batch_generator(seed: int, epoch: int, index: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0]))
    return g


def train(
    model: AccidentModel,
    train_clips: Sequence[ClipPack],
    tcfg: TrainConfig,
    lcfg: LossConfig,
    val_clips: Sequence[ClipPack] = (),
    validate_fn: Optional[Callable[[AccidentModel, int], dict]] = None,
) -> History:
    """Train ``model`` in place for phase ``lcfg.phase``.

    Only the phase's parameters are handed to the optimizer; the others are
    frozen (and their modules kept in eval mode in phase 2).
    """
    tcfg.validate()
    lcfg.validate()
    if not train_clips:
        raise ConfigurationError("training split is empty")
    phase = lcfg.phase
    if phase == 2 and not all(c.involvement is not None for c in train_clips):
        raise ConfigurationError("phase 2 needs per-object involvement labels")
    torch.manual_seed(tcfg.seed)
    params = model.stage_parameters(phase)
    trainable = {id(p) for p in params}
    for p in model.parameters():
        p.requires_grad_(id(p) in trainable)
    optimizer = torch.optim.Adam(params, lr=tcfg.learning_rate)
    plateau = Plateau(optimizer, tcfg.plateau_patience, tcfg.plateau_factor)
    if validate_fn is None and val_clips:
        validate_fn = default_validation(val_clips, phase)
    history = History()
    dtype = next(model.parameters()).dtype

    for epoch in range(1, tcfg.epochs + 1):
        model.train()
        if phase == 2:
            for m in (model.vision, model.objects, model.fusion, model.anticipation):
                m.eval()
        order = np.random.default_rng([tcfg.seed, epoch]).permutation(len(train_clips))
        sums, seen = {}, 0
        for bi, start in enumerate(range(0, len(order), tcfg.batch_size)):
            batch = collate([train_clips[i] for i in order[start:start + tcfg.batch_size]], dtype=dtype)
            out = model.run(batch, rng=_batch_generator(tcfg.seed, epoch, bi), localize=phase == 2)
            loss, parts = phase_loss(out, batch, lcfg)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * len(batch)
            seen += len(batch)
        row = {"epoch": epoch, "lr": optimizer.param_groups[0]["lr"]}
        row.update({k: v / seen for k, v in sums.items()})
        if validate_fn is not None:
            row.update(validate_fn(model, epoch))
            monitored = row.get("val_AOLA") if phase == 2 and "val_AOLA" in row else row.get("val_AP")
            if monitored is not None and plateau.step(monitored):
                history.lr_events.append((epoch, optimizer.param_groups[0]["lr"]))
                log.info("epoch %d: learning rate reduced to %g", epoch, optimizer.param_groups[0]["lr"])
        history.rows.append(row)
        log.info("epoch %d: %s", epoch, {k: v for k, v in row.items() if k != "epoch"})
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    return history


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, model: AccidentModel, meta: Optional[dict] = None) -> None:
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    offsets, payload = pack_arrays(state)
    header = {
        "model_config": asdict(model.cfg),
        "dtype": "f32le",
        "arrays": {k: {"shape": list(state[k].shape), "byte_offset": offsets[k][0]} for k in state},
        "meta": meta or {},
    }
    blob = CHECKPOINT_MAGIC + json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + payload
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> tuple[AccidentModel, dict]:
    header, payload = split_container(Path(path).read_bytes(), CHECKPOINT_MAGIC)
    model = AccidentModel(ModelConfig(**header["model_config"]))
    state = {
        k: torch.from_numpy(unpack_array(payload, spec["byte_offset"], tuple(spec["shape"]), False).copy())
        for k, spec in header["arrays"].items()
    }
    model.load_state_dict(state)
    model.eval()
    return model, header.get("meta", {})


# -- gradient checking -------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict
    n_checked: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(fn: Callable[[], torch.Tensor], params, h: float = 1e-5, floor: float = 1e-6) -> GradCheckReport:
    """Compare autograd against central differences for every element of ``params``.

    ``fn`` must return a scalar and read the given tensors (float64 recommended).
    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``.
    """
    named = params.items() if isinstance(params, dict) else ((str(i), p) for i, p in enumerate(params))
    named = list(named)
    tensors = [p for _, p in named]
    analytic = torch.autograd.grad(fn(), tensors, allow_unused=True)
    per_param, worst, count = {}, 0.0, 0
    with torch.no_grad():
        for (name, p), a in zip(named, analytic):
            a = torch.zeros_like(p) if a is None else a
            flat = p.view(-1)
            num = torch.empty_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = fn().item()
                flat[i] = orig - h
                fm = fn().item()
                flat[i] = orig
                num[i] = (fp - fm) / (2 * h)
            a = a.reshape(-1)
            denom = torch.maximum(torch.maximum(a.abs(), num.abs()), torch.full_like(a, floor))
            err = float(((a - num).abs() / denom).max()) if flat.numel() else 0.0
            per_param[name] = err
            worst = max(worst, err)
            count += flat.numel()
    return GradCheckReport(worst, per_param, count)
