"""Deterministic synthetic collision scenarios.

Agents move on straight lines in a square world. In a collision scene two
designated agents converge on a common point, meet at the accident frame and
stay there; every other agent keeps clear of everyone else. Features are a
fixed random projection of physically meaningful per-agent state, standing
in for a detector/backbone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataset import (
    MAX_OBJECTS,
    ClipPack,
    DatasetManifest,
    ManifestEntry,
    ValidationError,
    ensure_dir,
    write_clip_pack,
    write_manifest,
)

COLLISION_EPS = 0.02  # fraction of world_size
PROXIMITY_BAND = 0.15  # fraction of world_size
STATE_DIM = 7  # x, y, vx, vy, min distance, time to closest approach, collision-course indicator
CATEGORIES = ("car", "car", "car", "truck", "bus", "motorcycle", "bicycle", "pedestrian")
_MAX_TRIES = 5000


@dataclass(frozen=True)
class ScenarioParams:
    num_agents: int = 5
    num_frames: int = 100
    fps: int = 20
    collision: bool = True
    accident_frame: int = 90
    world_size: float = 1.0
    speed_range: tuple = (0.04, 0.12)  # world units per second
    noise_sigma: float = 0.01
    embed_seed: int = 0
    num_slots: int = 7
    d_v: int = 64
    d_o: int = 32
    box_size: float = 0.06  # fraction of world_size

    def validate(self) -> None:
        if self.num_agents < 2:
            raise ValidationError("num_agents", "need at least 2 agents")
        if not self.num_agents <= self.num_slots <= MAX_OBJECTS:
            raise ValidationError("num_slots", f"need num_agents <= num_slots <= {MAX_OBJECTS}")
        if self.num_frames < 2 or self.fps < 1:
            raise ValidationError("num_frames", "need T >= 2 and fps >= 1")
        if self.collision and not 2 <= self.accident_frame <= self.num_frames:
            raise ValidationError("accident_frame", f"must lie in [2, {self.num_frames}]")
        if self.world_size <= 0:
            raise ValidationError("world_size", "must be positive")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise ValidationError("speed_range", "need 0 < min <= max")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma", "must be >= 0")
        if self.d_v < 1 or self.d_o < 1:
            raise ValidationError("d_v", "feature dims must be >= 1")

    @property
    def collision_eps(self) -> float:
        return COLLISION_EPS * self.world_size

    @property
    def proximity_band(self) -> float:
        return PROXIMITY_BAND * self.world_size


@dataclass
class Trajectories:
    positions: np.ndarray  # (T, A, 2)
    velocities: np.ndarray  # (T, A, 2), per second
    pair: tuple | None  # agent indices of the colliding pair


def _embedding(params: ScenarioParams):
    rng = np.random.default_rng([params.embed_seed, 0xE3BED])
    proj_obj = rng.normal(0.0, 1.0 / math.sqrt(STATE_DIM), size=(STATE_DIM, params.d_o))
    proj_frame = rng.normal(0.0, 1.0 / math.sqrt(STATE_DIM + 1), size=(STATE_DIM + 1, params.d_v))
    return proj_obj, proj_frame


def _inside(pos: np.ndarray, world: float, margin: float) -> bool:
    return bool(np.all(pos >= margin) and np.all(pos <= world - margin))


def _clear_of(pos: np.ndarray, others: list[np.ndarray], band: float) -> bool:
    return all(np.min(np.linalg.norm(pos - o, axis=-1)) > band for o in others)


def _straight_agent(rng, params: ScenarioParams, frames: np.ndarray):
    W = params.world_size
    start = rng.uniform(0.0, W, size=2)
    heading = rng.uniform(0.0, 2 * math.pi)
    speed = rng.uniform(*params.speed_range) * W
    vel = speed * np.array([math.cos(heading), math.sin(heading)])
    pos = start[None, :] + vel[None, :] * ((frames - 1) / params.fps)[:, None]
    return pos, np.broadcast_to(vel, pos.shape).copy()


def _colliding_pair(rng, params: ScenarioParams, frames: np.ndarray):
    W, tau = params.world_size, params.accident_frame
    for _ in range(_MAX_TRIES):
        centre = rng.uniform(0.3 * W, 0.7 * W, size=2)
        h1 = rng.uniform(0.0, 2 * math.pi)
        h2 = h1 + math.pi + rng.uniform(-math.pi / 2, math.pi / 2)
        out = []
        for h in (h1, h2):
            vel = rng.uniform(*params.speed_range) * W * np.array([math.cos(h), math.sin(h)])
            lead = np.maximum(tau - frames, 0) / params.fps
            pos = centre[None, :] - vel[None, :] * lead[:, None]
            v = np.where((frames < tau)[:, None], vel[None, :], 0.0)
            out.append((pos, v))
        if all(_inside(p, W, 0.01 * W) for p, _ in out):
            return out
    raise ValidationError("speed_range", "cannot place the colliding pair inside the world")


def simulate(seed: int, params: ScenarioParams) -> Trajectories:
    """Run the kinematic simulation only (no encoding)."""
    params.validate()
    rng = np.random.default_rng([seed, 0x51A1])
    frames = np.arange(1, params.num_frames + 1, dtype=np.float64)
    W, band = params.world_size, params.proximity_band
    placed_pos, placed_vel = [], []
    pair = None
    if params.collision:
        for p, v in _colliding_pair(rng, params, frames):
            placed_pos.append(p)
            placed_vel.append(v)
        pair = (0, 1)
    while len(placed_pos) < params.num_agents:
        for _ in range(_MAX_TRIES):
            pos, vel = _straight_agent(rng, params, frames)
            # margin keeps jittered observations clear of the band as well
            if _inside(pos, W, 0.01 * W) and _clear_of(pos, placed_pos, 1.2 * band):
                placed_pos.append(pos)
                placed_vel.append(vel)
                break
        else:
            raise ValidationError("num_agents", "scene too crowded to place non-colliding agents")
    return Trajectories(np.stack(placed_pos, axis=1), np.stack(placed_vel, axis=1), pair)


def agent_state(traj: Trajectories, params: ScenarioParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-agent state (T, A, STATE_DIM) and global min pairwise distance (T,)."""
    pos, vel = traj.positions, traj.velocities
    T, A, _ = pos.shape
    W = params.world_size
    rel_p = pos[:, None, :, :] - pos[:, :, None, :]  # (T, A, A, 2): other minus self
    rel_v = vel[:, None, :, :] - vel[:, :, None, :]
    dist = np.linalg.norm(rel_p, axis=-1)
    eye = np.eye(A, dtype=bool)[None]
    dist_off = np.where(eye, np.inf, dist)
    min_dist = dist_off.min(axis=2)
    # closest approach under constant velocity, limited to the rest of the clip
    remaining = (T - np.arange(1, T + 1)) / params.fps
    vv = np.sum(rel_v * rel_v, axis=-1)
    pv = np.sum(rel_p * rel_v, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_star = np.where(vv > 1e-12, -pv / vv, 0.0)
    t_star = np.clip(t_star, 0.0, remaining[:, None, None])
    cpa = np.linalg.norm(rel_p + rel_v * t_star[..., None], axis=-1)
    cpa = np.where(eye, np.inf, cpa)
    partner = np.argmin(cpa, axis=2)
    cpa_min = np.take_along_axis(cpa, partner[..., None], axis=2)[..., 0]
    ttca = np.take_along_axis(t_star, partner[..., None], axis=2)[..., 0]
    # near 1 when the projected miss distance is well inside the proximity band
    course = np.exp(-((cpa_min / (0.5 * params.proximity_band)) ** 2))
    state = np.concatenate(
        [pos / W, vel / W, min_dist[..., None] / W, ttca[..., None], course[..., None]], axis=-1
    )
    global_min = min_dist.min(axis=1) / W
    return state, global_min


def generate_scenario(seed: int, params: ScenarioParams, clip_id: str | None = None) -> ClipPack:
    params.validate()
    traj = simulate(seed, params)
    state, global_min = agent_state(traj, params)
    rng = np.random.default_rng([seed, 0x0B5])
    T, A, _ = state.shape
    S = params.num_slots
    if params.noise_sigma > 0:
        state = state + rng.normal(0.0, params.noise_sigma, size=state.shape)
        global_min = global_min + rng.normal(0.0, params.noise_sigma, size=global_min.shape)
    proj_obj, proj_frame = _embedding(params)

    slots = rng.permutation(S)[:A]  # agent a lives in slot slots[a]
    cats = [CATEGORIES[i] for i in rng.integers(0, len(CATEGORIES), size=A)]
    object_features = np.zeros((T, S, params.d_o))
    object_features[:, slots, :] = state @ proj_obj
    mask = np.zeros((T, S), dtype=bool)
    mask[:, slots] = True

    half = 0.5 * params.box_size
    centres = traj.positions / params.world_size
    boxes = np.zeros((T, S, 4))
    boxes[:, slots, :] = np.clip(np.concatenate([centres - half, centres + half], axis=-1), 0.0, 1.0)

    frame_in = np.concatenate([state.mean(axis=1), global_min[:, None]], axis=-1)
    frame_features = frame_in @ proj_frame

    involvement = np.zeros((T, S), dtype=bool)
    if traj.pair is not None:
        i, j = traj.pair
        d = np.linalg.norm(traj.positions[:, i] - traj.positions[:, j], axis=-1)
        close = d < params.proximity_band
        involvement[:, slots[i]] = close
        involvement[:, slots[j]] = close

    categories = ["unknown"] * S
    for a in range(A):
        categories[slots[a]] = cats[a]
    return ClipPack(
        clip_id=clip_id or f"synth-{seed}",
        fps=params.fps,
        frame_features=frame_features,
        object_features=object_features,
        boxes=boxes,
        object_mask=mask,
        label="positive" if params.collision else "negative",
        accident_frame=params.accident_frame if params.collision else None,
        involvement=involvement,
        categories=categories,
    )


def clip_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def stratified_test_indices(seed: int, count: int, label_code: int, test_fraction: float = 0.2) -> set:
    n_test = math.floor(test_fraction * count + 0.5)
    perm = np.random.default_rng([seed, label_code, 0x5B17]).permutation(count)
    return set(int(i) for i in perm[:n_test])


def generate_dataset(seed: int, count_pos: int, count_neg: int, params: ScenarioParams, out_dir) -> DatasetManifest:
    """Write ``count_pos`` positive and ``count_neg`` negative clips plus ``manifest.jsonl``.

    Positives take clip indices ``0..count_pos-1``, negatives follow. 20% of each
    label group goes to the test split.
    """
    if count_pos < 0 or count_neg < 0:
        raise ValidationError("counts", "must be >= 0")
    params.validate()
    out = ensure_dir(out_dir)
    entries = []
    groups = [("positive", count_pos, 0, True), ("negative", count_neg, count_pos, False)]
    for label, count, base, collision in groups:
        test_idx = stratified_test_indices(seed, count, int(collision))
        p = replace(params, collision=collision)
        for k in range(count):
            index = base + k
            name = f"clip_{index:05d}.clip"
            clip = generate_scenario(clip_seed(seed, index), p, clip_id=f"s{seed}-{index:05d}")
            write_clip_pack(clip, out / name)
            entries.append(ManifestEntry(name, label, "test" if k in test_idx else "train"))
    manifest = DatasetManifest(entries, "synthetic", Path(out).resolve())
    write_manifest(manifest, out / "manifest.jsonl")
    return manifest
