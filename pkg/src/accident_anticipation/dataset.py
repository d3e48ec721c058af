"""Clip data model, the CLIPPACK container format and dataset manifests."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"CLIPPACK1\n"
MAX_OBJECTS = 19

# Array order inside a CLIPPACK payload; masks are stored as one byte per element.
ARRAY_ORDER = ("frame_features", "object_features", "boxes", "object_mask", "involvement")
_BOOL_ARRAYS = {"object_mask", "involvement"}


class ClipPackError(Exception):
    """Base class for container errors."""


class FormatError(ClipPackError):
    pass


class CorruptionError(ClipPackError):
    pass


class ValidationError(ClipPackError, ValueError):
    """A ClipPack (or related) invariant does not hold.

    ``field`` names the offending field or invariant.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class DatasetProfile:
    name: str
    num_frames: Optional[int]
    fps: Optional[int]
    accident_frame: Optional[int]
    train_fraction: float
    has_involvement: bool


PROFILES = {
    "dad": DatasetProfile("dad", 100, 20, 90, 0.7, True),
    "ccd": DatasetProfile("ccd", 50, 10, 40, 0.8, False),
    "a3d": DatasetProfile("a3d", 100, 20, 80, 0.8, False),
    "synthetic": DatasetProfile("synthetic", None, None, None, 0.8, True),
}


def get_profile(name: str) -> DatasetProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValidationError("dataset_profile", f"unknown profile {name!r}") from None


@dataclass(eq=False)
class ClipPack:
    """One clip of precomputed features, detections and labels.

    Frames are 1-indexed in ``accident_frame`` (tau in [1, T]); arrays are
    0-indexed as usual.
    """

    clip_id: str
    fps: int
    frame_features: np.ndarray  # (T, D_v) float32
    object_features: np.ndarray  # (T, N, D_o) float32
    boxes: np.ndarray  # (T, N, 4) float32, x1 y1 x2 y2 in [0, 1]
    object_mask: np.ndarray  # (T, N) bool
    label: str  # "positive" | "negative"
    accident_frame: Optional[int] = None
    involvement: Optional[np.ndarray] = None  # (T, N) bool
    categories: Optional[list] = None  # per-slot class names, optional

    def __post_init__(self):
        self.frame_features = np.ascontiguousarray(self.frame_features, dtype=np.float32)
        self.object_features = np.ascontiguousarray(self.object_features, dtype=np.float32)
        self.boxes = np.ascontiguousarray(self.boxes, dtype=np.float32)
        self.object_mask = np.ascontiguousarray(self.object_mask, dtype=bool)
        if self.involvement is None:
            self.involvement = np.zeros(self.object_mask.shape, dtype=bool)
        self.involvement = np.ascontiguousarray(self.involvement, dtype=bool)

    @property
    def num_frames(self) -> int:
        return self.frame_features.shape[0]

    @property
    def num_slots(self) -> int:
        return self.object_features.shape[1]

    @property
    def is_positive(self) -> bool:
        return self.label == "positive"

    def __eq__(self, other):
        if not isinstance(other, ClipPack):
            return NotImplemented
        scalars = ("clip_id", "fps", "label", "accident_frame", "categories")
        if any(getattr(self, s) != getattr(other, s) for s in scalars):
            return False
        return all(
            getattr(self, a).dtype == getattr(other, a).dtype
            and np.array_equal(getattr(self, a), getattr(other, a))
            for a in ARRAY_ORDER
        )

    def validate(self, max_objects: int = MAX_OBJECTS) -> None:
        """Raise ValidationError naming the first invariant that fails."""
        if not isinstance(self.fps, (int, np.integer)) or isinstance(self.fps, bool) or self.fps < 1:
            raise ValidationError("fps", f"must be a positive integer, got {self.fps!r}")
        if self.frame_features.ndim != 2:
            raise ValidationError("frame_features", "must be T x D_v")
        T, d_v = self.frame_features.shape
        if T < 1 or d_v < 1:
            raise ValidationError("frame_features", f"empty shape {self.frame_features.shape}")
        if self.object_features.ndim != 3 or self.object_features.shape[0] != T:
            raise ValidationError("object_features", "must be T x N x D_o")
        _, N, d_o = self.object_features.shape
        if not 1 <= N <= max_objects:
            raise ValidationError("object_features", f"N={N} outside [1, {max_objects}]")
        if d_o < 1:
            raise ValidationError("object_features", "D_o must be >= 1")
        if self.boxes.shape != (T, N, 4):
            raise ValidationError("boxes", f"shape {self.boxes.shape} != {(T, N, 4)}")
        if self.object_mask.shape != (T, N):
            raise ValidationError("object_mask", f"shape {self.object_mask.shape} != {(T, N)}")
        if self.involvement.shape != (T, N):
            raise ValidationError("involvement", f"shape {self.involvement.shape} != {(T, N)}")
        for name in ("frame_features", "object_features", "boxes"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(name, "non-finite values")
        b = self.boxes[self.object_mask]
        if b.size and not (
            np.all(b >= 0)
            and np.all(b <= 1)
            and np.all(b[:, 0] <= b[:, 2])
            and np.all(b[:, 1] <= b[:, 3])
        ):
            raise ValidationError("boxes", "need 0 <= x1 <= x2 <= 1 and 0 <= y1 <= y2 <= 1 on occupied slots")
        if np.any(self.involvement & ~self.object_mask):
            raise ValidationError("involvement", "involved object in an unoccupied slot")
        if self.label not in ("positive", "negative"):
            raise ValidationError("label", f"must be positive/negative, got {self.label!r}")
        if self.label == "negative":
            if self.accident_frame is not None:
                raise ValidationError("accident_frame", "negative clip must not carry an accident frame")
            if self.involvement.any():
                raise ValidationError("involvement", "negative clip must have no involved objects")
        else:
            tau = self.accident_frame
            if tau is None or isinstance(tau, bool) or not isinstance(tau, (int, np.integer)):
                raise ValidationError("accident_frame", "positive clip needs an integer accident frame")
            if not 1 <= tau <= T:
                raise ValidationError("accident_frame", f"tau={tau} outside [1, {T}]")
        if self.categories is not None and len(self.categories) != N:
            raise ValidationError("categories", f"expected {N} entries")


# -- raw array payloads, shared with checkpoints -----------------------------


def pack_arrays(arrays: dict[str, np.ndarray]) -> tuple[dict, bytes]:
    """Serialize named arrays; floats as f32le, booleans as one byte each."""
    offsets, chunks, pos = {}, [], 0
    for name, arr in arrays.items():
        if arr.dtype == bool:
            raw = arr.astype(np.uint8).tobytes()
        else:
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        offsets[name] = [pos, len(raw)]
        chunks.append(raw)
        pos += len(raw)
    return offsets, b"".join(chunks)


def unpack_array(payload: bytes, offset: int, shape, is_bool: bool) -> np.ndarray:
    count = int(np.prod(shape)) if len(shape) else 1
    nbytes = count * (1 if is_bool else 4)
    if offset < 0 or offset + nbytes > len(payload):
        raise CorruptionError(f"array at offset {offset} needs {nbytes} bytes, payload has {len(payload)}")
    if is_bool:
        raw = np.frombuffer(payload, dtype=np.uint8, count=count, offset=offset)
        if np.any(raw > 1):
            raise CorruptionError("boolean array holds values other than 0/1")
        return raw.astype(bool).reshape(shape)
    return np.frombuffer(payload, dtype="<f4", count=count, offset=offset).astype(np.float32).reshape(shape)


def split_container(data: bytes, magic: bytes) -> tuple[dict, bytes]:
    if not data.startswith(magic):
        raise FormatError(f"bad magic, expected {magic!r}")
    rest = data[len(magic):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise CorruptionError("missing header line")
    try:
        header = json.loads(rest[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"unreadable header: {exc}") from exc
    return header, rest[nl + 1:]


def write_clip_pack(clip: ClipPack, path) -> None:
    clip.validate()
    arrays = {name: getattr(clip, name) for name in ARRAY_ORDER}
    offsets, payload = pack_arrays(arrays)
    header = {
        "clip_id": clip.clip_id,
        "fps": int(clip.fps),
        "label": clip.label,
        "accident_frame": None if clip.accident_frame is None else int(clip.accident_frame),
        "shapes": {name: list(arr.shape) for name, arr in arrays.items()},
        "dtype": "f32le",
        "byte_offsets": {name: offsets[name][0] for name in ARRAY_ORDER},
    }
    if clip.categories is not None:
        header["categories"] = list(clip.categories)
    blob = MAGIC + json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n" + payload
    with open(path, "wb") as fh:
        fh.write(blob)


def read_clip_pack(path) -> ClipPack:
    with open(path, "rb") as fh:
        data = fh.read()
    header, payload = split_container(data, MAGIC)
    try:
        shapes = header["shapes"]
        offsets = header["byte_offsets"]
        if header.get("dtype") != "f32le":
            raise FormatError(f"unsupported dtype {header.get('dtype')!r}")
        expected = 0
        for name in ARRAY_ORDER:
            expected += int(np.prod(shapes[name])) * (1 if name in _BOOL_ARRAYS else 4)
    except (KeyError, TypeError) as exc:
        raise CorruptionError(f"incomplete header: {exc}") from exc
    if expected != len(payload):
        raise CorruptionError(f"payload is {len(payload)} bytes, header declares {expected}")
    arrays = {
        name: unpack_array(payload, offsets[name], tuple(shapes[name]), name in _BOOL_ARRAYS)
        for name in ARRAY_ORDER
    }
    clip = ClipPack(
        clip_id=header["clip_id"],
        fps=header["fps"],
        label=header["label"],
        accident_frame=header["accident_frame"],
        categories=header.get("categories"),
        **arrays,
    )
    clip.validate()
    return clip


# -- manifests ----------------------------------------------------------------


@dataclass
class ManifestEntry:
    path: str
    label: str
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    dataset_profile: str = "synthetic"
    root: Optional[Path] = None  # directory relative paths resolve against

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            fh.write(json.dumps({"path": e.path, "label": e.label, "split": e.split}) + "\n")


def read_manifest(path, profile: str = "synthetic") -> DatasetManifest:
    get_profile(profile)
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                entries.append(ManifestEntry(obj["path"], obj["label"], obj["split"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad manifest line ({exc})") from exc
    return DatasetManifest(entries, profile, Path(path).resolve().parent)


@dataclass
class ValidationReport:
    entries: list[dict]
    counts: dict
    warnings: list[str]

    @property
    def passed(self) -> int:
        return sum(e["status"] == "pass" for e in self.entries)

    @property
    def failed(self) -> int:
        return len(self.entries) - self.passed


def validate_manifest(manifest: DatasetManifest) -> ValidationReport:
    """Check every referenced clip; problems become report entries, never exceptions."""
    profile = get_profile(manifest.dataset_profile)
    rows, warnings = [], []
    counts = {"positive": 0, "negative": 0, "train": {"positive": 0, "negative": 0},
              "test": {"positive": 0, "negative": 0}}
    for e in manifest.entries:
        row = {"path": e.path, "label": e.label, "split": e.split, "status": "pass", "detail": ""}
        rows.append(row)
        if e.split not in ("train", "test") or e.label not in ("positive", "negative"):
            row.update(status="fail", detail=f"bad split/label {e.split!r}/{e.label!r}")
            continue
        p = manifest.resolve(e)
        if not p.exists():
            row.update(status="missing", detail=f"file not found: {p}")
            continue
        try:
            clip = read_clip_pack(p)
        except (ClipPackError, OSError) as exc:
            row.update(status="fail", detail=f"{type(exc).__name__}: {exc}")
            continue
        if clip.label != e.label:
            row.update(status="fail", detail=f"manifest label {e.label} != clip label {clip.label}")
            continue
        counts[e.label] += 1
        counts[e.split][e.label] += 1
        mismatches = []
        if profile.num_frames is not None and clip.num_frames != profile.num_frames:
            mismatches.append(f"T={clip.num_frames} (profile {profile.num_frames})")
        if profile.fps is not None and clip.fps != profile.fps:
            mismatches.append(f"fps={clip.fps} (profile {profile.fps})")
        if profile.accident_frame is not None and clip.is_positive and clip.accident_frame != profile.accident_frame:
            mismatches.append(f"tau={clip.accident_frame} (profile {profile.accident_frame})")
        if mismatches:
            msg = f"{e.path}: profile mismatch: " + ", ".join(mismatches)
            row["detail"] = msg
            warnings.append(msg)
    total = len(manifest.entries)
    if total:
        n_train = sum(e.split == "train" for e in manifest.entries)
        frac = n_train / total
        if abs(frac - profile.train_fraction) > 0.05:
            warnings.append(
                f"train fraction {frac:.2f} differs from profile default {profile.train_fraction:.2f}"
            )
    counts["pass"] = sum(r["status"] == "pass" for r in rows)
    counts["fail"] = len(rows) - counts["pass"]
    return ValidationReport(rows, counts, warnings)


def load_split(manifest: DatasetManifest, split: str) -> list[ClipPack]:
    return [read_clip_pack(manifest.resolve(e)) for e in manifest.split(split)]


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
