import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from accident_anticipation.dataset import (
    MAGIC,
    PROFILES,
    ClipPack,
    CorruptionError,
    DatasetManifest,
    FormatError,
    ManifestEntry,
    ValidationError,
    read_clip_pack,
    read_manifest,
    split_container,
    validate_manifest,
    write_clip_pack,
    write_manifest,
)

from conftest import random_clip


def _minimal():
    return ClipPack(
        clip_id="min",
        fps=1,
        frame_features=np.array([[0.5, -1.0]]),
        object_features=np.array([[[1.0, 2.0]]]),
        boxes=np.array([[[0.1, 0.1, 0.2, 0.2]]]),
        object_mask=np.array([[True]]),
        label="negative",
    )


def test_minimal_clip_round_trip(tmp_path):
    clip = _minimal()
    write_clip_pack(clip, tmp_path / "a.clip")
    back = read_clip_pack(tmp_path / "a.clip")
    assert back == clip
    for name in ("frame_features", "object_features", "boxes", "object_mask", "involvement"):
        assert np.array_equal(getattr(back, name), getattr(clip, name))
    assert back.accident_frame is None


def test_dad_clip_keeps_accident_frame(tmp_path):
    rng = np.random.default_rng(0)
    clip = random_clip(rng, T=100, N=19, d_v=3, d_o=2, positive=True)
    clip.fps, clip.accident_frame = 20, 90
    write_clip_pack(clip, tmp_path / "dad.clip")
    back = read_clip_pack(tmp_path / "dad.clip")
    assert back.accident_frame == 90 and back.fps == 20


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_round_trip_is_bit_exact(tmp_path_factory, seed):
    clip = random_clip(np.random.default_rng(seed))
    path = tmp_path_factory.mktemp("rt") / "c.clip"
    write_clip_pack(clip, path)
    back = read_clip_pack(path)
    assert back == clip
    assert back.frame_features.tobytes() == clip.frame_features.tobytes()
    assert back.object_features.tobytes() == clip.object_features.tobytes()


def test_header_layout(tmp_path):
    write_clip_pack(_minimal(), tmp_path / "a.clip")
    data = (tmp_path / "a.clip").read_bytes()
    assert data.startswith(MAGIC)
    header, payload = split_container(data, MAGIC)
    assert header["dtype"] == "f32le"
    assert header["shapes"]["object_features"] == [1, 1, 2]
    assert list(header["byte_offsets"]) == ["frame_features", "object_features", "boxes", "object_mask", "involvement"]
    # 2 + 2 + 4 floats, then two 1-byte booleans
    assert len(payload) == 8 * 4 + 2


def test_truncated_file_is_corruption(tmp_path):
    write_clip_pack(_minimal(), tmp_path / "a.clip")
    data = (tmp_path / "a.clip").read_bytes()
    (tmp_path / "b.clip").write_bytes(data[:-1])
    with pytest.raises(CorruptionError):
        read_clip_pack(tmp_path / "b.clip")


def test_bad_magic_is_format_error(tmp_path):
    (tmp_path / "x.clip").write_bytes(b"NOTACLIP\n{}\n")
    with pytest.raises(FormatError):
        read_clip_pack(tmp_path / "x.clip")


def test_inverted_box_names_boxes(tmp_path):
    write_clip_pack(_minimal(), tmp_path / "a.clip")
    data = bytearray((tmp_path / "a.clip").read_bytes())
    header, payload = split_container(bytes(data), MAGIC)
    start = len(data) - len(payload) + header["byte_offsets"]["boxes"]
    data[start:start + 16] = np.array([0.5, 0.1, 0.2, 0.2], dtype="<f4").tobytes()
    (tmp_path / "bad.clip").write_bytes(bytes(data))
    with pytest.raises(ValidationError) as exc:
        read_clip_pack(tmp_path / "bad.clip")
    assert exc.value.field == "boxes"


def _mutations():
    def fps(c): c.fps = 0
    def label(c): c.label = "maybe"
    def neg_tau(c): c.accident_frame = 1
    def neg_involved(c): c.involvement[0, 0] = True
    def pos_no_tau(c): c.label = "positive"
    def tau_range(c): c.label, c.accident_frame = "positive", 5
    def nan(c): c.frame_features[0, 0] = np.nan
    def box_range(c): c.boxes[0, 0, 2] = 1.5
    def masked_involved(c): c.label, c.accident_frame, c.object_mask[0, 0], c.involvement[0, 0] = "positive", 1, False, True
    def box_shape(c): c.boxes = c.boxes[..., :3]
    def categories(c): c.categories = ["car", "bus"]
    return [
        (fps, "fps"), (label, "label"), (neg_tau, "accident_frame"), (neg_involved, "involvement"),
        (pos_no_tau, "accident_frame"), (tau_range, "accident_frame"), (nan, "frame_features"),
        (box_range, "boxes"), (masked_involved, "involvement"), (box_shape, "boxes"),
        (categories, "categories"),
    ]


@pytest.mark.parametrize("mutate,field", _mutations(), ids=lambda x: getattr(x, "__name__", x))
def test_single_violations_are_rejected(tmp_path, mutate, field):
    clip = _minimal()
    mutate(clip)
    with pytest.raises(ValidationError) as exc:
        write_clip_pack(clip, tmp_path / "m.clip")
    assert exc.value.field == field
    assert not (tmp_path / "m.clip").exists()


def test_too_many_objects_rejected():
    rng = np.random.default_rng(1)
    clip = random_clip(rng, T=2, N=20, d_v=2, d_o=2, positive=False)
    with pytest.raises(ValidationError) as exc:
        clip.validate()
    assert exc.value.field == "object_features"


def test_profile_constants():
    assert (PROFILES["dad"].num_frames, PROFILES["dad"].fps, PROFILES["dad"].accident_frame) == (100, 20, 90)
    assert (PROFILES["ccd"].num_frames, PROFILES["ccd"].fps, PROFILES["ccd"].accident_frame) == (50, 10, 40)
    assert (PROFILES["a3d"].num_frames, PROFILES["a3d"].fps, PROFILES["a3d"].accident_frame) == (100, 20, 80)
    assert PROFILES["dad"].has_involvement and not PROFILES["ccd"].has_involvement


def _write_two(tmp_path):
    rng = np.random.default_rng(3)
    entries = []
    for i, positive in enumerate((True, False)):
        clip = random_clip(rng, T=5, N=2, d_v=2, d_o=2, positive=positive, clip_id=f"c{i}")
        write_clip_pack(clip, tmp_path / f"c{i}.clip")
        entries.append(ManifestEntry(f"c{i}.clip", clip.label, "train"))
    return entries


def test_manifest_report_two_valid(tmp_path):
    manifest = DatasetManifest(_write_two(tmp_path), "synthetic", tmp_path)
    report = validate_manifest(manifest)
    assert (report.passed, report.failed) == (2, 0)
    assert report.counts["positive"] == 1 and report.counts["negative"] == 1
    assert report.counts["train"] == {"positive": 1, "negative": 1}


def test_manifest_missing_file(tmp_path):
    entries = _write_two(tmp_path) + [ManifestEntry("gone.clip", "negative", "test")]
    report = validate_manifest(DatasetManifest(entries, "synthetic", tmp_path))
    statuses = [e["status"] for e in report.entries]
    assert statuses == ["pass", "pass", "missing"]


def test_dad_profile_tau_mismatch_is_warning(tmp_path):
    rng = np.random.default_rng(4)
    clip = random_clip(rng, T=100, N=2, d_v=2, d_o=2, positive=True)
    clip.fps, clip.accident_frame = 20, 80
    write_clip_pack(clip, tmp_path / "p.clip")
    report = validate_manifest(DatasetManifest([ManifestEntry("p.clip", "positive", "train")], "dad", tmp_path))
    assert report.passed == 1
    assert any("tau=80" in w for w in report.warnings)


def test_manifest_jsonl_round_trip(tmp_path):
    entries = _write_two(tmp_path)
    write_manifest(DatasetManifest(entries), tmp_path / "m.jsonl")
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert json.loads(lines[0]) == {"path": "c0.clip", "label": "positive", "split": "train"}
    back = read_manifest(tmp_path / "m.jsonl")
    assert back.entries == entries
    assert back.resolve(back.entries[0]) == (tmp_path / "c0.clip").resolve()
