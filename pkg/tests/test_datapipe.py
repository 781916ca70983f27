import json

import numpy as np
import pytest
import torch

from densecorr.core import CameraIntrinsics
from densecorr.datapipe import (
    ArticulatedPair,
    PointTrack,
    RevoluteParams,
    TrackAnnotation,
    VideoPairSource,
    frame_gap_bounds,
    index_videos,
    load_articulated_pair,
    load_depth,
    load_image,
    load_track_annotations,
    random_crop_pair,
    resize_short_side,
    sample_gap,
    save_depth,
    save_image,
    write_articulated_pair,
    write_track_annotations,
)
from densecorr.errors import DataError


def make_video(root, name, frames, fps=2, size=(20, 24), meta_text=None):
    d = root / name
    d.mkdir(parents=True)
    rng = np.random.default_rng(len(name))
    for i in range(frames):
        save_image(rng.random((*size, 3)), d / f"{i}.png")
    (d / "meta").write_text(meta_text if meta_text is not None else json.dumps({"fps": fps}))
    return d


def test_index_orders_frames_numerically_and_skips_junk(tmp_path, caplog):
    d = make_video(tmp_path, "a", 12)
    (d / "notes.txt").write_text("x")
    idx = index_videos(tmp_path)
    assert len(idx) == 1
    assert [p.stem for p in idx[0].frames] == [str(i) for i in range(12)]
    assert idx[0].fps == 2.0
    assert "notes.txt" in caplog.text


def test_index_accepts_bare_fps_and_lists_offenders(tmp_path):
    make_video(tmp_path, "a", 3, meta_text="30")
    assert index_videos(tmp_path)[0].fps == 30.0
    (tmp_path / "broken").mkdir()
    (tmp_path / "nometa").mkdir()
    save_image(np.zeros((8, 8, 3)), tmp_path / "nometa" / "0.png")
    with pytest.raises(DataError, match="broken, nometa"):
        index_videos(tmp_path)
    with pytest.raises(DataError):
        index_videos(tmp_path / "missing")


def test_frame_gap_bounds_and_sampling():
    assert frame_gap_bounds(30) == (30, 90)
    assert frame_gap_bounds(0.2) == (1, 1)
    from densecorr.datapipe import Video

    v = Video("v", list(range(100)), 10.0)
    rng = np.random.default_rng(0)
    for _ in range(200):
        start, gap = sample_gap(v, rng)
        assert 10 <= gap <= 30 and 0 <= start and start + gap < 100
    with pytest.raises(DataError):
        sample_gap(Video("s", list(range(10)), 10.0), rng)
    # short video: gap is capped by the video length
    start, gap = sample_gap(Video("m", list(range(15)), 10.0), rng)
    assert 10 <= gap <= 14


def test_resize_short_side_snaps_to_multiple():
    out = resize_short_side(torch.rand(3, 360, 640), 288)
    assert out.shape == (3, 288, 512)
    same = torch.rand(3, 16, 24)
    assert resize_short_side(same, 16) is same


def test_random_crop_pair_shared_and_independent():
    img = torch.arange(40 * 48, dtype=torch.float32).reshape(1, 40, 48).expand(3, -1, -1)
    rng = np.random.default_rng(0)
    a, b = random_crop_pair(img, img, 16, rng, shared=True)
    assert torch.equal(a, b) and a.shape == (3, 16, 16)
    differ = 0
    for _ in range(10):
        a, b = random_crop_pair(img, img, 16, rng)
        differ += not torch.equal(a, b)
    assert differ > 5
    with pytest.raises(ValueError):
        random_crop_pair(img, img, 12, rng)
    with pytest.raises(ValueError):
        random_crop_pair(img, img, 64, rng)


def test_video_source_batches_are_deterministic(tmp_path):
    make_video(tmp_path, "a", 10, fps=2, size=(24, 32))
    make_video(tmp_path, "bb", 10, fps=2, size=(24, 32))
    src = VideoPairSource(index_videos(tmp_path), crop_size=16, short_side=24)
    a1, a2 = src.batch(3, 7, 2)
    b1, b2 = src.batch(3, 7, 2)
    assert a1.shape == (2, 3, 16, 16)
    assert torch.equal(a1, b1) and torch.equal(a2, b2)
    assert not torch.equal(src.batch(3, 8, 2)[0], a1)


def test_image_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, (5, 7, 3)).astype(np.float32) / 255
    save_image(torch.from_numpy(arr).permute(2, 0, 1), tmp_path / "x.png")
    back = load_image(tmp_path / "x.png")
    assert torch.allclose(back.permute(1, 2, 0), torch.from_numpy(arr), atol=1e-7)


def test_track_annotation_roundtrip_and_validation(tmp_path):
    ann = TrackAnnotation(
        "v",
        [
            PointTrack(0, np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([True, False])),
            PointTrack(1, np.array([[0.0, 0.0], [5.0, 5.0]]), np.array([False, False])),
        ],
        (10, 12),
    )
    write_track_annotations(ann, tmp_path / "t.json")
    back = load_track_annotations(tmp_path / "t.json")
    assert back.size == (10, 12) and back.video_id == "v"
    assert np.array_equal(back.points[0].coords, ann.points[0].coords)
    assert len(back.evaluable()) == 1

    bad = {"points": [{"first_frame": 0, "coords": [[1, 1], [2, 2]], "visible": [True]}]}
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    with pytest.raises(DataError, match=r"points\[0\]\.visible"):
        load_track_annotations(tmp_path / "bad.json")
    outside = {"points": [{"first_frame": 0, "coords": [[20, 1]], "visible": [True]}]}
    (tmp_path / "out.json").write_text(json.dumps(outside))
    with pytest.raises(DataError, match="outside"):
        load_track_annotations(tmp_path / "out.json", frame_size=(10, 12))


def test_depth_roundtrip_in_millimeters(tmp_path):
    depth = np.array([[0.0, 1.234], [2.5, 65.535]])
    save_depth(depth, tmp_path / "d.png")
    np.testing.assert_allclose(load_depth(tmp_path / "d.png"), depth, atol=1e-12)
    save_image(np.zeros((2, 2, 3)), tmp_path / "rgb.png")
    with pytest.raises(DataError):
        load_depth(tmp_path / "rgb.png")


def test_articulated_pair_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    pair = ArticulatedPair(
        torch.rand(3, 8, 8), torch.rand(3, 8, 8),
        rng.uniform(0.5, 2, (8, 8)), rng.uniform(0.5, 2, (8, 8)),
        CameraIntrinsics(100.0, 100.0, 3.5, 3.5),
        rng.random((8, 8)) > 0.5,
        RevoluteParams(np.array([0.0, 0.0, 1.0]), np.array([0.1, 0.2, 1.0]), 30.0),
    )
    write_articulated_pair(pair, tmp_path / "inst")
    back = load_articulated_pair(tmp_path / "inst")
    assert back.name == "inst"
    assert np.array_equal(back.part_mask, pair.part_mask)
    np.testing.assert_allclose(back.depth1, np.round(pair.depth1 * 1000) / 1000)
    assert back.params.state == 30.0 and back.intrinsics == pair.intrinsics
    (tmp_path / "inst" / "mask.png").unlink()
    with pytest.raises(DataError, match="mask.png"):
        load_articulated_pair(tmp_path / "inst")
