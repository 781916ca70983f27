"""Dataset indexing, frame-pair sampling, cropping and annotation loading.

Video layout::

    <root>/<video_id>/<frame_number>.<ext>
    <root>/<video_id>/meta          # {"fps": 30}  (a bare number also works)
    <root>/<video_id>/tracks.json   # optional point tracks for evaluation

Articulated-pair layout (one directory per instance)::

    rgb1.png rgb2.png               # 8-bit RGB
    depth1.png depth2.png           # 16-bit, millimeters
    intrinsics.json                 # {"fx", "fy", "cx", "cy"}
    mask.png                        # moving part, nonzero = inside
    params.json                     # {"axis": [3], "pivot": [3], "state": degrees}
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core import CameraIntrinsics
from .errors import DataError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".ppm"}
DEPTH_SCALE = 1000.0


@dataclass
class Video:
    video_id: str
    frames: list
    fps: float

    def __len__(self):
        return len(self.frames)


@dataclass
class VideoIndex:
    videos: list = field(default_factory=list)

    def __len__(self):
        return len(self.videos)

    def __getitem__(self, i):
        return self.videos[i]


def _read_fps(meta: Path) -> float:
    text = meta.read_text().strip()
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        raise DataError(f"{meta}: cannot parse fps from {text!r}")
    fps = value.get("fps") if isinstance(value, dict) else value
    if not isinstance(fps, (int, float)) or not fps > 0:
        raise DataError(f"{meta}: fps must be a positive number, got {fps!r}")
    return float(fps)


def index_videos(root) -> VideoIndex:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    videos, offenders = [], []
    for vdir in sorted(p for p in root.iterdir() if p.is_dir()):
        frames = []
        for f in vdir.iterdir():
            if f.name in ("meta", "tracks.json") or f.is_dir():
                continue
            if f.suffix.lower() not in IMAGE_EXTENSIONS or not f.stem.isdigit():
                log.warning("skipping non-frame file %s", f)
                continue
            frames.append(f)
        frames.sort(key=lambda p: int(p.stem))
        meta = vdir / "meta"
        if not frames or not meta.is_file():
            offenders.append(vdir.name)
            continue
        videos.append(Video(vdir.name, frames, _read_fps(meta)))
    if offenders:
        raise DataError(f"videos without frames or meta: {', '.join(offenders)}")
    if not videos:
        raise DataError(f"no videos under {root}")
    return VideoIndex(videos)


def load_image(path) -> torch.Tensor:
    """RGB file -> ``(3, H, W)`` float tensor in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(img, path) -> None:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().permute(1, 2, 0).numpy()
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def resize_short_side(img: torch.Tensor, short: int, multiple: int = 8) -> torch.Tensor:
    """Resize ``(C, H, W)`` so the shorter side is ``short``; both sides snap to ``multiple``."""
    _, H, W = img.shape
    scale = short / min(H, W)
    h = max(multiple, int(round(H * scale / multiple)) * multiple)
    w = max(multiple, int(round(W * scale / multiple)) * multiple)
    if (h, w) == (H, W):
        return img
    return F.interpolate(img[None], size=(h, w), mode="bilinear", align_corners=False, antialias=True)[0]


def frame_gap_bounds(fps: float, interval=(1.0, 3.0)) -> tuple:
    lo = int(math.floor(interval[0] * fps))
    hi = int(math.floor(interval[1] * fps))
    return max(lo, 1), max(hi, 1)


def sample_gap(video: Video, rng: np.random.Generator, interval=(1.0, 3.0)) -> tuple:
    """Uniform start frame and frame gap for a pair; ``DataError`` if the video is too short."""
    lo, hi = frame_gap_bounds(video.fps, interval)
    if len(video) <= lo:
        raise DataError(f"video {video.video_id} has {len(video)} frames, needs more than {lo}")
    gap = int(rng.integers(lo, min(hi, len(video) - 1) + 1))
    start = int(rng.integers(0, len(video) - gap))
    return start, gap


def sample_pair(video: Video, rng: np.random.Generator, interval=(1.0, 3.0)):
    start, gap = sample_gap(video, rng, interval)
    return load_image(video.frames[start]), load_image(video.frames[start + gap])


def random_crop_pair(img1, img2, size: int, rng: np.random.Generator, shared: bool = False):
    """Crop both frames to ``size`` x ``size``; offsets are independent unless ``shared``."""
    if size % 8:
        raise ValueError(f"crop size {size} is not divisible by 8")
    out = []
    offset = None
    for img in (img1, img2):
        _, H, W = img.shape
        if size > H or size > W:
            raise ValueError(f"crop size {size} exceeds frame {H}x{W}")
        if offset is None or not shared:
            offset = (int(rng.integers(0, H - size + 1)), int(rng.integers(0, W - size + 1)))
        y, x = offset
        out.append(img[:, y : y + size, x : x + size])
    return tuple(out)


class VideoPairSource:
    """Deterministic training batches from a video index; batch ``step`` depends only on ``(seed, step)``."""

    def __init__(self, index: VideoIndex, crop_size=256, short_side=288, interval=(1.0, 3.0), shared_crop=False):
        self.index = index
        self.crop_size = crop_size
        self.short_side = short_side
        self.interval = interval
        self.shared_crop = shared_crop

    def batch(self, seed: int, step: int, batch_size: int):
        rng = np.random.default_rng([seed, step])
        pairs = []
        attempts = 0
        while len(pairs) < batch_size:
            attempts += 1
            if attempts > 100 * batch_size:
                raise DataError("no video is long enough for the configured interval")
            video = self.index[int(rng.integers(len(self.index)))]
            try:
                i1, i2 = sample_pair(video, rng, self.interval)
            except DataError:
                continue
            i1 = resize_short_side(i1, self.short_side)
            i2 = resize_short_side(i2, self.short_side)
            pairs.append(random_crop_pair(i1, i2, self.crop_size, rng, self.shared_crop))
        return torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs])


@dataclass
class PointTrack:
    first_frame: int
    coords: np.ndarray  # (T, 2) pixels
    visible: np.ndarray  # (T,) bool


@dataclass
class TrackAnnotation:
    video_id: str
    points: list
    size: tuple = None  # (H, W) of the annotated frames, if recorded

    def evaluable(self):
        return [p for p in self.points if p.visible.any()]


def load_track_annotations(path, frame_size=None) -> TrackAnnotation:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not isinstance(data, dict) or not isinstance(data.get("points"), list):
        raise DataError(f"{path}: missing 'points' list")
    size = tuple(data["size"]) if "size" in data else frame_size
    points = []
    for i, p in enumerate(data["points"]):
        where = f"{path}: points[{i}]"
        try:
            coords = np.asarray(p["coords"], dtype=np.float64)
            visible = np.asarray(p["visible"], dtype=bool)
            first = int(p["first_frame"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{where}: {exc}") from exc
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise DataError(f"{where}.coords: expected a list of (x, y) pairs")
        if visible.shape != (len(coords),):
            raise DataError(f"{where}.visible: length {visible.shape} != {len(coords)} frames")
        if not 0 <= first < len(coords):
            raise DataError(f"{where}.first_frame: {first} out of range")
        if size is not None:
            H, W = size
            c = coords[visible]
            if np.any((c < 0) | (c[:, :1] > W - 1) | (c[:, 1:] > H - 1)):
                raise DataError(f"{where}.coords: visible point outside {W}x{H} frame")
        points.append(PointTrack(first, coords, visible))
    return TrackAnnotation(data.get("video_id", path.parent.name), points, size)


def write_track_annotations(ann: TrackAnnotation, path) -> None:
    data = {
        "video_id": ann.video_id,
        "points": [
            {"first_frame": p.first_frame, "coords": p.coords.tolist(), "visible": p.visible.tolist()}
            for p in ann.points
        ],
    }
    if ann.size is not None:
        data["size"] = list(ann.size)
    Path(path).write_text(json.dumps(data))


@dataclass
class RevoluteParams:
    axis: np.ndarray
    pivot: np.ndarray
    state: float  # degrees


@dataclass
class ArticulatedPair:
    rgb1: torch.Tensor
    rgb2: torch.Tensor
    depth1: np.ndarray  # meters, 0 = invalid
    depth2: np.ndarray
    intrinsics: CameraIntrinsics
    part_mask: np.ndarray
    params: RevoluteParams
    name: str = ""


def load_depth(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype not in (np.uint16, np.int32, np.uint32) and im.mode not in ("I;16", "I"):
        raise DataError(f"{path}: depth must be a 16-bit raster, got mode {im.mode}")
    return arr.astype(np.float64) / DEPTH_SCALE


def save_depth(depth_m: np.ndarray, path) -> None:
    mm = np.clip(np.round(np.asarray(depth_m) * DEPTH_SCALE), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def load_intrinsics(path) -> CameraIntrinsics:
    try:
        d = json.loads(Path(path).read_text())
        return CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def load_articulated_pair(directory) -> ArticulatedPair:
    d = Path(directory)
    for name in ("rgb1.png", "rgb2.png", "depth1.png", "depth2.png", "intrinsics.json", "mask.png", "params.json"):
        if not (d / name).is_file():
            raise DataError(f"{d}: missing {name}")
    try:
        p = json.loads((d / "params.json").read_text())
        axis = np.asarray(p["axis"], dtype=np.float64)
        pivot = np.asarray(p["pivot"], dtype=np.float64)
        state = float(p["state"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{d / 'params.json'}: {exc}") from exc
    if axis.shape != (3,) or pivot.shape != (3,):
        raise DataError(f"{d / 'params.json'}: axis and pivot must be 3-vectors")
    if abs(np.linalg.norm(axis) - 1) > 1e-6:
        raise DataError(f"{d / 'params.json'}.axis: not unit norm")
    with Image.open(d / "mask.png") as im:
        mask = np.asarray(im) > 0
    if mask.ndim == 3:
        mask = mask.any(axis=2)
    return ArticulatedPair(
        load_image(d / "rgb1.png"),
        load_image(d / "rgb2.png"),
        load_depth(d / "depth1.png"),
        load_depth(d / "depth2.png"),
        load_intrinsics(d / "intrinsics.json"),
        mask,
        RevoluteParams(axis, pivot, state),
        d.name,
    )


def write_articulated_pair(pair: ArticulatedPair, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_image(pair.rgb1, d / "rgb1.png")
    save_image(pair.rgb2, d / "rgb2.png")
    save_depth(pair.depth1, d / "depth1.png")
    save_depth(pair.depth2, d / "depth2.png")
    K = pair.intrinsics
    (d / "intrinsics.json").write_text(json.dumps({"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy}))
    Image.fromarray(pair.part_mask.astype(np.uint8) * 255).save(d / "mask.png")
    pr = pair.params
    (d / "params.json").write_text(
        json.dumps({"axis": list(map(float, pr.axis)), "pivot": list(map(float, pr.pivot)), "state": pr.state})
    )
