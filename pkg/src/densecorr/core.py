"""Geometric primitives: pixel grids, bilinear sampling, warping, flow
upsampling, pinhole back-projection and the DFL1 flow file format.

Tensor layout follows torch conventions: rasters are ``(B, C, H, W)`` and
flows are ``(B, 2, H, W)`` holding ``(dx, dy)`` in pixels of the raster they
live on. Pixel ``(x, y)`` has its center at integer coordinates, x to the
right and y downward. Flow files and annotation I/O use channel-last numpy
arrays ``(H, W, 2)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DataError, FormatError

FEATURE_STRIDE = 8
FLOW_MAGIC = b"DFL1"


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DataError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not all(np.isfinite([self.fx, self.fy, self.cx, self.cy])):
            raise DataError("intrinsics must be finite")

    def scaled(self, sx: float, sy: float) -> "CameraIntrinsics":
        """Intrinsics after resizing the image by ``(sx, sy)``."""
        # pixel centers at integers: u' + 0.5 = (u + 0.5) * s
        return CameraIntrinsics(
            self.fx * sx, self.fy * sy, (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5
        )


def make_pixel_grid(h: int, w: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Return an ``(h, w, 2)`` tensor with ``grid[y, x] == (x, y)``."""
    if h < 1 or w < 1:
        raise ValueError(f"grid dimensions must be positive, got ({h}, {w})")
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=device),
        torch.arange(w, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack([xs, ys], dim=-1)


def bilinear_sample(values: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample ``values`` (B, C, H, W) at ``coords`` (B, ..., 2).

    Coordinates are in pixels of ``values``; queries outside the raster are
    clamped to the edge. The result has shape ``(B, C, ...)`` and is
    differentiable with respect to both ``values`` and ``coords``.
    """
    if torch.isnan(coords).any():
        raise FloatingPointError("NaN sampling coordinates")
    b, c, h, w = values.shape
    query_shape = coords.shape[1:-1]
    pts = coords.reshape(b, -1, 2)
    x = pts[..., 0].clamp(0, w - 1)
    y = pts[..., 1].clamp(0, h - 1)
    # the lower corner stops one short of the edge so that x == w - 1 maps
    # onto weight 1 of the last column instead of indexing past it
    x0 = x.detach().floor().clamp(max=max(w - 2, 0))
    y0 = y.detach().floor().clamp(max=max(h - 2, 0))
    wx = x - x0
    wy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = values.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).unsqueeze(1).expand(b, c, -1)
        return flat.gather(2, idx)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    out = top * (1 - wy) + bottom * wy
    return out.reshape(b, c, *query_shape)


def warp_by_flow(values: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward warp: ``out[y, x] = values at (x, y) + flow[y, x]``.

    With ``values = I2`` and the flow ``I1 -> I2`` this reconstructs ``I1``.
    """
    if values.shape[-2:] != flow.shape[-2:] or flow.shape[1] != 2:
        raise ValueError(
            f"flow {tuple(flow.shape)} does not match raster {tuple(values.shape)}"
        )
    h, w = flow.shape[-2:]
    grid = make_pixel_grid(h, w, dtype=flow.dtype, device=flow.device)
    coords = grid.unsqueeze(0) + flow.permute(0, 2, 3, 1)
    return bilinear_sample(values, coords)


def upsample_flow(flow: torch.Tensor, stride: int = FEATURE_STRIDE) -> torch.Tensor:
    """Bilinearly upsample a feature-grid flow and convert it to image pixels."""
    if stride != FEATURE_STRIDE:
        raise ValueError(f"only stride {FEATURE_STRIDE} is supported, got {stride}")
    h, w = flow.shape[-2:]
    up = F.interpolate(flow, size=(h * stride, w * stride), mode="bilinear", align_corners=False)
    return up * stride


def backproject(pixels, depth, K: CameraIntrinsics) -> np.ndarray:
    """Lift pixel coordinates ``(..., 2)`` with metric depth to camera-frame points."""
    pixels = np.asarray(pixels, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise DataError("back-projection needs strictly positive depth")
    u, v = pixels[..., 0], pixels[..., 1]
    return np.stack([(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, depth], axis=-1)


def project(points, K: CameraIntrinsics) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    return np.stack([K.fx * points[..., 0] / z + K.cx, K.fy * points[..., 1] / z + K.cy], axis=-1)


def flow_to_numpy(flow: torch.Tensor) -> np.ndarray:
    """``(1, 2, H, W)`` or ``(2, H, W)`` tensor to an ``(H, W, 2)`` float32 array."""
    if flow.dim() == 4:
        if flow.shape[0] != 1:
            raise ValueError("expected a single flow field")
        flow = flow[0]
    return flow.detach().permute(1, 2, 0).cpu().numpy().astype(np.float32)


def flow_from_numpy(flow: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(flow)).permute(2, 0, 1).unsqueeze(0)


def write_flow(flow: np.ndarray, path) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    payload = np.ascontiguousarray(flow, dtype="<f4").tobytes()
    Path(path).write_bytes(FLOW_MAGIC + struct.pack("<II", h, w) + payload)


def read_flow(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FLOW_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {FLOW_MAGIC!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    h, w = struct.unpack("<II", raw[4:12])
    expected = h * w * 2 * 4
    payload = raw[12:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: header says {h}x{w} ({h * w * 2} floats) but payload holds "
            f"{len(payload) / 4:g} floats"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, 2).copy()
