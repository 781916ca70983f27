"""Correspondence overlays, flow color coding and PCA feature coloring."""
from __future__ import annotations

import numpy as np
import torch
from PIL import Image, ImageDraw


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6).astype(int) % 6
    f = h * 6 - np.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros(h.shape + (3,))
    for k, (r, g, b) in enumerate(choices):
        sel = i == k
        out[sel] = np.stack([r[sel], g[sel], b[sel]], axis=-1)
    return out


def flow_to_color(flow: np.ndarray, max_mag=None) -> np.ndarray:
    """``(H, W, 2)`` flow -> uint8 RGB; hue encodes direction, saturation magnitude."""
    dx, dy = flow[..., 0], flow[..., 1]
    mag = np.hypot(dx, dy)
    max_mag = max_mag or max(float(mag.max()), 1e-9)
    hue = (np.arctan2(-dy, -dx) / (2 * np.pi) + 0.5) % 1.0
    sat = np.clip(mag / max_mag, 0, 1)
    return (255 * _hsv_to_rgb(hue, sat, np.ones_like(hue))).astype(np.uint8)


def color_wheel(size=64) -> np.ndarray:
    r = (size - 1) / 2
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    flow = np.stack([xs - r, ys - r], axis=-1)
    img = flow_to_color(flow, max_mag=r)
    img[np.hypot(xs - r, ys - r) > r] = 255
    return img


def _to_uint8(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().permute(1, 2, 0).numpy()
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return img


def correspondence_pairs(flow: np.ndarray, step=16) -> list:
    """Sparse ``((x1, y1), (x2, y2))`` pairs on a regular grid of source pixels."""
    H, W = flow.shape[:2]
    pairs = []
    for y in range(step // 2, H, step):
        for x in range(step // 2, W, step):
            dx, dy = flow[y, x]
            pairs.append(((float(x), float(y)), (float(x + dx), float(y + dy))))
    return pairs


def correspondence_overlay(src, tgt, flow, step=16):
    """Source and target side by side with correspondence lines, flow coloring below.

    Returns the RGB array and the drawn point pairs.
    """
    src, tgt = _to_uint8(src), _to_uint8(tgt)
    H, W = src.shape[:2]
    canvas = np.full((2 * H, 2 * W, 3), 255, dtype=np.uint8)
    canvas[:H, :W] = src
    canvas[:H, W : W + tgt.shape[1]] = tgt[:H]
    canvas[H:, :W] = flow_to_color(flow)
    wheel = color_wheel(min(H, W))
    canvas[H : H + wheel.shape[0], W : W + wheel.shape[1]] = wheel
    im = Image.fromarray(canvas)
    draw = ImageDraw.Draw(im)
    pairs = correspondence_pairs(flow, step)
    for k, ((x1, y1), (x2, y2)) in enumerate(pairs):
        hue = np.array([(k * 0.618) % 1.0])
        color = tuple(int(c) for c in (255 * _hsv_to_rgb(hue, np.ones(1), np.ones(1)))[0])
        draw.line([(x1, y1), (x2 + W, y2)], fill=color, width=1)
        draw.ellipse([x1 - 2, y1 - 2, x1 + 2, y1 + 2], outline=color)
        draw.ellipse([x2 + W - 2, y2 - 2, x2 + W + 2, y2 + 2], outline=color)
    return np.asarray(im), pairs


def pca_colors(f1: torch.Tensor, f2: torch.Tensor):
    """Project both ``(C, h, w)`` feature maps on their joint top-3 principal axes -> RGB in [0, 1]."""
    c = f1.shape[0]
    x = torch.cat([f1.reshape(c, -1), f2.reshape(c, -1)], dim=1).t().double()
    x = x - x.mean(0)
    _, _, v = torch.linalg.svd(x, full_matrices=False)
    proj = x @ v[:3].t()
    lo, hi = proj.min(0).values, proj.max(0).values
    proj = ((proj - lo) / (hi - lo).clamp_min(1e-12)).float()
    n = f1.shape[1] * f1.shape[2]
    return proj[:n].reshape(*f1.shape[1:], 3).numpy(), proj[n:].reshape(*f2.shape[1:], 3).numpy()


def pca_overlay(src, tgt, f1, f2, alpha=0.6) -> np.ndarray:
    src, tgt = _to_uint8(src), _to_uint8(tgt)
    c1, c2 = pca_colors(f1, f2)
    out = []
    for img, col in ((src, c1), (tgt, c2)):
        H, W = img.shape[:2]
        up = np.asarray(Image.fromarray((col * 255).astype(np.uint8)).resize((W, H), Image.NEAREST))
        out.append((alpha * up + (1 - alpha) * img).astype(np.uint8))
    return np.concatenate(out, axis=1)
