"""Trainable correspondence encoder plus frozen semantic encoders and segmenters."""
from __future__ import annotations

import logging
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import kernels
from .core import FEATURE_STRIDE
from .errors import ConfigError

log = logging.getLogger(__name__)


def sine_position_encoding(h, w, channels, dtype=torch.float32, device=None):
    """2D sinusoidal encoding ``(channels, h, w)``; half the channels per axis."""
    if channels % 4:
        raise ValueError("channels must be divisible by 4 for 2D sine encodings")
    quarter = channels // 4
    freq = torch.exp(
        torch.arange(quarter, dtype=dtype, device=device) * (-math.log(10000.0) / quarter)
    )
    ys = torch.arange(h, dtype=dtype, device=device)[:, None] * freq  # h, q
    xs = torch.arange(w, dtype=dtype, device=device)[:, None] * freq  # w, q
    pe_y = torch.cat([ys.sin(), ys.cos()], dim=1).t()[:, :, None].expand(-1, h, w)
    pe_x = torch.cat([xs.sin(), xs.cos()], dim=1).t()[:, None, :].expand(-1, h, w)
    return torch.cat([pe_x, pe_y], dim=0)


class AttentionBlock(nn.Module):
    """Pre-norm transformer block; ``context is x`` gives self-attention."""

    def __init__(self, channels, heads=4, mlp_ratio=2):
        super().__init__()
        self.norm_q = nn.LayerNorm(channels)
        self.norm_kv = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.norm_mlp = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(
            nn.Linear(channels, mlp_ratio * channels),
            nn.GELU(),
            nn.Linear(mlp_ratio * channels, channels),
        )

    def forward(self, x, context):
        kv = self.norm_kv(context)
        x = x + self.attn(self.norm_q(x), kv, kv, need_weights=False)[0]
        return x + self.mlp(self.norm_mlp(x))


class CorrespondenceEncoder(nn.Module):
    """Stride-8 conv stem followed by alternating self/cross attention.

    Both images share every parameter. Even blocks attend within an image,
    odd blocks attend from each image to the other one.
    """

    def __init__(self, channels=128, blocks=4, heads=4, mlp_ratio=2):
        super().__init__()
        self.channels = channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, channels // 2, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels // 2, channels, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.AvgPool2d(2),
        )
        self.blocks = nn.ModuleList(
            [AttentionBlock(channels, heads, mlp_ratio) for _ in range(blocks)]
        )
        self.out_norm = nn.LayerNorm(channels)
        self.head = nn.Linear(channels, channels)

    def forward(self, img1, img2):
        if img1.shape != img2.shape:
            raise ValueError(f"image shapes differ: {tuple(img1.shape)} vs {tuple(img2.shape)}")
        b, _, H, W = img1.shape
        if H % FEATURE_STRIDE or W % FEATURE_STRIDE:
            raise ValueError(f"image size {H}x{W} is not divisible by {FEATURE_STRIDE}")
        h, w = H // FEATURE_STRIDE, W // FEATURE_STRIDE
        x = self.stem(torch.cat([img1, img2]) - 0.5)
        x = x + sine_position_encoding(h, w, self.channels, x.dtype, x.device)
        x = x.flatten(2).transpose(1, 2)  # 2b, hw, c
        for i, block in enumerate(self.blocks):
            context = x if i % 2 == 0 else torch.cat([x[b:], x[:b]])
            x = block(x, context)
        x = self.head(self.out_norm(x))
        x = x.transpose(1, 2).reshape(2 * b, self.channels, h, w)
        return x[:b], x[b:]


def encode_pair(encoder, img1, img2):
    return encoder(img1, img2)


class SemanticEncoder(nn.Module):
    """Frozen image -> ``(B, c', H/8, W/8)`` feature extractor."""

    out_channels: int

    def extract(self, images):
        raise NotImplementedError

    def forward(self, images):
        with torch.no_grad():
            feats = self.extract(images)
            h, w = images.shape[-2] // FEATURE_STRIDE, images.shape[-1] // FEATURE_STRIDE
            if feats.shape[-2:] != (h, w):
                feats = F.interpolate(feats, size=(h, w), mode="bilinear", align_corners=False)
        return feats.detach()


class HandcraftedSemanticEncoder(SemanticEncoder):
    """Per-cell color statistics and position, randomly projected.

    Each 8x8 cell is described by its mean color, a per-channel color
    histogram and its normalized grid position (scaled by
    ``position_weight``). The description is centered and mapped through a
    fixed Gaussian projection. Nothing here is trained.
    """

    def __init__(self, channels=64, bins=4, position_weight=0.25, seed=0):
        super().__init__()
        self.out_channels = channels
        self.bins = bins
        self.position_weight = position_weight
        raw_dim = 3 + 3 * bins + 2
        gen = torch.Generator().manual_seed(seed)
        proj = torch.randn(raw_dim, channels, generator=gen, dtype=torch.float64) / math.sqrt(channels)
        self.projection = nn.Parameter(proj, requires_grad=False)

    def describe(self, images):
        b, _, H, W = images.shape
        h, w = H // FEATURE_STRIDE, W // FEATURE_STRIDE
        imgs = images.to(torch.float64)
        mean = F.avg_pool2d(imgs, FEATURE_STRIDE) - 0.5
        bin_idx = (imgs.clamp(0, 1) * self.bins).long().clamp(max=self.bins - 1)
        onehot = F.one_hot(bin_idx, self.bins).permute(0, 1, 4, 2, 3).reshape(b, 3 * self.bins, H, W)
        hist = F.avg_pool2d(onehot.to(torch.float64), FEATURE_STRIDE) - 1.0 / self.bins
        ys = torch.linspace(-1, 1, h, dtype=torch.float64) if h > 1 else torch.zeros(1, dtype=torch.float64)
        xs = torch.linspace(-1, 1, w, dtype=torch.float64) if w > 1 else torch.zeros(1, dtype=torch.float64)
        pos = torch.stack(torch.meshgrid(xs, ys, indexing="xy"), dim=0).expand(b, -1, -1, -1)
        return torch.cat([mean, hist, self.position_weight * pos], dim=1)

    def extract(self, images):
        raw = self.describe(images)
        feats = torch.einsum("bdhw,dc->bchw", raw, self.projection)
        return feats.to(images.dtype)


class PretrainedSemanticEncoder(SemanticEncoder):
    """A frozen self-supervised ViT loaded through ``torch.hub``."""

    def __init__(self, repo="facebookresearch/dino:main", model="dino_vits8"):
        super().__init__()
        try:
            self.net = torch.hub.load(repo, model)
        except Exception as exc:  # hub raises a zoo of network/IO errors
            raise ConfigError(f"semantic backend {repo}:{model} unavailable: {exc}") from exc
        self.net.eval().requires_grad_(False)
        self.patch = self.net.patch_embed.patch_size
        self.out_channels = self.net.embed_dim
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def extract(self, images):
        x = (images - self.mean) / self.std
        b, _, H, W = x.shape
        tokens = self.net.get_intermediate_layers(x, n=1)[0][:, 1:]
        return tokens.transpose(1, 2).reshape(b, -1, H // self.patch, W // self.patch)


def build_semantic_encoder(backend="handcrafted", **kwargs) -> SemanticEncoder:
    if backend == "handcrafted":
        enc = HandcraftedSemanticEncoder(**kwargs)
    elif backend == "pretrained":
        enc = PretrainedSemanticEncoder(**kwargs)
    else:
        raise ConfigError(f"unknown semantic.backend {backend!r}")
    return enc.eval().requires_grad_(False)


def semantic_features(encoder: SemanticEncoder, images):
    return encoder(images)


def _as_hwc(image) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu()
        if image.dim() == 4:
            image = image[0]
        image = image.permute(1, 2, 0).numpy()
    return np.asarray(image, dtype=np.float64)


class Segmenter:
    """Frozen region proposer: image -> disjoint boolean masks ``(N, H, W)``."""

    max_regions = 16

    def propose(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, image) -> np.ndarray:
        img = _as_hwc(image)
        masks = self.propose(img)
        if len(masks) == 0:
            return np.ones((1,) + img.shape[:2], dtype=bool)
        return masks[: self.max_regions]


class ColorRegionSegmenter(Segmenter):
    """Connected components of the color-quantized image, largest first."""

    def __init__(self, levels=4, max_regions=16, min_area=16):
        self.levels = levels
        self.max_regions = max_regions
        self.min_area = min_area

    def propose(self, image):
        q = np.clip((image * self.levels).astype(np.int64), 0, self.levels - 1)
        labels = (q[..., 0] * self.levels + q[..., 1]) * self.levels + q[..., 2]
        comp, count = kernels.label_components(labels.astype(np.int32))
        areas = np.bincount(comp.ravel(), minlength=count)
        # stable sort keeps raster order among equal areas
        order = np.argsort(-areas, kind="stable")
        keep = [i for i in order[: self.max_regions] if areas[i] >= self.min_area]
        return np.stack([comp == i for i in keep]) if keep else np.zeros((0,) + comp.shape, bool)


class GridSegmenter(Segmenter):
    """Regular tiles; ignores image content."""

    def __init__(self, rows=2, cols=2):
        self.rows, self.cols = rows, cols
        self.max_regions = rows * cols

    def propose(self, image):
        H, W = image.shape[:2]
        ys = np.minimum(np.arange(H) * self.rows // H, self.rows - 1)
        xs = np.minimum(np.arange(W) * self.cols // W, self.cols - 1)
        tile = ys[:, None] * self.cols + xs[None, :]
        return np.stack([tile == i for i in range(self.rows * self.cols)])


def build_segmenter(backend="color", max_regions=16, **kwargs) -> Segmenter:
    if backend == "color":
        return ColorRegionSegmenter(max_regions=max_regions, **kwargs)
    if backend == "grid":
        seg = GridSegmenter(**kwargs)
        seg.max_regions = min(seg.max_regions, max_regions)
        return seg
    if backend == "pretrained":
        raise ConfigError("segmenter.backend 'pretrained' needs a panoptic model plugged in via Segmenter")
    raise ConfigError(f"unknown segmenter.backend {backend!r}")


def segment(segmenter: Segmenter, image) -> np.ndarray:
    return segmenter(image)
