"""Cost volume, semantic candidate masking and masked-softmax flow."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import kernels
from .core import make_pixel_grid, upsample_flow
from .errors import InvariantError


def cost_volume(f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
    """All-pairs scaled dot products, ``(B, h, w, h, w)``."""
    if f1.shape[:2] != f2.shape[:2]:
        raise ValueError(f"feature shapes disagree: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    c = f1.shape[1]
    return torch.einsum("bcij,bckl->bijkl", f1, f2) / math.sqrt(c)


def candidate_count(fraction: float, cells: int) -> int:
    return max(1, math.ceil(fraction * cells))


def candidate_mask(fs1: torch.Tensor, fs2: torch.Tensor, fraction: float = 0.01) -> torch.Tensor:
    """Boolean ``(B, h, w, h, w)``: per source cell, the most similar target cells.

    Similarity is cosine between semantic features; exactly
    ``max(1, ceil(fraction * h * w))`` targets are kept per source cell and
    ties go to the smaller row-major target index.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"candidate fraction must lie in (0, 1], got {fraction}")
    if fs1.shape != fs2.shape:
        raise ValueError(f"semantic feature shapes disagree: {tuple(fs1.shape)} vs {tuple(fs2.shape)}")
    b, _, h, w = fs1.shape
    n = candidate_count(fraction, h * w)
    mask = torch.zeros(b, h * w, h * w, dtype=torch.bool)
    if n == h * w:
        mask[:] = True
        return mask.view(b, h, w, h, w).to(fs1.device)
    with torch.no_grad():
        a = F.normalize(fs1.flatten(2).to(torch.float64), dim=1)
        t = F.normalize(fs2.flatten(2).to(torch.float64), dim=1)
        sim = torch.einsum("bcs,bct->bst", a, t).cpu().numpy()
    for i in range(b):
        idx = torch.from_numpy(kernels.topk_indices(sim[i], n))
        mask[i].scatter_(1, idx, True)
    return mask.view(b, h, w, h, w).to(fs1.device)


def masked_softmax(cost: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the target dimensions restricted to ``mask``; zero elsewhere."""
    b, h, w = cost.shape[:3]
    logits = cost.reshape(b, h, w, -1)
    m = mask.reshape(b, h, w, -1)
    if not m.any(dim=-1).all():
        raise InvariantError("a source cell has no matching candidates")
    probs = logits.masked_fill(~m, float("-inf")).softmax(dim=-1)
    return probs.reshape(cost.shape)


def flow_from_distribution(dist: torch.Tensor, grid: torch.Tensor | None = None) -> torch.Tensor:
    """Softargmax flow ``(B, 2, h, w)``: expected target coordinate minus source coordinate."""
    b, h, w = dist.shape[:3]
    if grid is None:
        grid = make_pixel_grid(h, w, dtype=dist.dtype, device=dist.device)
    if grid.shape[:2] != dist.shape[3:]:
        raise ValueError("pixel grid does not match the distribution's target raster")
    totals = dist.reshape(b, h, w, -1).sum(-1)
    if (totals - 1).abs().max() > 1e-3:
        raise InvariantError("matching distribution rows do not sum to one")
    expected = torch.einsum("bijkl,klc->bcij", dist, grid.to(dist.dtype))
    return expected - grid.permute(2, 0, 1).unsqueeze(0).to(dist.dtype)


@dataclass
class FlowPrediction:
    flow: torch.Tensor  # (B, 2, H, W) image pixels
    flow_feat: torch.Tensor  # (B, 2, h, w) feature cells
    cost: torch.Tensor  # (B, h, w, h, w)
    mask: torch.Tensor  # (B, h, w, h, w) bool
    f1: torch.Tensor
    f2: torch.Tensor
    fs1: torch.Tensor
    fs2: torch.Tensor


class CorrespondenceModel(nn.Module):
    """Trainable encoder plus a frozen semantic encoder producing dense flow."""

    def __init__(self, encoder, semantic, candidate_fraction=0.01):
        super().__init__()
        self.encoder = encoder
        self.semantic = semantic
        self.candidate_fraction = candidate_fraction

    def forward(self, img1, img2) -> FlowPrediction:
        f1, f2 = self.encoder(img1, img2)
        fs1 = self.semantic(img1)
        fs2 = self.semantic(img2)
        cost = cost_volume(f1, f2)
        mask = candidate_mask(fs1, fs2, self.candidate_fraction)
        dist = masked_softmax(cost, mask)
        flow_feat = flow_from_distribution(dist)
        return FlowPrediction(upsample_flow(flow_feat), flow_feat, cost, mask, f1, f2, fs1, fs2)


def predict_flow(model: CorrespondenceModel, img1, img2) -> FlowPrediction:
    return model(img1, img2)
