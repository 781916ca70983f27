"""Pick the image segments most likely to be visible in the other frame."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .core import FEATURE_STRIDE
from .errors import DataError


@dataclass
class VisibleRegionMask:
    mask: np.ndarray  # (H, W) bool
    selected: list = field(default_factory=list)


def max_similarity_map(cost: torch.Tensor, stride: int = FEATURE_STRIDE) -> np.ndarray:
    """Best match score per source cell, block-replicated to image size ``(B, H, W)``."""
    b, h, w = cost.shape[:3]
    best = cost.detach().reshape(b, h, w, -1).amax(dim=-1)
    best = best.repeat_interleave(stride, dim=1).repeat_interleave(stride, dim=2)
    return best.cpu().numpy()


def segment_scores(similarity: np.ndarray, masks: np.ndarray) -> np.ndarray:
    masks = np.asarray(masks, dtype=bool)
    areas = masks.reshape(len(masks), -1 if len(masks) else 0).sum(axis=1)
    if len(masks) == 0 or not areas.any():
        raise DataError("every segment is empty")
    sums = masks.reshape(len(masks), -1 if len(masks) else 0).astype(np.float64) @ similarity.reshape(-1).astype(np.float64)
    scores = np.full(len(masks), -np.inf)
    nonempty = areas > 0
    scores[nonempty] = sums[nonempty] / areas[nonempty]
    return scores


def select_visible_regions(masks: np.ndarray, scores, k: int = 3) -> VisibleRegionMask:
    """Union of the ``k`` best-scoring segments.

    Ties are broken by larger area, then lower index. With one segment or
    fewer the whole image is returned so the losses always have support.
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    masks = np.asarray(masks, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    areas = masks.reshape(len(masks), -1 if len(masks) else 0).sum(axis=1)
    real = np.flatnonzero(areas > 0)
    if len(real) <= 1:
        return VisibleRegionMask(np.ones(masks.shape[1:], dtype=bool), [int(i) for i in real])
    # lexsort: last key is primary
    order = np.lexsort((np.arange(len(masks)), -areas, -scores))
    selected = [int(i) for i in order if areas[i] > 0][:k]
    return VisibleRegionMask(masks[selected].any(axis=0), selected)


def discover_visible_regions(cost: torch.Tensor, segments: list, k: int = 3) -> list:
    """Per batch element: similarity map -> segment scores -> top-k union."""
    sims = max_similarity_map(cost)
    out = []
    for s, masks in zip(sims, segments):
        out.append(select_visible_regions(masks, segment_scores(s, masks), k))
    return out
