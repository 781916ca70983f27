"""Self-supervised warping losses and the flow regularizers."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import FEATURE_STRIDE, warp_by_flow
from .errors import TrainingError

log = logging.getLogger(__name__)


def charbonnier(x, eps=1e-3, alpha=0.5):
    """Robust penalty ``(x^2 + eps^2)^alpha``."""
    if eps <= 0:
        raise ValueError("charbonnier eps must be positive")
    return (x * x + eps * eps) ** alpha


def _floor(reference: torch.Tensor, eps, alpha):
    # keeps the graph connected so callers can always backpropagate
    return charbonnier(torch.zeros((), dtype=reference.dtype), eps, alpha) + 0.0 * reference.sum()


def downsample_mask(mask, stride=FEATURE_STRIDE):
    """A cell is kept iff more than half of its pixels are set. ``(..., H, W)`` -> ``(..., h, w)``."""
    m = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask)
    *lead, H, W = m.shape
    h, w = H // stride, W // stride
    blocks = m.reshape(*lead, h, stride, w, stride).to(torch.float64).mean(dim=(-3, -1))
    return blocks > 0.5


def segments_to_labels(masks: np.ndarray, stride=FEATURE_STRIDE) -> np.ndarray:
    """Disjoint ``(N, H, W)`` masks to an ``(h, w)`` label raster, -1 where no segment holds a majority."""
    masks = np.asarray(masks, dtype=bool)
    n, H, W = masks.shape
    h, w = H // stride, W // stride
    share = masks.reshape(n, h, stride, w, stride).mean(axis=(2, 4))
    labels = np.full((h, w), -1, dtype=np.int64)
    if n:
        best = share.argmax(axis=0)
        labels = np.where(share.max(axis=0) > 0.5, best, -1)
    return labels


def _masked_mean_per_item(penalty, mask, eps, alpha):
    """``penalty`` (B, C, H, W), ``mask`` (B, H, W) -> mean of per-item masked means."""
    items = []
    for pen, m in zip(penalty, mask):
        count = int(m.sum())
        if count == 0:
            items.append(_floor(pen, eps, alpha))
        else:
            items.append((pen * m.to(pen.dtype)).sum() / (count * pen.shape[0]))
    return torch.stack(items).mean()


def photometric_loss(img1, img2, flow, mask, eps=1e-3, alpha=0.5):
    """Charbonnier difference between ``img1`` and ``img2`` warped back by ``flow``."""
    mask = torch.as_tensor(mask, device=img1.device).bool()
    warped = warp_by_flow(img2, flow)
    return _masked_mean_per_item(charbonnier(img1 - warped, eps, alpha), mask, eps, alpha)


def feature_metric_loss(fs1, fs2, flow_feat, mask_lowres, eps=1e-3, alpha=0.5):
    """Same as the photometric term on frozen semantic features at feature resolution."""
    mask = torch.as_tensor(mask_lowres, device=fs1.device).bool()
    warped = warp_by_flow(fs2.detach(), flow_feat)
    return _masked_mean_per_item(charbonnier(fs1.detach() - warped, eps, alpha), mask, eps, alpha)


def _safe_norm(v):
    # clamp keeps the gradient finite when two endpoints collapse
    return torch.sqrt((v * v).sum(dim=0).clamp_min(1e-20))


def distance_consistency_loss(flow_feat, labels, eps=1e-3, alpha=0.5, pairs="same_region"):
    """Penalize changes of 4-neighbor distances under the flow.

    ``labels`` is a ``(B, h, w)`` region raster (-1 = unsegmented). With
    ``pairs="same_region"`` a neighbor pair counts when both cells carry the
    same label; ``"any_region"`` accepts any two segmented cells.
    """
    labels = torch.as_tensor(np.asarray(labels) if not isinstance(labels, torch.Tensor) else labels)
    items = []
    for flow, lab in zip(flow_feat, labels):
        terms = []
        for axis in (2, 1):  # horizontal then vertical neighbors
            n = flow.shape[axis]
            a = flow.narrow(axis, 0, n - 1)
            b = flow.narrow(axis, 1, n - 1)
            la = lab.narrow(axis - 1, 0, n - 1)
            lb = lab.narrow(axis - 1, 1, n - 1)
            if pairs == "same_region":
                valid = (la == lb) & (la >= 0)
            elif pairs == "any_region":
                valid = (la >= 0) & (lb >= 0)
            else:
                raise ValueError(f"unknown pair mode {pairs!r}")
            offset = torch.zeros(2, 1, 1, dtype=flow.dtype)
            offset[0 if axis == 2 else 1] = 1.0
            moved = _safe_norm(offset + (b - a))
            d = charbonnier(1.0 - moved, eps, alpha)
            terms.append(d[valid.to(flow.device)])
        terms = torch.cat(terms)
        if terms.numel() == 0:
            log.warning("distance consistency: no neighbor pair inside a common region")
            items.append(_floor(flow, eps, alpha))
        else:
            items.append(terms.mean())
    return torch.stack(items).mean()


def smoothness_loss(flow_feat, eps=1e-3, alpha=0.5):
    """First-order smoothness; only used to reproduce the regularizer ablation."""
    dx = flow_feat[..., :, 1:] - flow_feat[..., :, :-1]
    dy = flow_feat[..., 1:, :] - flow_feat[..., :-1, :]
    per_item = charbonnier(dx, eps, alpha).flatten(1).mean(1) + charbonnier(dy, eps, alpha).flatten(1).mean(1)
    return (per_item / 2).mean()


@dataclass
class LossBreakdown:
    total: torch.Tensor
    photo: torch.Tensor
    feat: torch.Tensor
    dist: torch.Tensor
    counts: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "L": _scalar(self.total),
            "L_p": _scalar(self.photo),
            "L_f": _scalar(self.feat),
            "L_d": _scalar(self.dist),
        }


def _scalar(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def total_loss(photo, feat, dist, weights=(1.0, 1.0, 1.0), counts=None) -> LossBreakdown:
    wp, wf, wd = weights
    total = wp * photo + wf * feat + wd * dist
    parts = {"L_p": photo, "L_f": feat, "L_d": dist, "L": total}
    bad = [k for k, v in parts.items() if not math.isfinite(_scalar(v))]
    if bad:
        raise TrainingError(
            f"non-finite loss terms: {', '.join(bad)}",
            {k: _scalar(v) for k, v in parts.items()} | {"counts": counts or {}},
        )
    return LossBreakdown(total, photo, feat, dist, counts or {})
