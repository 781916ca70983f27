"""Synthetic image pairs with known flow, for desk-scale experiments and tests."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .core import FEATURE_STRIDE


def _upsample_noise(rng, shape, cells, channels):
    coarse = torch.from_numpy(rng.random((1, channels, cells, cells)).astype(np.float32))
    return F.interpolate(coarse, size=shape, mode="bicubic", align_corners=False)[0]


def texture(rng: np.random.Generator, size: int, color_cells=5, detail_cells=None, detail=0.35) -> torch.Tensor:
    """``(3, size, size)`` texture: smooth colour field plus fine luminance detail."""
    detail_cells = detail_cells or max(size // 4, 2)
    color = _upsample_noise(rng, (size, size), color_cells, 3)
    lum = _upsample_noise(rng, (size, size), detail_cells, 1) - 0.5
    img = 0.15 + 0.7 * color + detail * lum
    return img.clamp(0, 1)


class TranslationPairs:
    """Crops of one texture displaced by a random integer translation.

    For pair ``i`` the target crop origin is the source origin plus
    ``shift[i] = (dx, dy)``, so the true flow from source to target is
    ``-shift`` everywhere.
    """

    def __init__(self, count=200, size=256, max_shift=24, seed=0, **texture_kw):
        self.size = size
        self.max_shift = max_shift
        rng = np.random.default_rng(seed)
        margin = max_shift
        src, tgt, shifts = [], [], []
        for _ in range(count):
            big = texture(rng, size + 2 * margin, **texture_kw)
            dx, dy = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
            src.append(big[:, margin : margin + size, margin : margin + size])
            tgt.append(big[:, margin + dy : margin + dy + size, margin + dx : margin + dx + size])
            shifts.append((dx, dy))
        self.src = torch.stack(src)
        self.tgt = torch.stack(tgt)
        self.shifts = np.asarray(shifts, dtype=np.float64)

    def __len__(self):
        return len(self.src)

    def gt_flow_feat(self, i) -> np.ndarray:
        """Feature-grid flow in cells, ``(2,)``; constant over the image."""
        return -self.shifts[i] / FEATURE_STRIDE

    def valid_cells(self, i) -> np.ndarray:
        """``(h, w)`` cells whose true match lies inside the target grid."""
        h = w = self.size // FEATURE_STRIDE
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        fx, fy = self.gt_flow_feat(i)
        tx, ty = xs + fx, ys + fy
        return (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)

    def batch(self, seed: int, step: int, batch_size: int):
        rng = np.random.default_rng([seed, step])
        idx = rng.integers(0, len(self), size=batch_size)
        return self.src[idx], self.tgt[idx]

    def subset(self, indices):
        out = object.__new__(TranslationPairs)
        out.size, out.max_shift = self.size, self.max_shift
        out.src, out.tgt = self.src[indices], self.tgt[indices]
        out.shifts = self.shifts[indices]
        return out


def endpoint_error(flow_feat: torch.Tensor, pairs: TranslationPairs) -> float:
    """Mean feature-grid EPE over cells whose true match is in view."""
    errs = []
    for i in range(len(pairs)):
        gt = torch.as_tensor(pairs.gt_flow_feat(i), dtype=flow_feat.dtype).view(2, 1, 1)
        e = (flow_feat[i] - gt).norm(dim=0)
        errs.append(e[torch.from_numpy(pairs.valid_cells(i))])
    return float(torch.cat(errs).mean())


# Desk-scale experiment: textures with coarse colour blobs so the handcrafted
# semantic features separate regions, and no position term so the candidate
# mask does not hand the answer to the untrained model.
DESK_TEXTURE = {"color_cells": 8, "detail": 0.35}


def desk_config(candidate_fraction=0.01, seed=0, steps=200):
    """Slim model and short schedule that fit a single CPU core."""
    from .config import Config

    cfg = Config()
    cfg.encoder.channels, cfg.encoder.blocks = 64, 2
    cfg.semantic.position_weight = 0.0
    cfg.matching.candidate_fraction = candidate_fraction
    cfg.data.kind = "synthetic"
    cfg.train.steps, cfg.train.batch_size = steps, 4
    cfg.train.lr, cfg.train.warmup_steps = 5e-4, 50
    cfg.train.seed = seed
    cfg.train.checkpoint_every = steps
    cfg.train.determinism = "off"
    return cfg.validate()


def desk_datasets(train_count=200, held_count=50, size=256, max_shift=24):
    train = TranslationPairs(train_count, size, max_shift, seed=100, **DESK_TEXTURE)
    held = TranslationPairs(held_count, size, max_shift, seed=200, **DESK_TEXTURE)
    return train, held


def evaluate_epe(model, pairs: TranslationPairs, chunk=10) -> float:
    """Mean feature-grid EPE of ``model`` on ``pairs``, weighting every valid cell equally."""
    was_training = model.training
    model.eval()
    errs, counts = [], []
    with torch.no_grad():
        for i in range(0, len(pairs), chunk):
            idx = list(range(i, min(i + chunk, len(pairs))))
            part = pairs.subset(idx)
            pred = model(part.src, part.tgt)
            n = int(sum(part.valid_cells(k).sum() for k in range(len(part))))
            errs.append(endpoint_error(pred.flow_feat, part) * n)
            counts.append(n)
    model.train(was_training)
    return float(sum(errs) / sum(counts))


def desk_experiment(cfg, train: TranslationPairs, held: TranslationPairs, eval_every=50):
    """Train on ``train`` and return ``[(step, held-out EPE), ...]`` starting at step 0."""
    from .training import Trainer

    trainer = Trainer(cfg, train)
    curve = [(0, evaluate_epe(trainer.model, held))]

    def record(tr, _):
        if tr.step % eval_every == 0 or tr.step == cfg.train.steps:
            curve.append((tr.step, evaluate_epe(tr.model, held)))

    trainer.run(callback=record)
    return curve


def steps_to_reach(curve, threshold):
    """First evaluated step whose EPE is below ``threshold``; ``None`` if never."""
    for step, epe in curve:
        if epe < threshold:
            return step
    return None
