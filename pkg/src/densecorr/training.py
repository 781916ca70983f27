"""Optimization loop: forward, visible-region discovery, losses, update, checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .config import Config, from_dict
from .encoders import CorrespondenceEncoder, build_segmenter as _build_segmenter, build_semantic_encoder
from .errors import ConfigError, DataError, TrainingError
from .matching import CorrespondenceModel
from .visibility import discover_visible_regions

log = logging.getLogger(__name__)


def build_model(cfg: Config) -> CorrespondenceModel:
    torch.manual_seed(cfg.train.seed)
    encoder = CorrespondenceEncoder(cfg.encoder.channels, cfg.encoder.blocks, cfg.encoder.heads)
    s = cfg.semantic
    if s.backend == "handcrafted":
        semantic = build_semantic_encoder(
            "handcrafted", channels=s.channels, bins=s.bins, position_weight=s.position_weight, seed=s.seed
        )
    else:
        semantic = build_semantic_encoder(s.backend)
    return CorrespondenceModel(encoder, semantic, cfg.matching.candidate_fraction)


def build_segmenter(cfg: Config):
    seg = cfg.segmenter
    kwargs = {"levels": seg.levels} if seg.backend == "color" else {}
    return _build_segmenter(seg.backend, max_regions=seg.max_regions, **kwargs)


def compute_losses(model, img1, img2, segmenter, cfg: Config, pred=None):
    """Run the model (unless ``pred`` is given) and evaluate all three loss terms."""
    if pred is None:
        for name, img in (("img1", img1), ("img2", img2)):
            if not torch.isfinite(img).all():
                raise TrainingError(f"non-finite values in input {name}", {"input": name})
        pred = model(img1, img2)
    lc = cfg.loss
    eps, alpha = lc.charbonnier_eps, lc.charbonnier_alpha
    segments = [segmenter(img) for img in img1]
    if cfg.visibility.enabled:
        visible = discover_visible_regions(pred.cost, segments, cfg.visibility.top_k)
        mask = np.stack([v.mask for v in visible])
    else:
        mask = np.ones((img1.shape[0],) + tuple(img1.shape[-2:]), dtype=bool)
    mask_t = torch.from_numpy(mask)
    mask_low = L.downsample_mask(mask_t)
    photo = L.photometric_loss(img1, img2, pred.flow, mask_t, eps, alpha)
    feat = L.feature_metric_loss(pred.fs1, pred.fs2, pred.flow_feat, mask_low, eps, alpha)
    if lc.smoothness_ablation:
        dist = L.smoothness_loss(pred.flow_feat, eps, alpha)
    else:
        labels = np.stack([L.segments_to_labels(s) for s in segments])
        dist = L.distance_consistency_loss(pred.flow_feat, labels, eps, alpha, lc.distance_pairs)
    counts = {"photo_pixels": int(mask.sum()), "feat_cells": int(mask_low.sum())}
    w = lc.weights
    return L.total_loss(photo, feat, dist, (w.photo, w.feat, w.dist), counts), pred


def make_optimizer(model, cfg: Config):
    params = [p for p in model.encoder.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)
    warmup = cfg.train.warmup_steps
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda step: min(1.0, (step + 1) / warmup) if warmup > 0 else 1.0
    )
    return opt, sched


def frozen_checksum(model) -> str:
    """Digest of every parameter and buffer outside the trainable encoder."""
    h = hashlib.sha256()
    for name, t in sorted(model.semantic.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def train_step(model, optimizer, scheduler, img1, img2, segmenter, cfg: Config, batch_id=None):
    model.train()
    model.semantic.eval()
    optimizer.zero_grad(set_to_none=True)
    try:
        breakdown, _ = compute_losses(model, img1, img2, segmenter, cfg)
    except TrainingError as exc:
        exc.diagnostics["batch"] = batch_id
        raise
    breakdown.total.backward()
    if cfg.train.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.encoder.parameters(), cfg.train.grad_clip)
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return breakdown


def parameter_payload(state_dict) -> bytes:
    """Canonical bytes of a state dict: sorted names, raw little-endian tensor data."""
    out = bytearray()
    for name in sorted(state_dict):
        t = state_dict[name].detach().cpu().contiguous()
        out += name.encode() + b"\0" + str(t.dtype).encode() + b"\0"
        out += np.asarray(t.shape, dtype="<i8").tobytes()
        out += t.numpy().tobytes()
    return bytes(out)


@dataclass
class Checkpoint:
    encoder_state: dict
    optimizer_state: dict
    scheduler_state: dict
    step: int
    config: dict
    config_hash: str
    history: list = field(default_factory=list)

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(
            {
                "encoder": self.encoder_state,
                "optimizer": self.optimizer_state,
                "scheduler": self.scheduler_state,
                "step": self.step,
                "config": self.config,
                "config_hash": self.config_hash,
                "history": self.history,
            },
            tmp,
        )
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"checkpoint not found: {path}")
        d = torch.load(path, map_location="cpu", weights_only=False)
        return cls(d["encoder"], d["optimizer"], d["scheduler"], d["step"], d["config"], d["config_hash"], d.get("history", []))

    def payload(self) -> bytes:
        return parameter_payload(self.encoder_state)


def checkpoint_steps(total: int, every: int) -> list:
    steps = list(range(every, total + 1, every))
    if not steps or steps[-1] != total:
        steps.append(total)
    return steps


def model_from_checkpoint(ckpt: Checkpoint):
    cfg = from_dict(ckpt.config)
    model = build_model(cfg)
    model.encoder.load_state_dict(ckpt.encoder_state)
    model.eval()
    return model, cfg


class Trainer:
    """Owns model, optimizer and data source for one run."""

    def __init__(self, cfg: Config, source, out_dir=None, segmenter=None):
        self.cfg = cfg.validate()
        self.source = source
        self.out_dir = Path(out_dir) if out_dir else None
        self.model = build_model(cfg)
        self.segmenter = segmenter or build_segmenter(cfg)
        self.optimizer, self.scheduler = make_optimizer(self.model, cfg)
        self.step = 0
        self.history = []
        if cfg.train.determinism == "strict":
            torch.use_deterministic_algorithms(True)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            {k: v.detach().clone() for k, v in self.model.encoder.state_dict().items()},
            self.optimizer.state_dict(),
            self.scheduler.state_dict(),
            self.step,
            self.cfg.to_dict(),
            self.cfg.hash(),
            list(self.history),
        )

    def resume(self, ckpt: Checkpoint):
        if ckpt.config_hash != self.cfg.hash():
            raise ConfigError(
                f"checkpoint config hash {ckpt.config_hash[:12]} does not match the current config "
                f"{self.cfg.hash()[:12]}; resume with the config stored in the checkpoint"
            )
        self.model.encoder.load_state_dict(ckpt.encoder_state)
        self.optimizer.load_state_dict(ckpt.optimizer_state)
        self.scheduler.load_state_dict(ckpt.scheduler_state)
        self.step = ckpt.step
        self.history = list(ckpt.history)

    def run(self, until=None, callback=None) -> Checkpoint:
        tc = self.cfg.train
        until = tc.steps if until is None else min(until, tc.steps)
        saves = set(checkpoint_steps(tc.steps, tc.checkpoint_every))
        log_file = None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_file = open(self.out_dir / "metrics.jsonl", "a")
        try:
            while self.step < until:
                img1, img2 = self.source.batch(tc.seed, self.step, tc.batch_size)
                lr = self.optimizer.param_groups[0]["lr"]
                out = train_step(
                    self.model, self.optimizer, self.scheduler, img1, img2, self.segmenter, self.cfg,
                    batch_id={"seed": tc.seed, "step": self.step},
                )
                self.step += 1
                record = {"step": self.step, **out.as_dict(), "lr": lr}
                self.history.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
                    log_file.flush()
                if callback:
                    callback(self, record)
                if self.out_dir and self.step in saves:
                    ckpt = self.checkpoint()
                    ckpt.save(self.out_dir / f"ckpt_{self.step:06d}.pt")
                    ckpt.save(self.out_dir / "last.pt")
        finally:
            if log_file:
                log_file.close()
        return self.checkpoint()


def fit(cfg: Config, source, out_dir=None, resume=None, until=None, callback=None) -> Checkpoint:
    trainer = Trainer(cfg, source, out_dir)
    if resume is not None:
        trainer.resume(Checkpoint.load(resume) if not isinstance(resume, Checkpoint) else resume)
    return trainer.run(until, callback)
