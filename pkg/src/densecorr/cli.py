"""Command line entry point.

Exit codes: 0 success, 1 data error, 2 configuration or usage error. Failures
also print one JSON error record on stderr.
"""
from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import __version__
from .config import Config, _parse_value, apply_overrides, from_dict, load_config, read_overrides
from .core import flow_to_numpy, read_flow, write_flow
from .datapipe import (
    VideoPairSource,
    index_videos,
    load_articulated_pair,
    load_depth,
    load_image,
    load_intrinsics,
    load_track_annotations,
    resize_short_side,
)
from .errors import ConfigError, DataError, DenseCorrError
from .evaluation import (
    ArticulationParams,
    CorrespondenceSet,
    articulation_errors,
    fit_revolute_joint,
    lift_correspondences,
    plan_action,
    query_correspondence,
    tapvid_metrics,
    tapvid_sets,
)
from .synthetic import TranslationPairs
from .training import Checkpoint, fit, model_from_checkpoint

log = logging.getLogger("densecorr")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _parse_set(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        out[key.strip()] = _parse_value(raw)
    return out


def write_manifest(out_dir: Path, args, cfg: Config, outputs) -> Path:
    """Atomically (re)write the single run manifest of ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": args.command,
        "argv": sys.argv[1:] if args.argv is None else args.argv,
        "config_hash": cfg.hash(),
        "code_version": __version__,
        "seed": args.seed,
        "started_at": dt.datetime.now(dt.timezone.utc).isoformat(),
        "outputs": [str(o) for o in outputs],
    }
    path = out_dir / "manifest.json"
    tmp = out_dir / ".manifest.json.tmp"
    tmp.write_text(json.dumps(record, indent=2))
    os.replace(tmp, path)
    return path


def _resolve_config(args, ckpt: Checkpoint | None = None) -> Config:
    if ckpt is not None:
        cfg = from_dict(ckpt.config)
    else:
        cfg = Config()
    if args.config:
        apply_overrides(cfg, read_overrides(args.config))
    apply_overrides(cfg, _parse_set(args.set))
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _out_dir(out: Path) -> Path:
    return out if out.suffix == "" else out.parent


def _write_json(path: Path, data):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True))


def _load_model(path):
    ckpt = Checkpoint.load(path)
    model, _ = model_from_checkpoint(ckpt)
    return model, ckpt


def _eval_pair(img1, img2, short_side):
    """Resize two ``(3, H, W)`` frames for inference; the second follows the first's output size."""
    a = resize_short_side(img1, short_side)
    b = F.interpolate(img2[None], size=a.shape[-2:], mode="bilinear", align_corners=False, antialias=True)[0]
    return a, b


def _predict(model, img1, img2) -> np.ndarray:
    with torch.no_grad():
        pred = model(img1[None], img2[None])
    return flow_to_numpy(pred.flow)


def cmd_train(args):
    cfg = load_config(args.config, _parse_set(args.set))
    if args.seed is not None:
        cfg.train.seed = args.seed
    out = Path(args.out or cfg.train.out_dir)
    if cfg.data.kind == "synthetic":
        source = TranslationPairs(
            cfg.data.synthetic_pairs, cfg.data.crop_size, cfg.data.synthetic_max_shift, seed=cfg.train.seed
        )
    elif cfg.data.kind == "videos":
        if not cfg.data.root:
            raise ConfigError("data.root is required when data.kind = videos")
        source = VideoPairSource(
            index_videos(cfg.data.root),
            cfg.data.crop_size,
            cfg.data.resize_short_side,
            (cfg.data.interval_min, cfg.data.interval_max),
            cfg.data.shared_crop,
        )
    else:
        raise ConfigError(f"unknown data.kind {cfg.data.kind!r}")
    write_manifest(out, args, cfg, [out / "last.pt", out / "metrics.jsonl"])
    ckpt = fit(cfg, source, out, resume=args.resume)
    print(json.dumps({"step": ckpt.step, **(ckpt.history[-1] if ckpt.history else {})}))


def cmd_infer_flow(args):
    model, ckpt = _load_model(args.ckpt)
    cfg = _resolve_config(args, ckpt)
    out = Path(args.out)
    write_manifest(_out_dir(out), args, cfg, [out])
    img1, img2 = _eval_pair(load_image(args.src), load_image(args.tgt), cfg.eval.short_side)
    write_flow(_predict(model, img1, img2), out)


def _frame_scale(frame_path, short_side):
    with Image.open(frame_path) as im:
        W, H = im.size
    probe = resize_short_side(torch.zeros(1, H, W), short_side)
    return (H, W), (probe.shape[2] / W, probe.shape[1] / H)


def cmd_eval_tapvid(args):
    if bool(args.ckpt) == bool(args.flows):
        raise ConfigError("eval-tapvid needs exactly one of --ckpt or --flows")
    model = ckpt = None
    if args.ckpt:
        model, ckpt = _load_model(args.ckpt)
    cfg = _resolve_config(args, ckpt)
    out = Path(args.out)
    write_manifest(_out_dir(out), args, cfg, [out])
    index = index_videos(args.data)
    sets = []
    for video in index.videos:
        tracks = video.frames[0].parent / "tracks.json"
        if not tracks.is_file():
            log.warning("video %s has no tracks.json; skipped", video.video_id)
            continue
        size, scale = _frame_scale(video.frames[0], cfg.eval.short_side)
        ann = load_track_annotations(tracks, frame_size=size)
        cache = {}

        def flow_for_pair(s, t, video=video):
            if args.flows:
                return read_flow(Path(args.flows) / video.video_id / f"{s}_{t}.dfl1")
            if s not in cache:
                cache.clear()
                cache[s] = load_image(video.frames[s])
            img1, img2 = _eval_pair(cache[s], load_image(video.frames[t]), cfg.eval.short_side)
            flow = _predict(model, img1, img2)
            if args.save_flows:
                d = Path(args.save_flows) / video.video_id
                d.mkdir(parents=True, exist_ok=True)
                write_flow(flow, d / f"{s}_{t}.dfl1")
            return flow

        sets.extend(tapvid_sets(ann, flow_for_pair, scale))
    report = tapvid_metrics(sets, exclude_occluded=cfg.eval.exclude_occluded)
    _write_json(out, report.to_dict())
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "per_threshold"}))


def _resize_nearest(arr, size):
    H, W = size
    return np.asarray(Image.fromarray(arr).resize((W, H), Image.NEAREST))


def _prepare_rgbd(rgb, depth, K, mask, short_side):
    img = resize_short_side(rgb, short_side)
    H, W = rgb.shape[1:]
    h, w = img.shape[1:]
    depth = _resize_nearest(depth.astype(np.float32), (h, w)).astype(np.float64)
    if mask is not None:
        mask = _resize_nearest(mask.astype(np.uint8), (h, w)) > 0
    return img, depth, K.scaled(w / W, h / H), mask


def cmd_eval_articulation(args):
    model, ckpt = _load_model(args.ckpt)
    cfg = _resolve_config(args, ckpt)
    out = Path(args.out)
    write_manifest(_out_dir(out), args, cfg, [out])
    root = Path(args.data)
    subset = root / "subset.txt"
    if subset.is_file():
        names = [line.strip() for line in subset.read_text().splitlines() if line.strip()]
        dirs = [root / n for n in names]
    else:
        dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise DataError(f"no articulated-pair instances under {root}")
    rows, failures = [], []
    for d in dirs:
        pair = load_articulated_pair(d)
        img1, depth1, K, mask = _prepare_rgbd(pair.rgb1, pair.depth1, pair.intrinsics, pair.part_mask, cfg.eval.short_side)
        img2 = F.interpolate(pair.rgb2[None], size=img1.shape[-2:], mode="bilinear", align_corners=False, antialias=True)[0]
        depth2 = _resize_nearest(pair.depth2.astype(np.float32), img1.shape[-2:]).astype(np.float64)
        flow = _predict(model, img1, img2)
        ys, xs = np.nonzero(mask)
        queries = np.stack([xs, ys], axis=1).astype(np.float64)
        cs = CorrespondenceSet(queries, query_correspondence(flow, queries))
        try:
            lifted = lift_correspondences(cs, depth1, depth2, K)
            pred = fit_revolute_joint(lifted.src, lifted.tgt)
        except DataError as exc:
            failures.append({"instance": d.name, "error": str(exc)})
            continue
        gt = ArticulationParams(pair.params.axis, pair.params.pivot, pair.params.state)
        errs = articulation_errors(pred, gt, lifted.src, lifted.tgt)
        rows.append({"instance": d.name, **errs.to_dict(), "dropped": lifted.dropped})
    report = {"instances": rows, "failures": failures}
    for key in ("angle", "pos", "state", "dist", "pos_point_to_line"):
        report[key] = float(np.mean([r[key] for r in rows])) if rows else None
    _write_json(out, report)
    print(json.dumps({k: report[k] for k in ("angle", "pos", "state", "dist")}))


def cmd_plan_action(args):
    model, ckpt = _load_model(args.ckpt)
    cfg = _resolve_config(args, ckpt)
    out = Path(args.out)
    write_manifest(_out_dir(out), args, cfg, [out])
    cur = Path(args.current)
    rgb = load_image(cur / "rgb.png")
    depth = load_depth(cur / "depth.png")
    K = load_intrinsics(cur / "intrinsics.json")
    mask = None
    if (cur / "mask.png").is_file():
        with Image.open(cur / "mask.png") as im:
            mask = np.asarray(im) > 0
        if mask.ndim == 3:
            mask = mask.any(axis=2)
    img1, depth, K, mask = _prepare_rgbd(rgb, depth, K, mask, cfg.eval.short_side)
    goal = load_image(args.goal)
    img2 = F.interpolate(goal[None], size=img1.shape[-2:], mode="bilinear", align_corners=False, antialias=True)[0]
    action = plan_action(_predict(model, img1, img2), depth, K, mask, cfg.eval.action_threshold)
    _write_json(out, action.to_dict())
    print(json.dumps(action.to_dict()))


def cmd_viz(args):
    from .viz import correspondence_overlay, pca_overlay

    cfg = _resolve_config(args)
    out = Path(args.out)
    write_manifest(_out_dir(out), args, cfg, [out])
    src, tgt = load_image(args.src), load_image(args.tgt)
    if args.mode == "pca":
        if not args.ckpt:
            raise ConfigError("viz --mode pca needs --ckpt")
        model, _ = _load_model(args.ckpt)
        with torch.no_grad():
            f1, f2 = model.encoder(src[None], tgt[None])
        img = pca_overlay(src, tgt, f1[0], f2[0])
    else:
        if not args.flow:
            raise ConfigError("viz --mode overlay needs --flow")
        flow = read_flow(args.flow)
        if flow.shape[:2] != tuple(src.shape[1:]):
            src, tgt = _eval_pair(src, tgt, min(flow.shape[:2]))
        img, _ = correspondence_overlay(src, tgt, flow, step=args.step)
    Image.fromarray(img).save(out)


COMMANDS = {
    "train": cmd_train,
    "infer-flow": cmd_infer_flow,
    "eval-tapvid": cmd_eval_tapvid,
    "eval-articulation": cmd_eval_articulation,
    "plan-action": cmd_plan_action,
    "viz": cmd_viz,
}


def build_parser():
    parser = _Parser(prog="densecorr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
        p.add_argument("--out", required=name != "train")
        return p

    p = add("train", "train the correspondence encoder")
    p.add_argument("--resume", default=None)

    p = add("infer-flow", "predict a DFL1 flow file for an image pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)

    p = add("eval-tapvid", "point-tracking metrics on a TAP-Vid style dataset")
    p.add_argument("--ckpt")
    p.add_argument("--flows", help="directory of precomputed <video>/<src>_<tgt>.dfl1 flows")
    p.add_argument("--data", required=True)
    p.add_argument("--save-flows", default=None)

    p = add("eval-articulation", "revolute-joint estimation errors")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)

    p = add("plan-action", "one goal-conditioned manipulation step")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--current", required=True, help="directory with rgb.png, depth.png, intrinsics.json[, mask.png]")
    p.add_argument("--goal", required=True)

    p = add("viz", "correspondence overlay or PCA feature coloring")
    p.add_argument("--flow")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--mode", choices=["overlay", "pca"], default="overlay")
    p.add_argument("--ckpt")
    p.add_argument("--step", type=int, default=16)
    return parser


def _error_record(exc, code):
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    sys.stderr.write(json.dumps(record) + "\n")


def dispatch(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.argv = list(argv) if argv is not None else None
        if args.seed is not None:
            torch.manual_seed(args.seed)
        COMMANDS[args.command](args)
        return 0
    except DenseCorrError as exc:
        _error_record(exc, exc.exit_code)
        return exc.exit_code
    except (FileNotFoundError, OSError) as exc:
        _error_record(exc, 1)
        return 1
    except ValueError as exc:
        _error_record(exc, 1)
        return 1


def main():
    logging.basicConfig(level=os.environ.get("DENSECORR_LOG", "WARNING"))
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
