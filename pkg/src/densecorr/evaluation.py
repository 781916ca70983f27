"""Point-correspondence metrics, revolute-joint estimation and action planning."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import CameraIntrinsics, backproject
from .errors import DataError, DegenerateMotionError, RankError

log = logging.getLogger(__name__)

THRESHOLDS = (1, 2, 4, 8, 16)
MIN_ROTATION_DEG = 0.5


def query_correspondence(flow: np.ndarray, queries) -> np.ndarray:
    """Move ``(N, 2)`` source pixels along an ``(H, W, 2)`` flow, sampled bilinearly."""
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    H, W = flow.shape[:2]
    inside = (queries[:, 0] >= 0) & (queries[:, 0] <= W - 1) & (queries[:, 1] >= 0) & (queries[:, 1] <= H - 1)
    if not inside.all():
        raise ValueError(f"{int((~inside).sum())} query points fall outside the {W}x{H} source frame")
    return queries + kernels.sample_points(flow, queries)


@dataclass
class CorrespondenceSet:
    queries: np.ndarray
    predictions: np.ndarray
    gt: np.ndarray | None = None
    visible: np.ndarray | None = None

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.float64).reshape(-1, 2)
        self.predictions = np.asarray(self.predictions, dtype=np.float64).reshape(-1, 2)
        n = len(self.queries)
        if len(self.predictions) != n:
            raise ValueError("queries and predictions differ in length")
        if not np.isfinite(self.predictions).all():
            raise ValueError("predictions must be finite")
        if self.gt is not None:
            self.gt = np.asarray(self.gt, dtype=np.float64).reshape(-1, 2)
            self.visible = (
                np.ones(n, dtype=bool) if self.visible is None else np.asarray(self.visible, dtype=bool).reshape(-1)
            )
            if len(self.gt) != n or len(self.visible) != n:
                raise ValueError("ground truth and visibility must match the queries in length")


@dataclass
class MetricCounts:
    """Additive sufficient statistics, so per-video results merge exactly."""

    visible: int = 0
    occluded: int = 0
    error_sum: float = 0.0
    within: dict = field(default_factory=lambda: {t: 0 for t in THRESHOLDS})

    def __add__(self, other):
        return MetricCounts(
            self.visible + other.visible,
            self.occluded + other.occluded,
            self.error_sum + other.error_sum,
            {t: self.within[t] + other.within[t] for t in THRESHOLDS},
        )


@dataclass
class MetricReport:
    AD: float
    delta_avg: float
    AJ: float
    per_threshold: dict
    num_visible: int = 0
    num_occluded: int = 0

    def to_dict(self):
        return {
            "AD": self.AD,
            "delta_avg": self.delta_avg,
            "AJ": self.AJ,
            "per_threshold": {str(t): v for t, v in self.per_threshold.items()},
            "num_visible": self.num_visible,
            "num_occluded": self.num_occluded,
        }


def tapvid_counts(cs: CorrespondenceSet) -> MetricCounts:
    if cs.gt is None:
        raise DataError("correspondence set has no ground truth")
    err = np.linalg.norm(cs.predictions - cs.gt, axis=1)
    vis = cs.visible
    e = err[vis]
    return MetricCounts(
        int(vis.sum()), int((~vis).sum()), float(e.sum()), {t: int((e < t).sum()) for t in THRESHOLDS}
    )


def report_from_counts(c: MetricCounts, exclude_occluded=False) -> MetricReport:
    if c.visible == 0:
        raise DataError("no visible ground-truth points to evaluate")
    fp = 0 if exclude_occluded else c.occluded
    per = {}
    for t in THRESHOLDS:
        tp = c.within[t]
        fn = c.visible - tp
        per[t] = {"delta": 100.0 * tp / c.visible, "jaccard": 100.0 * tp / (tp + fn + fp)}
    return MetricReport(
        AD=c.error_sum / c.visible,
        delta_avg=float(np.mean([per[t]["delta"] for t in THRESHOLDS])),
        AJ=float(np.mean([per[t]["jaccard"] for t in THRESHOLDS])),
        per_threshold=per,
        num_visible=c.visible,
        num_occluded=c.occluded,
    )


def tapvid_metrics(sets, exclude_occluded=False) -> MetricReport:
    """Pooled TAP-Vid metrics.

    Every prediction counts as visible, so ground-truth-occluded points are
    false positives unless ``exclude_occluded`` drops them.
    """
    sets = list(sets)
    if not sets:
        raise DataError("empty evaluation set")
    total = MetricCounts()
    for cs in sets:
        total = total + tapvid_counts(cs)
    return report_from_counts(total, exclude_occluded)


def tapvid_sets(annotation, flow_for_pair, scale=(1.0, 1.0)) -> list:
    """One correspondence set per (source frame, later frame) pair.

    ``flow_for_pair(src, tgt)`` returns the ``(H, W, 2)`` flow at evaluation
    resolution; ``scale = (sx, sy)`` maps annotation pixels onto it.
    """
    sx, sy = scale

    def to_eval(xy):
        return np.stack([(xy[..., 0] + 0.5) * sx - 0.5, (xy[..., 1] + 0.5) * sy - 0.5], axis=-1)

    by_source = {}
    for p in annotation.evaluable():
        by_source.setdefault(p.first_frame, []).append(p)
    sets = []
    for src in sorted(by_source):
        points = by_source[src]
        n_frames = len(points[0].coords)
        queries = to_eval(np.stack([p.coords[src] for p in points]))
        for tgt in range(src + 1, n_frames):
            flow = flow_for_pair(src, tgt)
            H, W = flow.shape[:2]
            q = np.clip(queries, 0, [W - 1, H - 1])
            sets.append(
                CorrespondenceSet(
                    q,
                    query_correspondence(flow, q),
                    to_eval(np.stack([p.coords[tgt] for p in points])),
                    np.array([p.visible[tgt] for p in points]),
                )
            )
    return sets


def _depth_at(depth, pts):
    H, W = depth.shape
    ij = np.round(pts).astype(np.int64)
    inside = (ij[:, 0] >= 0) & (ij[:, 0] < W) & (ij[:, 1] >= 0) & (ij[:, 1] < H)
    d = np.zeros(len(pts))
    d[inside] = depth[ij[inside, 1], ij[inside, 0]]
    return d


@dataclass
class LiftedPairs:
    src: np.ndarray
    tgt: np.ndarray
    kept: np.ndarray  # indices into the input set
    dropped: int


def lift_correspondences(cs: CorrespondenceSet, depth1, depth2, K: CameraIntrinsics) -> LiftedPairs:
    """Back-project query/prediction pairs using nearest-pixel depth; invalid depth is dropped."""
    d1 = _depth_at(np.asarray(depth1, dtype=np.float64), cs.queries)
    d2 = _depth_at(np.asarray(depth2, dtype=np.float64), cs.predictions)
    ok = (d1 > 0) & (d2 > 0) & np.isfinite(d1) & np.isfinite(d2)
    if not ok.any():
        raise DataError(f"all {len(ok)} correspondences lack valid depth")
    kept = np.flatnonzero(ok)
    if len(kept) < len(ok):
        log.info("dropped %d of %d correspondences with invalid depth", len(ok) - len(kept), len(ok))
    return LiftedPairs(
        backproject(cs.queries[kept], d1[kept], K),
        backproject(cs.predictions[kept], d2[kept], K),
        kept,
        int(len(ok) - len(kept)),
    )


@dataclass
class ArticulationParams:
    axis: np.ndarray
    pivot: np.ndarray
    state: float  # degrees

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=np.float64)
        self.pivot = np.asarray(self.pivot, dtype=np.float64)
        if abs(np.linalg.norm(self.axis) - 1.0) > 1e-9:
            raise ValueError("axis must be a unit vector")
        if not -180.0 < self.state <= 180.0:
            raise ValueError(f"state {self.state} outside (-180, 180]")

    def transform(self):
        R = rotation_matrix(self.axis, self.state)
        return R, self.pivot - R @ self.pivot

    def apply(self, points):
        R, t = self.transform()
        return np.asarray(points) @ R.T + t


def rotation_matrix(axis, degrees) -> np.ndarray:
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    th = math.radians(degrees)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(th) * k + (1 - math.cos(th)) * (k @ k)


def fit_rigid(src, tgt):
    """Least-squares ``R, t`` with ``tgt ~ R @ src + t`` and ``det(R) = +1``."""
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("expected two (N, 3) point arrays of equal shape")
    if len(src) < 3:
        raise RankError(f"need at least 3 point pairs, got {len(src)}")
    mu_s, mu_t = src.mean(0), tgt.mean(0)
    A, B = src - mu_s, tgt - mu_t
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise RankError("source points are collinear; rotation is not determined")
    U, _, Vt = np.linalg.svd(A.T @ B)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, mu_t - R @ mu_s


def screw_decomposition(R, t) -> ArticulationParams:
    """Axis, pivot and angle of a rotation about a fixed line.

    Translation along the axis is not representable by a revolute joint and
    is discarded by the minimum-norm pivot solve.
    """
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    cos_th = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    w, vecs = np.linalg.eig(R)
    axis = np.real(vecs[:, np.argmin(np.abs(w - 1.0))])
    axis /= np.linalg.norm(axis)
    if axis @ v < 0:
        axis = -axis
    theta = math.degrees(math.atan2(0.5 * (axis @ v), cos_th))
    if theta < MIN_ROTATION_DEG:
        raise DegenerateMotionError(f"rotation of {theta:.3f} deg is too small to locate a joint axis")
    pivot = np.linalg.pinv(np.eye(3) - R, rcond=1e-10) @ t
    pivot -= (pivot @ axis) * axis
    return ArticulationParams(axis, pivot, float(theta))


def fit_revolute_joint(src3d, tgt3d) -> ArticulationParams:
    return screw_decomposition(*fit_rigid(src3d, tgt3d))


@dataclass
class ArticulationErrors:
    angle: float  # degrees
    pos: float  # meters, line-to-line
    state: float  # degrees
    dist: float  # meters
    pos_point_to_line: float = 0.0

    def to_dict(self):
        return {
            "angle": self.angle,
            "pos": self.pos,
            "state": self.state,
            "dist": self.dist,
            "pos_point_to_line": self.pos_point_to_line,
        }


def line_distance(p1, a1, p2, a2) -> float:
    cross = np.cross(a1, a2)
    n = np.linalg.norm(cross)
    diff = np.asarray(p2) - np.asarray(p1)
    if n < 1e-12:
        return float(np.linalg.norm(np.cross(diff, a1)))
    return float(abs(diff @ cross) / n)


def point_line_distance(point, p, a) -> float:
    return float(np.linalg.norm(np.cross(np.asarray(point) - p, a)))


def articulation_errors(pred: ArticulationParams, gt: ArticulationParams, src3d, pred_tgt3d) -> ArticulationErrors:
    cos = float(np.clip(abs(pred.axis @ gt.axis), 0.0, 1.0))
    angle = math.degrees(math.acos(cos))
    pred_state = pred.state if pred.axis @ gt.axis >= 0 else -pred.state
    ds = (pred_state - gt.state + 180.0) % 360.0 - 180.0
    moved = gt.apply(src3d)
    dist = float(np.linalg.norm(moved - np.asarray(pred_tgt3d), axis=1).mean())
    return ArticulationErrors(
        angle,
        line_distance(pred.pivot, pred.axis, gt.pivot, gt.axis),
        abs(ds),
        dist,
        point_line_distance(gt.pivot, pred.pivot, pred.axis),
    )


@dataclass
class Action:
    done: bool
    grasp: np.ndarray | None = None
    displacement: np.ndarray | None = None
    pixel: np.ndarray | None = None
    target_pixel: np.ndarray | None = None

    def to_dict(self):
        if self.done:
            return {"done": True}
        return {
            "done": False,
            "grasp": self.grasp.tolist(),
            "displacement": self.displacement.tolist(),
            "pixel": self.pixel.tolist(),
            "target_pixel": self.target_pixel.tolist(),
        }


def plan_action(flow, depth, K: CameraIntrinsics, mask=None, threshold=3.0) -> Action:
    """Grasp where the current->goal correspondence moves the most.

    The goal depth is taken equal to the current depth at the grasp pixel.
    Returns ``Action(done=True)`` once the largest displacement is below
    ``threshold`` pixels.
    """
    flow = np.asarray(flow, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    valid = (depth > 0) & np.isfinite(depth)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        raise DataError("no pixel with valid depth to act on")
    mag = np.linalg.norm(flow, axis=-1)
    mag = np.where(valid, mag, -np.inf)
    y, x = np.unravel_index(np.argmax(mag), mag.shape)
    if mag[y, x] < threshold:
        return Action(done=True)
    d = depth[y, x]
    pix = np.array([x, y], dtype=np.float64)
    tgt = pix + flow[y, x]
    grasp = backproject(pix, d, K)
    return Action(False, grasp, backproject(tgt, d, K) - grasp, pix, tgt)
