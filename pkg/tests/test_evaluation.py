import math

import numpy as np
import pytest

from densecorr.core import CameraIntrinsics
from densecorr.datapipe import PointTrack, TrackAnnotation
from densecorr.errors import DataError, DegenerateMotionError, RankError
from densecorr.evaluation import (
    ArticulationParams,
    CorrespondenceSet,
    articulation_errors,
    fit_revolute_joint,
    fit_rigid,
    lift_correspondences,
    line_distance,
    plan_action,
    query_correspondence,
    rotation_matrix,
    screw_decomposition,
    tapvid_metrics,
    tapvid_sets,
)


def scalar_tapvid(sets, exclude_occluded=False):
    """Loop reference over pooled points."""
    errs, vis_flags = [], []
    for cs in sets:
        for p, g, v in zip(cs.predictions, cs.gt, cs.visible):
            errs.append(math.hypot(p[0] - g[0], p[1] - g[1]))
            vis_flags.append(bool(v))
    n_vis = sum(vis_flags)
    n_occ = len(vis_flags) - n_vis
    ad = sum(e for e, v in zip(errs, vis_flags) if v) / n_vis
    deltas, jacs = [], []
    for t in (1, 2, 4, 8, 16):
        tp = sum(1 for e, v in zip(errs, vis_flags) if v and e < t)
        deltas.append(100.0 * tp / n_vis)
        jacs.append(100.0 * tp / (n_vis + (0 if exclude_occluded else n_occ)))
    return ad, sum(deltas) / 5, sum(jacs) / 5


def test_three_pixel_offset_example():
    q = np.array([[10.0, 10.0], [20.0, 5.0]])
    cs = CorrespondenceSet(q, q + [3.0, 0.0], q, [True, True])
    r = tapvid_metrics([cs])
    assert r.AD == pytest.approx(3.0)
    assert r.delta_avg == pytest.approx(60.0)
    assert r.AJ == pytest.approx(60.0)
    assert r.per_threshold[2]["delta"] == 0.0 and r.per_threshold[4]["delta"] == 100.0


def test_perfect_predictions_and_occlusion_penalty():
    q = np.zeros((4, 2))
    cs = CorrespondenceSet(q, q, q, [True, True, True, False])
    r = tapvid_metrics([cs])
    assert r.AD == 0.0 and r.delta_avg == 100.0
    assert r.AJ == pytest.approx(75.0)
    assert tapvid_metrics([cs], exclude_occluded=True).AJ == 100.0
    assert r.to_dict()["num_occluded"] == 1


def test_metrics_match_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        sets = []
        for _ in range(rng.integers(1, 4)):
            n = int(rng.integers(1, 30))
            gt = rng.uniform(0, 100, (n, 2))
            pred = gt + rng.normal(0, 6, (n, 2))
            vis = rng.random(n) > 0.2
            vis[0] = True
            sets.append(CorrespondenceSet(gt, pred, gt, vis))
        for excl in (False, True):
            r = tapvid_metrics(sets, excl)
            ad, d, aj = scalar_tapvid(sets, excl)
            assert abs(r.AD - ad) < 1e-9 and abs(r.delta_avg - d) < 1e-9 and abs(r.AJ - aj) < 1e-9


def test_metric_errors():
    with pytest.raises(DataError):
        tapvid_metrics([])
    q = np.zeros((2, 2))
    with pytest.raises(DataError):
        tapvid_metrics([CorrespondenceSet(q, q, q, [False, False])])
    with pytest.raises(ValueError):
        CorrespondenceSet(q, [[np.nan, 0], [0, 0]], q)


def test_query_correspondence():
    flow = np.zeros((4, 5, 2))
    flow[..., 0] = np.arange(5)[None, :]
    out = query_correspondence(flow, [[1.5, 2.0], [4.0, 0.0]])
    np.testing.assert_allclose(out, [[3.0, 2.0], [8.0, 0.0]])
    with pytest.raises(ValueError, match="outside"):
        query_correspondence(flow, [[5.0, 0.0]])


def test_tapvid_sets_scale_and_pairs():
    coords = np.array([[0.0, 0.0], [2.0, 0.0], [4.0, 0.0]])
    ann = TrackAnnotation("v", [PointTrack(0, coords, np.array([True, True, False]))], (8, 8))
    seen = []

    def flow_for_pair(s, t):
        seen.append((s, t))
        f = np.zeros((16, 16, 2))
        f[..., 0] = 4.0 * (t - s)
        return f

    sets = tapvid_sets(ann, flow_for_pair, scale=(2.0, 2.0))
    assert seen == [(0, 1), (0, 2)]
    np.testing.assert_allclose(sets[0].queries, [[0.5, 0.5]])
    np.testing.assert_allclose(sets[0].gt, [[4.5, 0.5]])
    np.testing.assert_allclose(sets[0].predictions, [[4.5, 0.5]])
    assert list(sets[1].visible) == [False]
    r = tapvid_metrics(sets)
    assert r.AD == 0.0 and r.AJ == pytest.approx(50.0)


def test_lift_drops_invalid_depth():
    K = CameraIntrinsics(100.0, 100.0, 2.0, 2.0)
    d1 = np.ones((5, 5))
    d2 = np.ones((5, 5)) * 2
    d2[0, 0] = 0.0
    cs = CorrespondenceSet([[2, 2], [1, 1]], [[2, 2], [0, 0]])
    lifted = lift_correspondences(cs, d1, d2, K)
    assert lifted.dropped == 1 and list(lifted.kept) == [0]
    np.testing.assert_allclose(lifted.src, [[0, 0, 1]])
    np.testing.assert_allclose(lifted.tgt, [[0, 0, 2]])
    with pytest.raises(DataError):
        lift_correspondences(CorrespondenceSet([[1, 1]], [[0, 0]]), d1, d2, K)


def test_fit_rigid_recovers_transform_and_rejects_bad_input():
    rng = np.random.default_rng(1)
    src = rng.normal(size=(30, 3))
    R = rotation_matrix([1.0, 2.0, 3.0], 40.0)
    t = np.array([0.3, -1.0, 2.0])
    R2, t2 = fit_rigid(src, src @ R.T + t)
    np.testing.assert_allclose(R2, R, atol=1e-10)
    np.testing.assert_allclose(t2, t, atol=1e-10)
    assert np.linalg.det(R2) == pytest.approx(1.0)
    line = np.outer(np.linspace(0, 1, 10), [1.0, 2.0, 3.0])
    with pytest.raises(RankError):
        fit_rigid(line, line)
    with pytest.raises(RankError):
        fit_rigid(src[:2], src[:2])


def test_reflection_is_not_returned():
    rng = np.random.default_rng(2)
    src = rng.normal(size=(20, 3))
    R, _ = fit_rigid(src, src * [1, 1, -1])
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_revolute_example_thirty_degrees():
    gt = ArticulationParams([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], 30.0)
    rng = np.random.default_rng(3)
    src = rng.uniform(-1, 1, (50, 3))
    pred = fit_revolute_joint(src, gt.apply(src))
    np.testing.assert_allclose(pred.axis, [0, 0, 1], atol=1e-9)
    np.testing.assert_allclose(pred.pivot, [1, 0, 0], atol=1e-9)
    assert pred.state == pytest.approx(30.0)
    err = articulation_errors(pred, gt, src, pred.apply(src))
    assert err.angle < 1e-6 and err.pos < 1e-9 and err.state < 1e-9 and err.dist < 1e-9


def test_negative_rotation_flips_axis_not_state():
    gt = ArticulationParams([0.0, 1.0, 0.0], [0.0, 0.0, 2.0], -45.0)
    src = np.random.default_rng(4).normal(size=(25, 3))
    pred = fit_revolute_joint(src, gt.apply(src))
    np.testing.assert_allclose(pred.axis, [0, -1, 0], atol=1e-9)
    assert pred.state == pytest.approx(45.0)
    assert articulation_errors(pred, gt, src, pred.apply(src)).state == pytest.approx(0.0, abs=1e-9)


def test_degenerate_rotation_raises():
    with pytest.raises(DegenerateMotionError):
        screw_decomposition(rotation_matrix([0, 0, 1], 0.2), np.zeros(3))


def test_error_examples():
    gt = ArticulationParams([0.0, 0.0, 1.0], [0.0, 0.0, 0.0], 10.0)
    tilted = ArticulationParams([math.sqrt(0.5), 0.0, math.sqrt(0.5)], [0.0, 0.0, 0.0], 20.0)
    src = np.eye(3)
    err = articulation_errors(tilted, gt, src, gt.apply(src))
    assert err.angle == pytest.approx(45.0)
    assert err.state == pytest.approx(10.0)
    assert err.dist == 0.0
    shifted = ArticulationParams([0.0, 0.0, -1.0], [0.0, 0.5, 7.0], -10.0)
    err2 = articulation_errors(shifted, gt, src, gt.apply(src) + [0.0, 0.0, 0.1])
    assert err2.angle == pytest.approx(0.0) and err2.state == pytest.approx(0.0, abs=1e-12)
    assert err2.pos == pytest.approx(0.5) and err2.dist == pytest.approx(0.1)
    assert line_distance([0, 0, 0], [1, 0, 0], [0, 0, 2], [0, 1, 0]) == pytest.approx(2.0)


def test_articulation_params_validation():
    with pytest.raises(ValueError):
        ArticulationParams([0.0, 0.0, 2.0], [0, 0, 0], 10.0)
    with pytest.raises(ValueError):
        ArticulationParams([0.0, 0.0, 1.0], [0, 0, 0], -180.0)


def test_plan_action_examples():
    K = CameraIntrinsics(100.0, 100.0, 2.0, 2.0)
    depth = np.full((5, 5), 2.0)
    flow = np.zeros((5, 5, 2))
    assert plan_action(flow, depth, K).done
    flow[3, 1] = [5.0, 0.0]
    flow[0, 0] = [0.0, 10.0]
    act = plan_action(flow, depth, K)
    assert not act.done and act.pixel.tolist() == [0.0, 0.0]
    np.testing.assert_allclose(act.displacement, [0.0, 0.2, 0.0])
    mask = np.ones((5, 5), bool)
    mask[0, 0] = False
    act = plan_action(flow, depth, K, mask=mask)
    assert act.pixel.tolist() == [1.0, 3.0] and act.target_pixel.tolist() == [6.0, 3.0]
    np.testing.assert_allclose(act.grasp, [-0.02, 0.02, 2.0])
    np.testing.assert_allclose(act.displacement, [0.1, 0.0, 0.0])
    depth[3, 1] = 0.0
    assert plan_action(flow, depth, K, mask=mask).done
    with pytest.raises(DataError):
        plan_action(flow, np.zeros((5, 5)), K)
