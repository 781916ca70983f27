import math

import numpy as np
import pytest
import torch

from densecorr.errors import TrainingError
from densecorr.losses import (
    charbonnier,
    distance_consistency_loss,
    downsample_mask,
    feature_metric_loss,
    photometric_loss,
    segments_to_labels,
    smoothness_loss,
    total_loss,
)

PSI0 = charbonnier(torch.tensor(0.0, dtype=torch.float64)).item()


def test_charbonnier_values():
    assert PSI0 == pytest.approx(1e-3)
    assert charbonnier(torch.tensor(1.0, dtype=torch.float64)).item() == pytest.approx(1.0000005, abs=1e-9)
    assert charbonnier(torch.tensor(-3.0, dtype=torch.float64)).item() == pytest.approx(math.sqrt(9 + 1e-6))
    with pytest.raises(ValueError):
        charbonnier(torch.tensor(1.0), eps=0.0)


def test_downsample_mask_majority_rule():
    m = np.zeros((16, 16), dtype=bool)
    m[:8, :8] = True
    m[8:, 8:][:4, :] = True  # exactly half of the last cell
    m[:8, 8:][:5, :] = True  # 5/8 rows of the top-right cell
    out = downsample_mask(m)
    assert out.tolist() == [[True, True], [False, False]]


def test_segments_to_labels():
    masks = np.zeros((2, 16, 16), dtype=bool)
    masks[0, :, :8] = True
    masks[1, :, 8:] = True
    masks[1, :8, 8:] = False  # top right cell is unsegmented
    assert segments_to_labels(masks).tolist() == [[0, -1], [0, 1]]


def test_distance_loss_floor_for_any_constant_flow():
    g = torch.Generator().manual_seed(0)
    labels = torch.zeros(2, 6, 7, dtype=torch.long)
    for c in torch.randn(10, 2, generator=g, dtype=torch.float64) * 5:
        flow = c.view(1, 2, 1, 1).expand(2, 2, 6, 7).clone()
        assert distance_consistency_loss(flow, labels).item() == PSI0


def test_distance_loss_uniform_scaling_example():
    # flow = x doubles every neighbor distance: each pair has |1 - 2| = 1
    h, w = 4, 5
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij")
    flow = torch.stack([xs, ys]).unsqueeze(0)
    val = distance_consistency_loss(flow, torch.zeros(1, h, w, dtype=torch.long)).item()
    assert val == pytest.approx(math.sqrt(1 + 1e-6), abs=1e-12)


def test_distance_loss_respects_regions_and_pair_mode():
    h, w = 2, 4
    flow = torch.zeros(1, 2, h, w, dtype=torch.float64)
    flow[0, 0, :, 2:] = 3.0  # the right half moves away
    labels = torch.tensor([[[0, 0, 1, 1], [0, 0, 1, 1]]])
    assert distance_consistency_loss(flow, labels).item() == PSI0
    # across the boundary the horizontal distance grows from 1 to 4: 2 such pairs out of 10
    any_pairs = distance_consistency_loss(flow, labels, pairs="any_region").item()
    expected = (8 * PSI0 + 2 * math.sqrt(9 + 1e-6)) / 10
    assert any_pairs == pytest.approx(expected, abs=1e-12)


def test_distance_loss_no_pairs_gives_floor_with_zero_gradient():
    flow = torch.randn(1, 2, 3, 3, dtype=torch.float64, requires_grad=True)
    labels = -torch.ones(1, 3, 3, dtype=torch.long)
    loss = distance_consistency_loss(flow, labels)
    loss.backward()
    assert loss.item() == PSI0
    assert torch.equal(flow.grad, torch.zeros_like(flow))


def _shifted_pair(dx, dy, size=24, seed=0):
    rng = np.random.default_rng(seed)
    big = torch.from_numpy(rng.random((1, 3, size + 16, size + 16)))
    img1 = big[..., 8:8 + size, 8:8 + size]
    img2 = big[..., 8 - dy:8 - dy + size, 8 - dx:8 - dx + size]
    return img1.contiguous(), img2.contiguous()


def test_photometric_floor_under_true_integer_shift():
    img1, img2 = _shifted_pair(3, -2)
    flow = torch.zeros(1, 2, 24, 24, dtype=torch.float64)
    flow[:, 0], flow[:, 1] = 3.0, -2.0
    interior = torch.zeros(1, 24, 24, dtype=torch.bool)
    interior[:, 4:20, 4:20] = True
    assert photometric_loss(img1, img2, flow, interior).item() == PSI0
    assert photometric_loss(img1, img2, torch.zeros_like(flow), interior).item() > 0.1


def test_photometric_empty_mask_and_per_item_mean():
    img1, img2 = _shifted_pair(1, 0)
    flow = torch.zeros(1, 2, 24, 24, dtype=torch.float64, requires_grad=True)
    loss = photometric_loss(img1, img2, flow, torch.zeros(1, 24, 24, dtype=torch.bool))
    loss.backward()
    assert loss.item() == PSI0 and torch.equal(flow.grad, torch.zeros_like(flow))

    a = torch.zeros(2, 1, 4, 4, dtype=torch.float64)
    b = torch.zeros(2, 1, 4, 4, dtype=torch.float64)
    b[1] = 1.0
    mask = torch.zeros(2, 4, 4, dtype=torch.bool)
    mask[0] = True
    mask[1, 0, 0] = True  # one pixel still weighs half of the batch
    val = photometric_loss(a, b, torch.zeros(2, 2, 4, 4, dtype=torch.float64), mask).item()
    assert val == pytest.approx((PSI0 + math.sqrt(1 + 1e-6)) / 2, abs=1e-12)


def test_feature_metric_uses_detached_features():
    g = torch.Generator().manual_seed(1)
    fs1 = torch.randn(1, 4, 5, 5, generator=g, dtype=torch.float64, requires_grad=True)
    fs2 = torch.randn(1, 4, 5, 5, generator=g, dtype=torch.float64, requires_grad=True)
    flow = torch.zeros(1, 2, 5, 5, dtype=torch.float64, requires_grad=True)
    loss = feature_metric_loss(fs1, fs2, flow, torch.ones(1, 5, 5, dtype=torch.bool))
    loss.backward()
    assert fs1.grad is None and fs2.grad is None
    assert flow.grad is not None and flow.grad.abs().sum() > 0
    assert feature_metric_loss(fs1, fs1, flow, torch.ones(1, 5, 5, dtype=torch.bool)).item() == PSI0


def test_smoothness_floor_and_value():
    flow = torch.full((1, 2, 4, 4), 2.0, dtype=torch.float64)
    assert smoothness_loss(flow).item() == pytest.approx(PSI0)
    ramp = torch.zeros(1, 2, 4, 4, dtype=torch.float64)
    ramp[:, 0] = torch.arange(4.0, dtype=torch.float64)
    # dx: half of the entries step by 1, dy: all zero
    expected = ((math.sqrt(1 + 1e-6) + PSI0) / 2 + PSI0) / 2
    assert smoothness_loss(ramp).item() == pytest.approx(expected, abs=1e-12)


def test_total_loss_weights_and_nan_diagnostics():
    out = total_loss(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(3.0), (1.0, 0.5, 2.0))
    assert out.as_dict() == {"L": 8.0, "L_p": 1.0, "L_f": 2.0, "L_d": 3.0}
    with pytest.raises(TrainingError) as info:
        total_loss(torch.tensor(1.0), torch.tensor(float("nan")), torch.tensor(3.0), counts={"pairs": 4})
    assert "L_f" in str(info.value)
    assert info.value.diagnostics["counts"] == {"pairs": 4}
