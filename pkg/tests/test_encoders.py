import numpy as np
import pytest
import torch

from densecorr.encoders import (
    ColorRegionSegmenter,
    CorrespondenceEncoder,
    GridSegmenter,
    HandcraftedSemanticEncoder,
    build_segmenter,
    build_semantic_encoder,
    sine_position_encoding,
)
from densecorr.errors import ConfigError


def test_encoder_shapes_and_size_checks():
    torch.manual_seed(0)
    enc = CorrespondenceEncoder(32, 2, heads=4)
    img = torch.rand(2, 3, 48, 64)
    f1, f2 = enc(img, img.flip(0))
    assert f1.shape == f2.shape == (2, 32, 6, 8)
    with pytest.raises(ValueError):
        enc(torch.rand(1, 3, 30, 32), torch.rand(1, 3, 30, 32))
    with pytest.raises(ValueError):
        enc(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 40, 32))


def test_encoder_is_pair_symmetric():
    """Swapping the inputs swaps the outputs since all weights are shared."""
    torch.manual_seed(1)
    enc = CorrespondenceEncoder(32, 2).eval()
    a, b = torch.rand(2, 1, 3, 32, 32)
    with torch.no_grad():
        f1, f2 = enc(a, b)
        g1, g2 = enc(b, a)
    assert torch.allclose(f1, g2, atol=1e-5) and torch.allclose(f2, g1, atol=1e-5)


def test_cross_attention_mixes_the_pair():
    torch.manual_seed(2)
    enc = CorrespondenceEncoder(32, 2).eval()
    a, b, c = torch.rand(3, 1, 3, 32, 32)
    with torch.no_grad():
        assert not torch.allclose(enc(a, b)[0], enc(a, c)[0])
        one = CorrespondenceEncoder(32, 1).eval()  # self-attention only
        assert torch.allclose(one(a, b)[0], one(a, c)[0])


def test_encoder_parameter_budget():
    enc = CorrespondenceEncoder()
    assert sum(p.numel() for p in enc.parameters()) < 1_000_000


def test_position_encoding_distinguishes_cells():
    pe = sine_position_encoding(4, 5, 16)
    assert pe.shape == (16, 4, 5)
    flat = pe.reshape(16, -1).t()
    assert torch.cdist(flat, flat).add(torch.eye(20) * 10).min() > 1e-3


def test_handcrafted_semantic_encoder_is_frozen_and_sized():
    enc = build_semantic_encoder("handcrafted", channels=24, seed=3)
    assert all(not p.requires_grad for p in enc.parameters())
    imgs = torch.rand(2, 3, 32, 40, requires_grad=True)
    out = enc(imgs)
    assert out.shape == (2, 24, 4, 5) and not out.requires_grad


def test_handcrafted_semantic_encoder_groups_equal_colors():
    enc = HandcraftedSemanticEncoder(position_weight=0.0)
    img = torch.zeros(1, 3, 16, 32)
    img[..., :16] = torch.tensor([0.9, 0.1, 0.1]).view(3, 1, 1)
    img[..., 16:] = torch.tensor([0.1, 0.2, 0.9]).view(3, 1, 1)
    f = torch.nn.functional.normalize(enc(img)[0].reshape(64, -1), dim=0)
    sim = f.t() @ f
    left, right = [0, 1, 4, 5], [2, 3, 6, 7]
    assert sim[left][:, left].min() > 0.999
    assert sim[left][:, right].max() < 0.9


def test_semantic_backend_errors():
    with pytest.raises(ConfigError):
        build_semantic_encoder("nonsense")
    with pytest.raises(ConfigError):
        build_segmenter("pretrained")
    with pytest.raises(ConfigError):
        build_segmenter("nonsense")


def test_color_segmenter_returns_disjoint_components():
    img = np.zeros((16, 16, 3))
    img[:, :8] = [0.9, 0.1, 0.1]
    img[:8, 8:] = [0.1, 0.9, 0.1]
    img[8:, 8:] = [0.9, 0.1, 0.1]  # touches the left half, so it joins that component
    masks = ColorRegionSegmenter(min_area=1)(img)
    assert masks.dtype == bool and masks.shape[1:] == (16, 16)
    assert (masks.sum(0) <= 1).all()
    assert [int(m.sum()) for m in masks] == [192, 64]


def test_segmenter_fallbacks_and_grid():
    masks = ColorRegionSegmenter(min_area=10_000)(np.zeros((8, 8, 3)))
    assert masks.shape == (1, 8, 8) and masks.all()
    grid = GridSegmenter(2, 3)(torch.rand(3, 8, 9))
    assert grid.shape == (6, 8, 9)
    assert (grid.sum(0) == 1).all()
    assert grid[4, 7, 4]
