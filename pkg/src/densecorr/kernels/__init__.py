"""Hot non-differentiable kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports; set ``DENSECORR_PURE_PYTHON=1``
to force the fallback. Both backends return identical results.

topk_indices(scores, n)
    Per row of a 2D float64 array, the column indices of the ``n`` largest
    entries, ordered by value descending with ties going to the smaller index.
label_components(labels)
    4-connected components of equal-valued pixels in a 2D int32 raster.
    Returns ``(components, count)`` with components numbered in raster order.
sample_points(values, points)
    Edge-clamped bilinear samples of an ``(H, W, C)`` float64 raster at
    ``(N, 2)`` pixel coordinates ``(x, y)``.
"""
import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback

if not os.environ.get("DENSECORR_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback


def topk_indices(scores, n: int) -> np.ndarray:
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if not 1 <= n <= scores.shape[1]:
        raise ValueError(f"n must be in [1, {scores.shape[1]}], got {n}")
    return np.asarray(_impl.topk_indices(scores, int(n)))


def label_components(labels):
    labels = np.ascontiguousarray(labels, dtype=np.int32)
    comp, count = _impl.label_components(labels)
    return np.asarray(comp, dtype=np.int32), int(count)


def sample_points(values, points) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        values = values[..., None]
    values = np.ascontiguousarray(values)
    points = np.ascontiguousarray(np.reshape(points, (-1, 2)), dtype=np.float64)
    if np.isnan(points).any():
        raise FloatingPointError("NaN sampling coordinates")
    return np.asarray(_impl.sample_points(values, points))
