"""Pure numpy implementations of the kernels, used when the extension is absent."""
import numpy as np
from scipy import ndimage


def topk_indices(scores, n):
    return np.argsort(-scores, axis=1, kind="stable")[:, :n].astype(np.int64)


def label_components(labels):
    h, w = labels.shape
    comp = np.full((h, w), -1, dtype=np.int64)
    offset = 0
    for value in np.unique(labels):
        lab, count = ndimage.label(labels == value)
        comp[lab > 0] = lab[lab > 0] - 1 + offset
        offset += count
    # renumber in raster order of each component's first pixel
    flat = comp.ravel()
    _, first = np.unique(flat, return_index=True)
    order = np.empty(offset, dtype=np.int32)
    order[flat[np.sort(first)]] = np.arange(offset, dtype=np.int32)
    return order[comp], int(offset)


def sample_points(values, points):
    h, w, _ = values.shape
    x = np.clip(points[:, 0], 0, w - 1)
    y = np.clip(points[:, 1], 0, h - 1)
    x0 = np.minimum(np.floor(x), max(w - 2, 0)).astype(np.intp)
    y0 = np.minimum(np.floor(y), max(h - 2, 0)).astype(np.intp)
    wx = (x - x0)[:, None]
    wy = (y - y0)[:, None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = values[y0, x0] * (1 - wx) + values[y0, x1] * wx
    bottom = values[y1, x0] * (1 - wx) + values[y1, x1] * wx
    return top * (1 - wy) + bottom * wy
