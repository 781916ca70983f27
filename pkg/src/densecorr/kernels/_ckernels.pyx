# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the non-differentiable inner loops."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def topk_indices(double[:, ::1] scores, Py_ssize_t n):
    cdef Py_ssize_t rows = scores.shape[0]
    cdef Py_ssize_t cols = scores.shape[1]
    cdef Py_ssize_t r, j, k, fill
    cdef double v
    out = np.empty((rows, n), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] idx = out
    cdef double[::1] best = np.empty(n, dtype=np.float64)
    for r in range(rows):
        fill = 0
        for j in range(cols):
            v = scores[r, j]
            if fill == n and v <= best[n - 1]:
                continue
            # buffer is sorted by value descending, earlier index first on ties
            k = fill if fill < n else n - 1
            while k > 0 and best[k - 1] < v:
                best[k] = best[k - 1]
                idx[r, k] = idx[r, k - 1]
                k -= 1
            best[k] = v
            idx[r, k] = j
            if fill < n:
                fill += 1
    return out


cdef Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t i) noexcept nogil:
    cdef Py_ssize_t root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        i, parent[i] = parent[i], root
    return root


cdef void _union(Py_ssize_t[::1] parent, Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    a = _find(parent, a)
    b = _find(parent, b)
    if a < b:
        parent[b] = a
    elif b < a:
        parent[a] = b


def label_components(int[:, ::1] labels):
    cdef Py_ssize_t h = labels.shape[0]
    cdef Py_ssize_t w = labels.shape[1]
    cdef Py_ssize_t y, x, i, root
    cdef int count = 0
    parent_arr = np.arange(h * w, dtype=np.intp)
    cdef Py_ssize_t[::1] parent = parent_arr
    out = np.empty((h, w), dtype=np.int32)
    cdef int[:, ::1] comp = out
    cdef int[::1] remap = np.full(h * w, -1, dtype=np.int32)
    with nogil:
        for y in range(h):
            for x in range(w):
                i = y * w + x
                if x > 0 and labels[y, x - 1] == labels[y, x]:
                    _union(parent, i, i - 1)
                if y > 0 and labels[y - 1, x] == labels[y, x]:
                    _union(parent, i, i - w)
        for y in range(h):
            for x in range(w):
                root = _find(parent, y * w + x)
                if remap[root] < 0:
                    remap[root] = count
                    count += 1
                comp[y, x] = remap[root]
    return out, count


def sample_points(double[:, :, ::1] values, double[:, ::1] points):
    cdef Py_ssize_t h = values.shape[0]
    cdef Py_ssize_t w = values.shape[1]
    cdef Py_ssize_t c = values.shape[2]
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t i, ch, x0, y0, x1, y1
    cdef double x, y, wx, wy, top, bottom
    out = np.empty((n, c), dtype=np.float64)
    cdef double[:, ::1] res = out
    with nogil:
        for i in range(n):
            x = min(max(points[i, 0], 0.0), <double>(w - 1))
            y = min(max(points[i, 1], 0.0), <double>(h - 1))
            x0 = <Py_ssize_t>floor(x)
            y0 = <Py_ssize_t>floor(y)
            if x0 > w - 2:
                x0 = w - 2 if w > 1 else 0
            if y0 > h - 2:
                y0 = h - 2 if h > 1 else 0
            wx = x - x0
            wy = y - y0
            x1 = x0 + 1 if x0 + 1 < w else w - 1
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            for ch in range(c):
                top = values[y0, x0, ch] * (1 - wx) + values[y0, x1, ch] * wx
                bottom = values[y1, x0, ch] * (1 - wx) + values[y1, x1, ch] * wx
                res[i, ch] = top * (1 - wy) + bottom * wy
    return out
