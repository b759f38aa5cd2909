"""Independent reference implementations used to freeze expected test values.

Everything here is written in the most literal form possible (scalar loops,
no vectorization, no shared code with the package) so it can serve as an
oracle for the optimized kernels.  Keep it slow and obvious.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_naive(x, w, b=None, dilation=(1, 1), padding=(0, 0), stride=1):
    """Dilated 2-D convolution by direct summation."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    dh, dw = dilation
    ph, pw = padding
    C, H, W = x.shape
    Cout, _, kh, kw = w.shape
    Ho = (H + 2 * ph - (dh * (kh - 1) + 1)) // stride + 1
    Wo = (W + 2 * pw - (dw * (kw - 1) + 1)) // stride + 1
    out = np.zeros((Cout, Ho, Wo))
    for o in range(Cout):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for p in range(kh):
                    for q in range(kw):
                        yy = i * stride + p * dh - ph
                        xx = j * stride + q * dw - pw
                        if 0 <= yy < H and 0 <= xx < W:
                            for c in range(C):
                                acc += w[o, c, p, q] * x[c, yy, xx]
                out[o, i, j] = acc
                if b is not None:
                    out[o, i, j] += b[o]
    return out


def xcorr_naive(search, kernel):
    """Per-channel valid cross-correlation by direct summation."""
    search = np.asarray(search, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    C, Hs, Ws = search.shape
    _, Hk, Wk = kernel.shape
    Ho = Hs - Hk + 1
    Wo = Ws - Wk + 1
    out = np.zeros((C, Ho, Wo))
    for c in range(C):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for p in range(Hk):
                    for q in range(Wk):
                        acc += search[c, i + p, j + q] * kernel[c, p, q]
                out[c, i, j] = acc
    return out


def bilinear_naive(feature, positions):
    """Bilinear sampling with zero outside the image, one position at a time."""
    feature = np.asarray(feature, dtype=np.float64)
    C, H, W = feature.shape
    positions = np.asarray(positions, dtype=np.float64)
    out = np.zeros((C, len(positions)))
    for n, (y, x) in enumerate(positions):
        y0 = int(np.floor(y))
        x0 = int(np.floor(x))
        ty = y - y0
        tx = x - x0
        for c in range(C):
            acc = 0.0
            for dy, wy in ((0, 1.0 - ty), (1, ty)):
                for dx, wx in ((0, 1.0 - tx), (1, tx)):
                    yy = y0 + dy
                    xx = x0 + dx
                    if 0 <= yy < H and 0 <= xx < W:
                        acc += wy * wx * feature[c, yy, xx]
            out[c, n] = acc
    return out


def aligned_conv_naive(feature, weight, offsets, k):
    """Aligned convolution by per-tap bilinear gathering, cell by cell."""
    feature = np.asarray(feature, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    C, H, W = feature.shape
    Cout = weight.shape[0]
    c = k // 2
    out = np.zeros((Cout, H, W))
    for i in range(H):
        for j in range(W):
            t = 0
            for p in range(k):
                for q in range(k):
                    y = i + (p - c) + offsets[2 * t, i, j]
                    x = j + (q - c) + offsets[2 * t + 1, i, j]
                    sample = bilinear_naive(feature, [(y, x)])[:, 0]
                    for o in range(Cout):
                        acc = 0.0
                        for ch in range(C):
                            acc += weight[o, ch, p, q] * sample[ch]
                        out[o, i, j] += acc
                    t += 1
    return out


def iou_naive(a, b):
    """Scalar IoU of two corner-form boxes (x0, y0, x1, y1)."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def regression_targets_naive(grid_points, box):
    """Per-cell (l, t, r, b) distances and in-box mask, cell by cell.

    grid_points: iterable of (i, j, x, y) image coordinates per cell.
    Returns dict keyed by (i, j) -> (l, t, r, b) for contained cells only;
    containment is boundary-inclusive.
    """
    x0, y0, x1, y1 = box
    out = {}
    for i, j, x, y in grid_points:
        if x0 <= x <= x1 and y0 <= y <= y1:
            out[(i, j)] = (x - x0, y - y0, x1 - x, y1 - y)
    return out


def regular_labels_naive(grid_points, box, radius):
    """Binary center-closeness labels by direct distance test, cell by cell."""
    x0, y0, x1, y1 = box
    cx = (x0 + x1) / 2.0
    cy = (y0 + y1) / 2.0
    out = {}
    for i, j, x, y in grid_points:
        dist = ((x - cx) ** 2 + (y - cy) ** 2) ** 0.5
        out[(i, j)] = 1.0 if dist <= radius else 0.0
    return out

def bce_naive(p, y):
    """Scalar cross entropy with clamped probability."""
    p = min(max(p, 1e-7), 1.0 - 1e-7)
    return -(y * math.log(p) + (1.0 - y) * math.log(1.0 - p))
