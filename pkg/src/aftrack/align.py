"""Box-driven sampling offsets and the aligned convolution.

A regular k x k convolution reads a fixed footprint around each output
cell.  The aligned convolution instead spreads its taps uniformly over the
box predicted at that cell, so the feature it extracts summarizes the whole
candidate object rather than a fixed neighborhood.  Offsets are the
difference between those box-conditioned tap positions and the regular
footprint, expressed in feature-grid units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import NumericError, ShapeError, UsageError
from .tensor import Tensor, _acc, _bilinear_gather, _bilinear_plan, _bilinear_pos_grad, _bilinear_scatter, _check_finite, _make


@dataclass
class OffsetField:
    """Per-cell, per-tap (dy, dx) displacements, shape (2*k*k, H, W).

    Channel layout is tap-major in row-major tap order: channel 2*t is the
    y displacement of tap t and 2*t+1 its x displacement.
    """

    offsets: Tensor | np.ndarray
    kernel_size: int

    @property
    def data(self) -> np.ndarray:
        return self.offsets.data if isinstance(self.offsets, Tensor) else self.offsets

    @classmethod
    def zeros(cls, k: int, height: int, width: int) -> "OffsetField":
        return cls(np.zeros((2 * k * k, height, width)), kernel_size=k)


def _tap_fractions(k: int) -> np.ndarray:
    """Per-tap scale of the box extent: tap q sits at fraction[q] * size
    from the box center.  Uniform lattice over [-1/2, 1/2]."""
    if k == 1:
        return np.zeros(1)
    return np.arange(k, dtype=np.float64) / (k - 1) - 0.5


def compute_offsets(pred_boxes, k: int) -> OffsetField:
    """Offsets realizing the box-conditioned sampling lattice.

    `pred_boxes` is (4, H, W) center-form (cx, cy, w, h) in feature-grid
    units.  For cell (i, j) and tap (p, q), the new sample position is
    (cy + frac[p]*h, cx + frac[q]*w) and the offset is that position minus
    the regular tap position (i + p - c, j + q - c).

    A graph tensor input keeps the offsets differentiable (the coupled
    variant); a plain array input produces detached offsets.
    """
    if k < 1 or k % 2 == 0:
        raise UsageError(f"kernel size must be odd and positive, got {k}")
    c = k // 2
    frac = _tap_fractions(k)

    if isinstance(pred_boxes, Tensor):
        if pred_boxes.data.ndim != 3 or pred_boxes.data.shape[0] != 4:
            raise ShapeError(f"pred_boxes must be (4,H,W), got {pred_boxes.data.shape}")
        if not np.all(np.isfinite(pred_boxes.data)):
            raise NumericError("compute_offsets: non-finite boxes")
        if np.any(pred_boxes.data[2:] < 0.0):
            raise UsageError("compute_offsets: negative box size")
        _, H, W = pred_boxes.data.shape
        J, I = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
        cx, cy = T.channel(pred_boxes, 0), T.channel(pred_boxes, 1)
        w, h = T.channel(pred_boxes, 2), T.channel(pred_boxes, 3)
        parts = []
        for p in range(k):
            for q in range(k):
                base_y = T.constant(I + (p - c))
                base_x = T.constant(J + (q - c))
                dy = T.sub(T.add(cy, T.scale(h, frac[p])), base_y)
                dx = T.sub(T.add(cx, T.scale(w, frac[q])), base_x)
                parts.extend([dy, dx])
        return OffsetField(T.stack(parts), kernel_size=k)

    boxes = np.asarray(pred_boxes, dtype=np.float64)
    if boxes.ndim != 3 or boxes.shape[0] != 4:
        raise ShapeError(f"pred_boxes must be (4,H,W), got {boxes.shape}")
    if not np.all(np.isfinite(boxes)):
        raise NumericError("compute_offsets: non-finite boxes")
    if np.any(boxes[2:] < 0.0):
        raise UsageError("compute_offsets: negative box size")
    cx, cy, w, h = boxes
    _, H, W = boxes.shape
    J, I = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    out = np.empty((2 * k * k, H, W))
    t = 0
    for p in range(k):
        for q in range(k):
            out[2 * t] = cy + frac[p] * h - (I + (p - c))
            out[2 * t + 1] = cx + frac[q] * w - (J + (q - c))
            t += 1
    return OffsetField(out, kernel_size=k)


def aligned_conv(feature: Tensor, weight: Tensor, offsets: OffsetField) -> Tensor:
    """Convolution whose taps are displaced per cell by `offsets`.

    Output keeps the input's spatial size (implicit zero padding of k//2,
    realized by the sampler's zero-outside convention).  With all-zero
    offsets this reproduces conv2d with dilation (1,1) and same padding,
    term for term.  Gradients flow to feature and weight always, and to the
    offsets only when they were built as a graph tensor.
    """
    if feature.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeError(
            f"aligned_conv: got feature {feature.data.shape}, weight {weight.data.shape}"
        )
    C, H, W = feature.data.shape
    Cout, Cin, kh, kw = weight.data.shape
    k = offsets.kernel_size
    if Cin != C:
        raise ShapeError(f"aligned_conv: feature has {C} channels, weight expects {Cin}")
    if kh != k or kw != k:
        raise ShapeError(f"aligned_conv: weight kernel {kh}x{kw} vs offsets for k={k}")
    off_data = offsets.data
    if off_data.shape != (2 * k * k, H, W):
        raise ShapeError(
            f"aligned_conv: offsets {off_data.shape}, expected {(2 * k * k, H, W)}"
        )
    _check_finite(off_data, "aligned_conv offsets")

    off_t = offsets.offsets if isinstance(offsets.offsets, Tensor) else None
    c = k // 2
    # An all-zero detached field degenerates to the fixed sampling lattice.
    # Dispatching to the dense kernel makes that identity exact by
    # construction; matching it through BLAS would be at the mercy of
    # alignment-dependent kernel selection.  The coupled path never takes
    # this branch so offset gradients are never silently dropped.
    if off_t is None and not off_data.any():
        return T.conv2d(feature, weight, padding=(c, c))
    n = H * W
    J, I = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    base_i = I.ravel()
    base_j = J.ravel()

    out = np.zeros((Cout, n), dtype=feature.data.dtype)
    taps = []
    t = 0
    for p in range(k):
        for q in range(k):
            ys = base_i + (p - c) + off_data[2 * t].ravel()
            xs = base_j + (q - c) + off_data[2 * t + 1].ravel()
            plan, fr = _bilinear_plan((H, W), np.column_stack([ys, xs]))
            vals = _bilinear_gather(feature.data, plan)
            out += weight.data[:, :, p, q] @ vals
            taps.append((p, q, t, plan, fr, vals))
            t += 1
    out = out.reshape(Cout, H, W)
    _check_finite(out, "aligned_conv")

    def bw(g):
        gflat = g.reshape(Cout, n)
        gw = np.zeros_like(weight.data) if weight.requires_grad else None
        gf = np.zeros_like(feature.data) if feature.requires_grad else None
        goff = np.zeros_like(off_data) if (off_t is not None and off_t.requires_grad) else None
        for p, q, t, plan, fr, vals in taps:
            if gw is not None:
                gw[:, :, p, q] = gflat @ vals.T
            if gf is None and goff is None:
                continue
            gvals = weight.data[:, :, p, q].T @ gflat
            if gf is not None:
                _bilinear_scatter(gf, plan, gvals)
            if goff is not None:
                gy, gx = _bilinear_pos_grad(feature.data, plan, fr, gvals)
                goff[2 * t] = gy.reshape(H, W)
                goff[2 * t + 1] = gx.reshape(H, W)
        if gw is not None:
            _acc(weight, gw)
        if gf is not None:
            _acc(feature, gf)
        if goff is not None:
            _acc(off_t, goff)

    parents = (feature, weight) if off_t is None else (feature, weight, off_t)
    return _make(out, parents, bw)
