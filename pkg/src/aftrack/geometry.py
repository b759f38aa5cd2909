"""Boxes, the score-grid coordinate mapping, and per-cell training labels.

Coordinates are image pixels throughout (the search-crop frame during
training and tracking).  The regression formulation is anchor-free: each
grid cell inside the groundtruth box regresses its four distances to the
box edges, and classification labels come in two flavors, a binary
center-closeness map and a soft IoU map conditioned on the predicted boxes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import DegenerateInputError, ShapeError, UsageError


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, corner form; center form is derived on demand."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise UsageError(f"inverted box {self.corners()}")

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        if w < 0 or h < 0:
            raise UsageError(f"negative box size ({w}, {h})")
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    @property
    def cx(self) -> float:
        return (self.x0 + self.x1) / 2.0

    @property
    def cy(self) -> float:
        return (self.y0 + self.y1) / 2.0

    @property
    def w(self) -> float:
        return self.x1 - self.x0

    @property
    def h(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    def center(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 for disjoint boxes and for two
    zero-area boxes (union empty by convention)."""
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


@dataclass(frozen=True)
class GridSpec:
    """Mapping between score-map cells and image pixels.

    Cell (i, j) sits at pixel (x, y) = (offset + j*stride, offset + i*stride).
    """

    height: int
    width: int
    stride: int
    offset: float

    @classmethod
    def centered(cls, image_size: int, grid_size: int, stride: int) -> "GridSpec":
        """Grid centered in a square crop of side `image_size`."""
        offset = (image_size - stride * (grid_size - 1)) / 2.0
        return cls(height=grid_size, width=grid_size, stride=stride, offset=offset)

    def xs(self) -> np.ndarray:
        return self.offset + self.stride * np.arange(self.width, dtype=np.float64)

    def ys(self) -> np.ndarray:
        return self.offset + self.stride * np.arange(self.height, dtype=np.float64)

    def coord_maps(self) -> tuple[np.ndarray, np.ndarray]:
        """(X, Y) pixel-coordinate maps of shape (height, width)."""
        X, Y = np.meshgrid(self.xs(), self.ys())
        return X, Y


def feat_to_image(cell: tuple[int, int], grid: GridSpec) -> tuple[float, float]:
    """Pixel coordinate (x, y) of grid cell (i, j)."""
    i, j = cell
    if not (0 <= i < grid.height and 0 <= j < grid.width):
        raise UsageError(f"cell {cell} outside grid {grid.height}x{grid.width}")
    return (grid.offset + j * grid.stride, grid.offset + i * grid.stride)


@dataclass(frozen=True)
class LabelBundle:
    """Per-cell training targets on the score grid.

    `cls_objectaware` depends on the current predictions, so a bundle is
    built in two stages: geometry-only labels first, then
    `with_objectaware` once decoded boxes exist.
    """

    reg_targets: np.ndarray  # (4, H, W) distances l*, t*, r*, b* in pixels
    reg_mask: np.ndarray  # (H, W) 1 inside gt
    cls_regular: np.ndarray  # (H, W) binary center-closeness labels
    cls_neg_mask: np.ndarray  # (H, W) complement of cls_regular
    cls_objectaware: np.ndarray | None = None  # (H, W) soft IoU labels

    def with_objectaware(self, labels: np.ndarray) -> "LabelBundle":
        if labels.shape != self.reg_mask.shape:
            raise ShapeError(
                f"objectaware labels {labels.shape} vs grid {self.reg_mask.shape}"
            )
        return replace(self, cls_objectaware=labels)


def regression_targets(gt: BBox, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Distances (l*, t*, r*, b*) and the in-box mask per cell.

    Containment is boundary-inclusive: a cell exactly on the gt edge is a
    regression sample.
    """
    if gt.area <= 0.0:
        raise DegenerateInputError(f"zero-area gt {gt.corners()}")
    X, Y = grid.coord_maps()
    mask = (X >= gt.x0) & (X <= gt.x1) & (Y >= gt.y0) & (Y <= gt.y1)
    mask = mask.astype(np.float64)
    targets = np.stack([X - gt.x0, Y - gt.y0, gt.x1 - X, gt.y1 - Y])
    targets *= mask
    return targets, mask


def classification_labels_regular(gt: BBox, grid: GridSpec, radius: float) -> np.ndarray:
    """Binary labels: 1 iff the cell lies within `radius` pixels of the
    gt center (Euclidean, inclusive)."""
    if radius <= 0.0:
        raise UsageError(f"radius must be positive, got {radius}")
    X, Y = grid.coord_maps()
    dist2 = (X - gt.cx) ** 2 + (Y - gt.cy) ** 2
    return (dist2 <= radius * radius).astype(np.float64)


def make_labels(gt: BBox, grid: GridSpec, radius: float) -> LabelBundle:
    """Geometry-only label bundle for one training sample.

    Regular positives are restricted to in-box cells so the asymmetric
    sampling premise (classification positives are a subset of regression
    samples) holds even for boxes thinner than the radius.
    """
    reg_targets, reg_mask = regression_targets(gt, grid)
    cls_regular = classification_labels_regular(gt, grid, radius) * reg_mask
    return LabelBundle(
        reg_targets=reg_targets,
        reg_mask=reg_mask,
        cls_regular=cls_regular,
        cls_neg_mask=1.0 - cls_regular,
    )


def objectaware_labels(
    pred_boxes: np.ndarray, gt: BBox, reg_mask: np.ndarray
) -> np.ndarray:
    """Soft labels: IoU of each cell's decoded box against gt, zero outside
    the regression mask."""
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64)
    if pred_boxes.ndim != 3 or pred_boxes.shape[0] != 4:
        raise ShapeError(f"pred_boxes must be (4,H,W), got {pred_boxes.shape}")
    px0, py0, px1, py1 = pred_boxes
    iw = np.minimum(px1, gt.x1) - np.maximum(px0, gt.x0)
    ih = np.minimum(py1, gt.y1) - np.maximum(py0, gt.y0)
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_p = (px1 - px0) * (py1 - py0)
    union = area_p + gt.area - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)
    return np.clip(vals, 0.0, 1.0) * reg_mask


def decode_boxes(reg_pred, grid: GridSpec):
    """Corner-form boxes (x0, y0, x1, y1) per cell from distance maps.

    Accepts a plain array (returns an array) or a graph tensor (returns a
    tensor wired through the graph, used when offsets stay differentiable).
    """
    if isinstance(reg_pred, T.Tensor):
        if reg_pred.data.ndim != 3 or reg_pred.data.shape[0] != 4:
            raise ShapeError(f"reg_pred must be (4,H,W), got {reg_pred.data.shape}")
        if np.any(reg_pred.data < 0.0):
            raise UsageError("decode_boxes: negative distances")
        X, Y = grid.coord_maps()
        Xc, Yc = T.constant(X), T.constant(Y)
        l, t = T.channel(reg_pred, 0), T.channel(reg_pred, 1)
        r, b = T.channel(reg_pred, 2), T.channel(reg_pred, 3)
        return T.stack([
            T.sub(Xc, l),
            T.sub(Yc, t),
            T.add(Xc, r),
            T.add(Yc, b),
        ])
    reg = np.asarray(reg_pred, dtype=np.float64)
    if reg.ndim != 3 or reg.shape[0] != 4:
        raise ShapeError(f"reg_pred must be (4,H,W), got {reg.shape}")
    if np.any(reg < 0.0):
        raise UsageError("decode_boxes: negative distances")
    X, Y = grid.coord_maps()
    return np.stack([X - reg[0], Y - reg[1], X + reg[2], Y + reg[3]])
