"""Per-frame inference: crops, score fusion, penalties, state updates.

A sequence is tracked by computing the exemplar feature once on the first
frame, then on every later frame cropping a search region around the last
known position, fusing the two classification maps, damping implausible
scale jumps, blending a cosine motion prior, and decoding the box at the
winning cell.  An optional online scorer can be fused in before the prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ArtifactError, ConfigError, ShapeError, UsageError
from .geometry import BBox, decode_boxes
from .network import (
    ModelParams,
    backbone_forward,
    classification_heads,
    combine_features,
    preprocess,
    regression_head,
)
from .tensor import Tensor


@dataclass(frozen=True)
class TrackHyper:
    """Inference hyperparameters; all fractions live in [0, 1]."""

    omega: float = 0.07
    k_pen: float = 0.021
    beta: float = 0.7
    omega_online: float = 0.5
    window_weight: float = 0.3
    exemplar_size: int = 64
    search_size: int = 128
    penalty_literal: bool = False

    def __post_init__(self):
        for name in ("omega", "beta", "omega_online", "window_weight"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0,1], got {v}")
        if self.k_pen < 0.0:
            raise ConfigError(f"k_pen must be >= 0, got {self.k_pen}")
        if not (0 < self.exemplar_size < self.search_size):
            raise ConfigError("need 0 < exemplar_size < search_size")


def context_scale(w: float, h: float) -> float:
    """Context-padded square side: sqrt((w+p)(h+p)) with p = (w+h)/2."""
    p = (w + h) / 2.0
    return math.sqrt((w + p) * (h + p))


def crop_resize(frame: np.ndarray, center: tuple[float, float], side: float, out_size: int) -> np.ndarray:
    """Square crop of `side` source pixels around `center`, resized.

    Output pixel u samples the source at (center - side/2) + (u+0.5)*side/n,
    bilinearly; regions outside the frame fade to the per-channel frame mean.
    """
    if side <= 0.0 or not math.isfinite(side):
        raise UsageError(f"crop side must be positive, got {side}")
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim != 3:
        raise ShapeError(f"frame must be (C,H,W), got {f.shape}")
    C, H, W = f.shape
    mean = f.mean(axis=(1, 2))
    step = side / out_size
    xs = (center[0] - side / 2.0) + (np.arange(out_size) + 0.5) * step
    ys = (center[1] - side / 2.0) + (np.arange(out_size) + 0.5) * step
    pos = np.stack(
        [np.repeat(ys, out_size), np.tile(xs, out_size)], axis=1
    )
    plan, _ = T._bilinear_plan((H, W), pos)
    vals = T._bilinear_gather(f, plan)
    # Weight mass lost to out-of-frame neighbors is replaced by the mean, so
    # fully covered samples are untouched and far-outside ones are pure mean.
    coverage = sum(wgt for _, _, wgt, _ in plan)
    vals += mean[:, None] * (1.0 - coverage)
    return vals.reshape(C, out_size, out_size)


def crop_to_frame(c: float, prev_center: float, side: float, out_size: int) -> float:
    """Inverse of the crop map for one coordinate (crop pixels -> frame)."""
    return (prev_center - side / 2.0) + (c + 0.5) * (side / out_size)


def fuse_scores(p_o, p_r, omega: float):
    """Convex combination omega*p_o + (1-omega)*p_r."""
    a = np.asarray(p_o, dtype=np.float64)
    b = np.asarray(p_r, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"score shapes differ: {a.shape} vs {b.shape}")
    return omega * a + (1.0 - omega) * b


def fuse_online(p_onl, p_cls_hat, omega_online: float):
    """Convex combination with an online score map (same contract as fuse_scores)."""
    a = np.asarray(p_onl, dtype=np.float64)
    b = np.asarray(p_cls_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"score shapes differ: {a.shape} vs {b.shape}")
    return omega_online * a + (1.0 - omega_online) * b


def _change(ratio):
    return np.maximum(ratio, 1.0 / ratio)


def penalty(r: float, r_prev: float, s: float, s_prev: float, k_pen: float, literal: bool = False) -> float:
    """Scale-change damping factor.

    The default form exp(-k*(change - 1)) is 1 for an unchanged box and
    decays as the aspect/size change product grows; `literal` switches to
    the positive-exponent variant exp(+k*change) that rewards change
    instead (kept selectable for comparison runs).
    """
    if min(r, r_prev, s, s_prev) <= 0.0:
        raise UsageError("penalty: ratios and sizes must be positive")
    change = _change(r / r_prev) * _change(s / s_prev)
    if literal:
        return math.exp(k_pen * change)
    return math.exp(-k_pen * (change - 1.0))


def _penalty_map(r, r_prev, s, s_prev, k_pen, literal):
    change = _change(r / r_prev) * _change(s / s_prev)
    if literal:
        return np.exp(k_pen * change)
    return np.exp(-k_pen * (change - 1.0))


def smooth_scale(s_new: float, s_prev: float, beta: float) -> float:
    """beta weights the new measurement; 1-beta keeps the previous size."""
    return beta * s_new + (1.0 - beta) * s_prev


def cosine_window(h: int, w: int) -> np.ndarray:
    return np.outer(np.hanning(h), np.hanning(w))


def select_cell(score_map: np.ndarray) -> tuple[int, int]:
    """Row-major argmax; invariant under any positive rescaling of the map."""
    idx = int(np.argmax(score_map))
    return idx // score_map.shape[1], idx % score_map.shape[1]


# An online scorer sees the tracker state, the search crop it will be scored
# against, and the offline map, and returns a map of the same shape.
OnlineProvider = Callable[["TrackerState", np.ndarray, np.ndarray], np.ndarray]


def center_prior_provider(state: "TrackerState", crop: np.ndarray, p_hat: np.ndarray) -> np.ndarray:
    """Toy online scorer: a Gaussian bump at the previous target position.

    The search crop is centered on the previous box by construction, so the
    bump sits at the middle of the score grid (sigma 1.5 cells).
    """
    h, w = p_hat.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * 1.5**2))


ONLINE_PROVIDERS: dict[str, OnlineProvider | None] = {
    "none": None,
    "center": center_prior_provider,
}


@dataclass
class TrackerState:
    """Mutable per-sequence state; params are shared and read-only."""

    params: ModelParams
    hyper: TrackHyper
    exemplar_feature: Tensor
    prev_box: BBox
    prev_ratio: float
    prev_size: float
    provider: OnlineProvider | None = None
    last_scores: np.ndarray | None = None  # final windowed map from the latest step


def _clip_box_to_frame(box: BBox, w: int, h: int) -> BBox:
    x0 = min(max(box.x0, 0.0), float(w))
    x1 = min(max(box.x1, 0.0), float(w))
    y0 = min(max(box.y0, 0.0), float(h))
    y1 = min(max(box.y1, 0.0), float(h))
    return BBox(x0, y0, x1, y1)


def init(frame, box: BBox, params: ModelParams, hyper: TrackHyper | None = None,
         provider: OnlineProvider | None = None) -> TrackerState:
    """Start a sequence: crop the exemplar, compute its feature once."""
    hyper = hyper if hyper is not None else TrackHyper()
    cfg = params.cfg
    if (hyper.exemplar_size, hyper.search_size) != (cfg.exemplar_size, cfg.search_size):
        raise ConfigError(
            f"hyper crop sizes ({hyper.exemplar_size}, {hyper.search_size}) do not "
            f"match the network config ({cfg.exemplar_size}, {cfg.search_size})"
        )
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim != 3 or f.shape[0] != 3:
        raise ShapeError(f"frame must be (3,H,W), got {f.shape}")
    box = _clip_box_to_frame(box, f.shape[2], f.shape[1])
    if box.area == 0.0:
        raise UsageError("init box has zero area inside the frame")

    s_z = context_scale(box.w, box.h)
    crop = crop_resize(f, (box.cx, box.cy), s_z, hyper.exemplar_size)
    with T.no_grad():
        f_e = backbone_forward(T.constant(preprocess(crop)), params)
    return TrackerState(
        params=params,
        hyper=hyper,
        exemplar_feature=f_e,
        prev_box=box,
        prev_ratio=box.w / box.h,
        prev_size=context_scale(box.w, box.h),
        provider=provider,
    )


def _forward_on_crop(state: TrackerState, crop: np.ndarray):
    """Search-side forward pass; returns (p_r, p_o, reg) as plain arrays."""
    with T.no_grad():
        f_s = backbone_forward(T.constant(preprocess(crop)), state.params)
        S = combine_features(state.exemplar_feature, f_s, state.params)
        reg = regression_head(S, state.params)
        p_r, p_o = classification_heads(S, reg, state.params)
    return p_r.data, p_o.data, reg.data


def track_step(state: TrackerState, frame) -> BBox:
    """Advance one frame; updates the state and returns the predicted box."""
    hyper = state.hyper
    cfg = state.params.cfg
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim != 3 or f.shape[0] != 3:
        raise ShapeError(f"frame must be (3,H,W), got {f.shape}")
    frame_h, frame_w = f.shape[1], f.shape[2]

    prev = state.prev_box
    s_z = context_scale(prev.w, prev.h)
    s_x = s_z * (hyper.search_size / hyper.exemplar_size)
    crop = crop_resize(f, (prev.cx, prev.cy), s_x, hyper.search_size)

    p_r, p_o, reg = _forward_on_crop(state, crop)
    p_cls = fuse_scores(p_o, p_r, hyper.omega)

    grid = cfg.grid()
    boxes = decode_boxes(reg, grid)  # crop-pixel corners, (4, H, W)
    scale = s_x / hyper.search_size
    w_map = (boxes[2] - boxes[0]) * scale
    h_map = (boxes[3] - boxes[1]) * scale

    alpha = _penalty_map(
        w_map / h_map,
        state.prev_ratio,
        _context_scale_map(w_map, h_map),
        state.prev_size,
        hyper.k_pen,
        hyper.penalty_literal,
    )
    p_hat = p_cls * alpha

    if state.provider is not None:
        p_onl = np.asarray(state.provider(state, crop, p_hat), dtype=np.float64)
        p_hat = fuse_online(p_onl, p_hat, hyper.omega_online)

    win = cosine_window(*p_hat.shape)
    p_final = (1.0 - hyper.window_weight) * p_hat + hyper.window_weight * win
    state.last_scores = p_final

    i, j = select_cell(p_final)
    cx = crop_to_frame((boxes[0, i, j] + boxes[2, i, j]) / 2.0, prev.cx, s_x, hyper.search_size)
    cy = crop_to_frame((boxes[1, i, j] + boxes[3, i, j]) / 2.0, prev.cy, s_x, hyper.search_size)
    w_new = max(smooth_scale(w_map[i, j], prev.w, hyper.beta), 1.0)
    h_new = max(smooth_scale(h_map[i, j], prev.h, hyper.beta), 1.0)
    cx = min(max(cx, 0.0), float(frame_w - 1))
    cy = min(max(cy, 0.0), float(frame_h - 1))

    out = BBox.from_center(cx, cy, w_new, h_new)
    state.prev_box = out
    state.prev_ratio = out.w / out.h
    state.prev_size = context_scale(out.w, out.h)
    return out


def _context_scale_map(w: np.ndarray, h: np.ndarray) -> np.ndarray:
    p = (w + h) / 2.0
    return np.sqrt((w + p) * (h + p))


def track_sequence(params: ModelParams, frames: Iterable, init_box: BBox,
                   hyper: TrackHyper | None = None,
                   provider: OnlineProvider | None = None) -> list[BBox]:
    """Track a whole sequence; the first output echoes the init box."""
    it = iter(frames)
    try:
        first = next(it)
    except StopIteration:
        raise UsageError("empty sequence")
    state = init(first, init_box, params, hyper, provider)
    out = [state.prev_box]
    for frame in it:
        out.append(track_step(state, frame))
    return out


# ---------------------------------------------------------------------------
# Box logs: one "x0,y0,x1,y1" line per frame, groundtruth and predictions
# share the format.

def write_box_log(path, boxes: Sequence[BBox]) -> None:
    with open(path, "w") as f:
        for b in boxes:
            f.write(f"{b.x0:.10g},{b.y0:.10g},{b.x1:.10g},{b.y1:.10g}\n")


def read_box_log(path) -> list[BBox]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ArtifactError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                x0, y0, x1, y1 = (float(p) for p in parts)
            except ValueError as e:
                raise ArtifactError(f"{path}:{lineno}: {e}") from None
            try:
                out.append(BBox(x0, y0, x1, y1))
            except UsageError as e:
                raise ArtifactError(f"{path}:{lineno}: {e}") from None
    return out
