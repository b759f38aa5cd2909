"""Deterministic synthetic sequences: a textured target moving over a
static blotchy background, with optional distractors, occlusion windows,
and pixel noise.  Everything derives from one seed, so a config is a
complete, byte-reproducible description of its sequence.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArtifactError, ConfigError
from .geometry import BBox
from .tracker import read_box_log, write_box_log

_EDGE_MARGIN = 2.0
_MIN_SIZE = 8.0


@dataclass(frozen=True)
class SyntheticSceneConfig:
    frame_size: int = 160
    length: int = 40
    target_kind: str = "rect"  # or "ellipse"
    target_w: float = 28.0
    target_h: float = 36.0
    velocity: tuple[float, float] = (0.0, 0.0)
    scale_drift: float = 0.0  # per-frame multiplicative size change
    start: tuple[float, float] | None = None  # None: seeded random placement
    distractors: int = 0
    occlusion: tuple[int, int] | None = None  # (first frame, length)
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.frame_size < 32:
            raise ConfigError(f"frame_size too small: {self.frame_size}")
        if self.length < 1:
            raise ConfigError("length must be >= 1")
        if self.target_kind not in ("rect", "ellipse"):
            raise ConfigError(f"unknown target_kind {self.target_kind!r}")
        limit = self.frame_size - 2.0 * _EDGE_MARGIN
        if self.target_w >= limit or self.target_h >= limit:
            raise ConfigError(
                f"target {self.target_w}x{self.target_h} does not fit a "
                f"{self.frame_size}px frame"
            )
        if min(self.target_w, self.target_h) < _MIN_SIZE:
            raise ConfigError(f"target smaller than {_MIN_SIZE}px")
        if self.distractors < 0:
            raise ConfigError("distractors must be >= 0")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.occlusion is not None and (self.occlusion[0] < 0 or self.occlusion[1] < 1):
            raise ConfigError(f"bad occlusion window {self.occlusion}")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Static low-frequency blotches, kept dim so targets stand out."""
    cells = 8
    coarse = rng.uniform(20.0, 110.0, size=(3, cells, cells))
    # Bilinear upsample of the coarse grid.
    t = (np.arange(size) + 0.5) * cells / size - 0.5
    i0 = np.clip(np.floor(t).astype(int), 0, cells - 1)
    i1 = np.clip(i0 + 1, 0, cells - 1)
    f = np.clip(t - i0, 0.0, 1.0)
    rows = coarse[:, :, i0] * (1 - f) + coarse[:, :, i1] * f
    out = rows[:, i0, :] * (1 - f)[None, :, None] + rows[:, i1, :] * f[None, :, None]
    return out


def _rect_coverage(lo: float, hi: float, n: int):
    """Per-pixel overlap of [lo, hi] with each unit pixel, plus the index span."""
    i0 = int(math.floor(lo))
    i1 = int(math.ceil(hi))
    i0c, i1c = max(i0, 0), min(i1, n)
    if i0c >= i1c:
        return i0c, i1c, np.zeros(0)
    px = np.arange(i0c, i1c, dtype=np.float64)
    cov = np.clip(np.minimum(px + 1.0, hi) - np.maximum(px, lo), 0.0, 1.0)
    return i0c, i1c, cov


def _draw_rect(img: np.ndarray, box: BBox, c_left: np.ndarray, c_right: np.ndarray,
               alpha: float = 1.0) -> None:
    n = img.shape[1]
    x0, x1, covx = _rect_coverage(box.x0, box.x1, n)
    y0, y1, covy = _rect_coverage(box.y0, box.y1, n)
    if covx.size == 0 or covy.size == 0:
        return
    cov = np.outer(covy, covx) * alpha
    cols = np.arange(x0, x1, dtype=np.float64) + 0.5
    color = np.where(cols[None, :] < box.cx, c_left[:, None], c_right[:, None])
    region = img[:, y0:y1, x0:x1]
    region *= 1.0 - cov
    region += color[:, None, :] * cov


def _draw_ellipse(img: np.ndarray, box: BBox, c_outer: np.ndarray, c_inner: np.ndarray,
                  alpha: float = 1.0) -> None:
    n = img.shape[1]
    x0, x1 = max(int(math.floor(box.x0)), 0), min(int(math.ceil(box.x1)), n)
    y0, y1 = max(int(math.floor(box.y0)), 0), min(int(math.ceil(box.y1)), n)
    if x0 >= x1 or y0 >= y1:
        return
    px = np.arange(x0, x1, dtype=np.float64) + 0.5
    py = np.arange(y0, y1, dtype=np.float64) + 0.5
    rx = (px - box.cx) / (box.w / 2.0)
    ry = (py - box.cy) / (box.h / 2.0)
    r = np.sqrt(ry[:, None] ** 2 + rx[None, :] ** 2)
    edge = 2.0 / min(box.w, box.h)  # ~1px soft rim
    cov = np.clip((1.0 - r) / edge, 0.0, 1.0) * alpha
    color = np.where(r[None, :, :] < 0.55, c_inner[:, None, None], c_outer[:, None, None])
    region = img[:, y0:y1, x0:x1]
    region *= 1.0 - cov
    region += color * cov


@dataclass
class _Mover:
    cx: float
    cy: float
    w: float
    h: float
    vx: float
    vy: float
    drift: float

    def step(self, size: int) -> None:
        if self.drift != 0.0:
            limit = size / 2.5
            self.w = float(np.clip(self.w * (1.0 + self.drift), _MIN_SIZE, limit))
            self.h = float(np.clip(self.h * (1.0 + self.drift), _MIN_SIZE, limit))
        lo_x = _EDGE_MARGIN + self.w / 2.0
        hi_x = size - _EDGE_MARGIN - self.w / 2.0
        lo_y = _EDGE_MARGIN + self.h / 2.0
        hi_y = size - _EDGE_MARGIN - self.h / 2.0
        nx = self.cx + self.vx
        if nx < lo_x or nx > hi_x:
            self.vx = -self.vx
            nx = self.cx + self.vx
        ny = self.cy + self.vy
        if ny < lo_y or ny > hi_y:
            self.vy = -self.vy
            ny = self.cy + self.vy
        self.cx = float(np.clip(nx, lo_x, hi_x))
        self.cy = float(np.clip(ny, lo_y, hi_y))

    def box(self) -> BBox:
        return BBox.from_center(self.cx, self.cy, self.w, self.h)


def gen_sequence(cfg: SyntheticSceneConfig) -> tuple[list[np.ndarray], list[BBox]]:
    """Render the sequence: (uint8 (3,H,W) frames, per-frame gt boxes)."""
    rng = np.random.default_rng(cfg.seed)
    size = cfg.frame_size
    bg = _background(rng, size)

    # Bright two-tone target over a dim background.
    c1 = rng.uniform(150.0, 255.0, size=3)
    c2 = rng.uniform(150.0, 255.0, size=3)
    if cfg.start is None:
        cx = rng.uniform(size * 0.25, size * 0.75)
        cy = rng.uniform(size * 0.25, size * 0.75)
    else:
        cx, cy = cfg.start
    target = _Mover(cx, cy, cfg.target_w, cfg.target_h, *cfg.velocity, cfg.scale_drift)
    # Clamp the start inside the legal region (a zero-velocity, zero-drift step).
    vx, vy, drift = target.vx, target.vy, target.drift
    target.vx = target.vy = target.drift = 0.0
    target.step(size)
    target.vx, target.vy, target.drift = vx, vy, drift

    movers = []
    for _ in range(cfg.distractors):
        dw = cfg.target_w * rng.uniform(0.7, 1.3)
        dh = cfg.target_h * rng.uniform(0.7, 1.3)
        m = _Mover(
            rng.uniform(size * 0.15, size * 0.85),
            rng.uniform(size * 0.15, size * 0.85),
            dw, dh,
            rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0),
            0.0,
        )
        colors = (rng.uniform(120.0, 255.0, size=3), rng.uniform(120.0, 255.0, size=3))
        movers.append((m, colors))

    occ_color = rng.uniform(60.0, 130.0, size=3)

    frames: list[np.ndarray] = []
    boxes: list[BBox] = []
    draw = _draw_rect if cfg.target_kind == "rect" else _draw_ellipse
    for t in range(cfg.length):
        if t > 0:
            target.step(size)
            for m, _ in movers:
                m.step(size)
        img = bg.copy()
        for m, (ca, cb) in movers:
            _draw_rect(img, m.box(), ca, cb)
        gt = target.box()
        draw(img, gt, c1, c2)
        if cfg.occlusion is not None:
            o0, olen = cfg.occlusion
            if o0 <= t < o0 + olen:
                occ = BBox.from_center(
                    gt.cx + 0.15 * gt.w, gt.cy, 0.9 * gt.w, 0.6 * gt.h
                )
                _draw_rect(img, occ, occ_color, occ_color)
        if cfg.noise > 0.0:
            img = img + rng.normal(0.0, cfg.noise, size=img.shape)
        frames.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
        boxes.append(gt)
    return frames, boxes


# ---------------------------------------------------------------------------
# Evaluation suites.  Seeds are fixed offsets well away from the training
# pools, which derive their seeds from the training seed below 10^4.

def easy_suite(n: int = 20, base_seed: int = 100_000) -> list[SyntheticSceneConfig]:
    """Gentle held-out sequences: slow constant velocity, tiny drift."""
    out = []
    for i in range(n):
        r = np.random.default_rng(base_seed + i)
        moving = i % 4 != 0  # every fourth sequence keeps a static target
        # Per-component speeds capped so the velocity magnitude stays under 3.
        v = (
            (float(r.uniform(0.8, 2.1)) * (1 if r.uniform() < 0.5 else -1),
             float(r.uniform(0.8, 2.1)) * (1 if r.uniform() < 0.5 else -1))
            if moving else (0.0, 0.0)
        )
        out.append(SyntheticSceneConfig(
            length=40,
            target_kind="rect" if i % 2 == 0 else "ellipse",
            target_w=float(r.uniform(22.0, 34.0)),
            target_h=float(r.uniform(22.0, 34.0)),
            velocity=v,
            scale_drift=float(r.uniform(-0.01, 0.01)) if moving else 0.0,
            noise=2.0,
            seed=base_seed + i,
        ))
    return out


def hard_suite(n: int = 50, base_seed: int = 200_000) -> list[SyntheticSceneConfig]:
    """Stress sequences: faster motion, drift, distractors, occlusion, noise."""
    out = []
    for i in range(n):
        r = np.random.default_rng(base_seed + i)
        v = (
            float(r.uniform(-5.0, 5.0)),
            float(r.uniform(-5.0, 5.0)),
        )
        occ = (int(r.integers(8, 20)), int(r.integers(4, 9))) if i % 2 == 0 else None
        out.append(SyntheticSceneConfig(
            length=40,
            target_kind="rect" if i % 2 == 0 else "ellipse",
            target_w=float(r.uniform(20.0, 36.0)),
            target_h=float(r.uniform(20.0, 36.0)),
            velocity=v,
            scale_drift=float(r.uniform(-0.02, 0.02)),
            distractors=int(r.integers(1, 4)),
            occlusion=occ,
            noise=6.0,
            seed=base_seed + i,
        ))
    return out


# ---------------------------------------------------------------------------
# PPM (P6) storage.

def write_ppm(path, frame: np.ndarray) -> None:
    f = np.asarray(frame)
    if f.ndim != 3 or f.shape[0] != 3 or f.dtype != np.uint8:
        raise ArtifactError(f"write_ppm wants uint8 (3,H,W), got {f.dtype} {f.shape}")
    h, w = f.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(f.transpose(1, 2, 0)).tobytes())


def _ppm_tokens(blob: bytes, count: int, path) -> tuple[list[bytes], int]:
    """First `count` whitespace/comment-delimited header tokens and the offset
    of the byte right after the single whitespace that ends the last one."""
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(blob):
            raise ArtifactError(f"{path}: truncated header")
        c = blob[i:i + 1]
        if c in b" \t\r\n":
            i += 1
            continue
        if c == b"#":
            while i < len(blob) and blob[i:i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(blob) and blob[j:j + 1] not in b" \t\r\n":
            j += 1
        tokens.append(blob[i:j])
        i = j
        if len(tokens) == count:
            i += 1  # exactly one whitespace byte separates header and pixels
    return tokens, i


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, off = _ppm_tokens(blob, 4, path)
    if tokens[0] != b"P6":
        raise ArtifactError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ArtifactError(f"{path}: malformed header") from None
    if maxval != 255:
        raise ArtifactError(f"{path}: unsupported maxval {maxval}")
    need = w * h * 3
    payload = blob[off:off + need]
    if len(payload) != need:
        raise ArtifactError(f"{path}: expected {need} pixel bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_sequence(dirpath, frames, boxes) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    if len(frames) != len(boxes):
        raise ArtifactError(f"{len(frames)} frames vs {len(boxes)} boxes")
    for i, frame in enumerate(frames, start=1):
        write_ppm(d / f"frame_{i:05d}.ppm", frame)
    write_box_log(d / "groundtruth.txt", boxes)


def load_sequence(dirpath) -> tuple[list[np.ndarray], list[BBox]]:
    d = Path(dirpath)
    paths = sorted(d.glob("frame_*.ppm"), key=lambda p: p.name)
    if not paths:
        raise ArtifactError(f"{d}: no frame_*.ppm files")
    pat = re.compile(r"frame_(\d+)\.ppm$")
    for i, p in enumerate(paths, start=1):
        m = pat.match(p.name)
        if m is None or int(m.group(1)) != i:
            raise ArtifactError(f"{d}: frame numbering broken at {p.name}")
    gt_path = d / "groundtruth.txt"
    if not gt_path.exists():
        raise ArtifactError(f"{d}: missing groundtruth.txt")
    boxes = read_box_log(gt_path)
    frames = [read_ppm(p) for p in paths]
    if len(boxes) != len(frames):
        raise ArtifactError(
            f"{d}: {len(frames)} frames but {len(boxes)} groundtruth lines"
        )
    return frames, boxes
