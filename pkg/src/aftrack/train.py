"""SGD training over synthetic crop pairs.

One epoch of backbone-frozen warmup at a low rate, then an exponential decay
from the peak rate to the floor.  Pairs come from a pool of freshly generated
sequences; both frames of a pair belong to one sequence and sit at most
`max_frame_gap` frames apart, with the search crop jittered in shift and
scale so the net cannot learn a centered-target shortcut.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ArtifactError, ConfigError, NumericError, TrainingDiverged
from .geometry import BBox, decode_boxes, make_labels, objectaware_labels
from .losses import LossWeights, bce_loss, iou_loss, total_loss
from .network import (
    ModelParams,
    NetConfig,
    backbone_forward,
    classification_heads,
    combine_features,
    init_params,
    preprocess,
    regression_head,
)
from .synth import SyntheticSceneConfig, gen_sequence
from .tracker import context_scale, crop_resize


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    pairs_per_epoch: int = 2000
    batch_size: int = 16
    warmup_lr: float = 1e-3
    peak_lr: float = 5e-3
    floor_lr: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 1e-3
    freeze_backbone_epochs: int = 1
    grad_clip: float = 5.0  # global L2 norm; 0 disables
    label_radius: float = 16.0
    max_frame_gap: int = 30
    shift_jitter: float = 0.2  # fraction of the search-crop side
    scale_jitter: float = 0.2
    pool_sequences: int = 32
    pool_length: int = 24
    frame_size: int = 160
    lambda1: float = 1.0
    lambda2: float = 1.2

    def __post_init__(self):
        if self.epochs < 1 or self.pairs_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("epochs, pairs_per_epoch and batch_size must be >= 1")
        if self.batch_size > self.pairs_per_epoch:
            raise ConfigError("batch_size exceeds pairs_per_epoch")
        for name in ("warmup_lr", "peak_lr", "floor_lr"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be >= 0")
        if self.floor_lr > self.peak_lr:
            raise ConfigError("floor_lr above peak_lr")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0.0 or self.grad_clip < 0.0:
            raise ConfigError("weight_decay and grad_clip must be >= 0")
        if not 0 <= self.freeze_backbone_epochs <= self.epochs:
            raise ConfigError("freeze_backbone_epochs must be in [0, epochs]")
        if self.label_radius <= 0.0:
            raise ConfigError("label_radius must be positive")
        if self.max_frame_gap < 1:
            raise ConfigError("max_frame_gap must be >= 1")
        if self.shift_jitter < 0.0 or not 0.0 <= self.scale_jitter < 1.0:
            raise ConfigError("bad jitter fractions")
        if self.pool_sequences < 1 or self.pool_length < 2:
            raise ConfigError("pool must hold >= 1 sequence of >= 2 frames")

    @property
    def steps_per_epoch(self) -> int:
        return max(self.pairs_per_epoch // self.batch_size, 1)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.freeze_backbone_epochs * self.steps_per_epoch

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda1=self.lambda1, lambda2=self.lambda2)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate for a 0-based global step: constant during warmup, then
    exponential decay hitting the floor exactly on the final step."""
    if not 0 <= step < cfg.total_steps:
        raise ConfigError(f"step {step} outside [0, {cfg.total_steps})")
    if step < cfg.warmup_steps:
        return cfg.warmup_lr
    n = cfg.total_steps - cfg.warmup_steps
    if n == 1:
        return cfg.peak_lr
    if cfg.peak_lr == 0.0:
        return 0.0
    i = step - cfg.warmup_steps
    return cfg.peak_lr * (cfg.floor_lr / cfg.peak_lr) ** (i / (n - 1))


def lr_schedule(cfg: TrainConfig) -> list[float]:
    return [lr_at(cfg, s) for s in range(cfg.total_steps)]


class SGD:
    """Momentum SGD with coupled weight decay and optional global grad-norm
    clipping.  Frozen parameters are skipped entirely: no decay, no momentum
    accumulation."""

    def __init__(self, params: ModelParams, momentum: float, weight_decay: float,
                 grad_clip: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self._vel = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self, lr: float, trainable=None) -> None:
        live = [
            (n, t) for n, t in self.params.items()
            if t.grad is not None and (trainable is None or trainable(n))
        ]
        factor = 1.0
        if self.grad_clip > 0.0:
            sq = sum(float(np.sum(t.grad * t.grad)) for _, t in live)
            norm = float(np.sqrt(sq))
            if norm > self.grad_clip:
                factor = self.grad_clip / norm
        for n, t in live:
            g = t.grad * factor + self.weight_decay * t.data
            v = self._vel[n]
            v *= self.momentum
            v += g
            t.data -= lr * v


@dataclass
class Pair:
    exemplar: np.ndarray  # (3, E, E) raw pixels
    search: np.ndarray  # (3, S, S) raw pixels
    gt: BBox  # target box in search-crop pixels


def _frame_to_crop(box: BBox, center, side: float, out_size: int) -> BBox:
    s = out_size / side
    ox = center[0] - side / 2.0
    oy = center[1] - side / 2.0
    return BBox((box.x0 - ox) * s, (box.y0 - oy) * s,
                (box.x1 - ox) * s, (box.y1 - oy) * s)


class PairSampler:
    """Pool-backed pair source.  The pool is regenerated every epoch from the
    sampler's own stream, so a single seed fixes every pair of the run."""

    def __init__(self, net: NetConfig, cfg: TrainConfig, seed: int):
        self.net = net
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self._pool: list[tuple[list[np.ndarray], list[BBox]]] = []

    def _random_scene(self) -> SyntheticSceneConfig:
        r = self.rng
        occl = None
        if r.uniform() < 0.3:
            occl = (int(r.integers(4, 14)), int(r.integers(3, 7)))
        return SyntheticSceneConfig(
            frame_size=self.cfg.frame_size,
            length=self.cfg.pool_length,
            target_kind="rect" if r.uniform() < 0.6 else "ellipse",
            target_w=float(r.uniform(18.0, 40.0)),
            target_h=float(r.uniform(18.0, 40.0)),
            velocity=(float(r.uniform(-4.0, 4.0)), float(r.uniform(-4.0, 4.0))),
            scale_drift=float(r.uniform(-0.015, 0.015)),
            distractors=int(r.integers(0, 3)),
            occlusion=occl,
            noise=float(r.uniform(0.0, 5.0)),
            seed=int(r.integers(0, 2**31)),
        )

    def start_epoch(self, epoch: int) -> None:
        self._pool = [gen_sequence(self._random_scene())
                      for _ in range(self.cfg.pool_sequences)]

    def sample(self) -> Pair:
        if not self._pool:
            self.start_epoch(0)
        r = self.rng
        frames, boxes = self._pool[int(r.integers(len(self._pool)))]
        n = len(frames)
        i = int(r.integers(n))
        lo = max(0, i - self.cfg.max_frame_gap)
        hi = min(n - 1, i + self.cfg.max_frame_gap)
        j = int(r.integers(lo, hi + 1))

        ge, gs = boxes[i], boxes[j]
        fe = np.asarray(frames[i], dtype=np.float64)
        fs = np.asarray(frames[j], dtype=np.float64)
        exemplar = crop_resize(fe, (ge.cx, ge.cy), context_scale(ge.w, ge.h),
                               self.net.exemplar_size)
        base_side = context_scale(gs.w, gs.h) * (
            self.net.search_size / self.net.exemplar_size
        )
        grid = self.net.grid()
        for attempt in range(8):
            if attempt < 7:
                side = base_side * (1.0 + float(r.uniform(-self.cfg.scale_jitter,
                                                          self.cfg.scale_jitter)))
                dx = float(r.uniform(-self.cfg.shift_jitter, self.cfg.shift_jitter)) * side
                dy = float(r.uniform(-self.cfg.shift_jitter, self.cfg.shift_jitter)) * side
            else:
                side, dx, dy = base_side, 0.0, 0.0  # centered fallback always labels
            center = (gs.cx + dx, gs.cy + dy)
            gt = _frame_to_crop(gs, center, side, self.net.search_size)
            bundle = make_labels(gt, grid, self.cfg.label_radius)
            if bundle.reg_mask.sum() > 0 and bundle.cls_regular.sum() > 0:
                search = crop_resize(fs, center, side, self.net.search_size)
                return Pair(exemplar=exemplar, search=search, gt=gt)
        raise NumericError("pair sampling failed to place the target on the grid")


def compute_pair_loss(params: ModelParams, pair: Pair, radius: float,
                      weights: LossWeights, oa_labels: np.ndarray | None = None):
    """Forward one pair and assemble the weighted loss.

    `oa_labels` defaults to fresh soft labels from the current (detached)
    boxes; passing a fixed array freezes them, which finite-difference
    probes need because label construction is not part of the graph.
    """
    grid = params.cfg.grid()
    bundle = make_labels(pair.gt, grid, radius)
    f_e = backbone_forward(T.constant(preprocess(pair.exemplar)), params)
    f_s = backbone_forward(T.constant(preprocess(pair.search)), params)
    S = combine_features(f_e, f_s, params)
    reg = regression_head(S, params)
    p_r, p_o = classification_heads(S, reg, params)

    l_reg = iou_loss(reg, bundle.reg_targets, bundle.reg_mask)
    if oa_labels is None:
        oa_labels = objectaware_labels(decode_boxes(reg.data, grid), pair.gt,
                                       bundle.reg_mask)
    l_o = bce_loss(p_o, oa_labels, bundle.reg_mask, np.zeros_like(bundle.reg_mask))
    l_r = bce_loss(p_r, bundle.cls_regular, bundle.cls_regular, bundle.cls_neg_mask)
    total = total_loss(l_reg, l_o, l_r, weights)
    return total, {"l_reg": l_reg, "l_o": l_o, "l_r": l_r}, oa_labels


@dataclass
class StepRecord:
    step: int
    lr: float
    l_reg: float
    l_o: float
    l_r: float
    total: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[StepRecord]


def run_training(params: ModelParams, cfg: TrainConfig, sampler,
                 log=None) -> list[StepRecord]:
    """Drive SGD over `sampler` pairs.  On a non-finite loss, raises
    TrainingDiverged carrying the params snapshot from the last completed
    epoch and the history up to the bad step."""
    opt = SGD(params, cfg.momentum, cfg.weight_decay, cfg.grad_clip)
    weights = cfg.loss_weights
    history: list[StepRecord] = []
    checkpoint = params.copy()
    epoch = -1
    for step in range(cfg.total_steps):
        e = step // cfg.steps_per_epoch
        if e != epoch:
            if epoch >= 0:
                checkpoint = params.copy()
            epoch = e
            sampler.start_epoch(epoch)
        lr = lr_at(cfg, step)
        frozen = epoch < cfg.freeze_backbone_epochs
        params.zero_grad()
        sums = {"l_reg": 0.0, "l_o": 0.0, "l_r": 0.0, "total": 0.0}
        try:
            for _ in range(cfg.batch_size):
                pair = sampler.sample()
                tot, parts, _ = compute_pair_loss(params, pair, cfg.label_radius,
                                                  weights)
                T.backward(T.scale(tot, 1.0 / cfg.batch_size))
                sums["total"] += float(tot.data)
                for k in ("l_reg", "l_o", "l_r"):
                    sums[k] += float(parts[k].data)
        except NumericError as err:
            raise TrainingDiverged(step, checkpoint=checkpoint,
                                   history=history) from err
        means = {k: v / cfg.batch_size for k, v in sums.items()}
        if not all(np.isfinite(v) for v in means.values()):
            raise TrainingDiverged(step, checkpoint=checkpoint, history=history)
        trainable = (lambda n: not n.startswith("backbone.")) if frozen else None
        opt.step(lr, trainable=trainable)
        history.append(StepRecord(step=step, lr=lr, l_reg=means["l_reg"],
                                  l_o=means["l_o"], l_r=means["l_r"],
                                  total=means["total"]))
        if log is not None and (step + 1) % cfg.steps_per_epoch == 0:
            recent = history[-cfg.steps_per_epoch:]
            avg = sum(r.total for r in recent) / len(recent)
            log(f"epoch {epoch + 1}/{cfg.epochs} done, mean loss {avg:.4f}, "
                f"lr {lr:.2e}")
    return history


def train(net: NetConfig | None = None, cfg: TrainConfig | None = None,
          seed: int = 0, log=None) -> TrainResult:
    net = net if net is not None else NetConfig()
    cfg = cfg if cfg is not None else TrainConfig()
    params = init_params(net, seed=seed)
    sampler = PairSampler(net, cfg, seed=seed)
    history = run_training(params, cfg, sampler, log=log)
    return TrainResult(params=params, history=history)


# ---------------------------------------------------------------------------
# Loss history file: one row per optimizer step.

_CSV_HEADER = "step,lr,l_reg,l_o,l_r,total"


def write_loss_csv(path, history: list[StepRecord]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(_CSV_HEADER + "\n")
        for r in history:
            fh.write(f"{r.step},{r.lr:.10g},{r.l_reg:.10g},{r.l_o:.10g},"
                     f"{r.l_r:.10g},{r.total:.10g}\n")


def read_loss_csv(path) -> list[StepRecord]:
    p = Path(path)
    lines = p.read_text(encoding="ascii").splitlines()
    if not lines or lines[0] != _CSV_HEADER:
        raise ArtifactError(f"{p}: missing loss-history header")
    out = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 6:
            raise ArtifactError(f"{p}:{ln}: expected 6 fields, got {len(fields)}")
        try:
            out.append(StepRecord(step=int(fields[0]), lr=float(fields[1]),
                                  l_reg=float(fields[2]), l_o=float(fields[3]),
                                  l_r=float(fields[4]), total=float(fields[5])))
        except ValueError:
            raise ArtifactError(f"{p}:{ln}: malformed row") from None
    return out
