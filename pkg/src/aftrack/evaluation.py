"""Tracking metrics and the two evaluation protocols.

Continuous: one uninterrupted run per sequence, scored against ground truth.
Restart: whenever the prediction's IoU with gt drops to zero, the failure
counter increments, five frames are skipped, and the tracker reinitializes
from ground truth (the VOT reset convention).  Frame 1 of any (re)start is
the init echo and never scored.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tracker
from .errors import ArtifactError, ConfigError, UsageError
from .geometry import BBox
from .network import ModelParams
from .tracker import TrackHyper, read_box_log

PRECISION_RADIUS = 20.0
TAU_GRID = np.linspace(0.0, 1.0, 21)
RESTART_SKIP = 5


def box_iou(a: BBox, b: BBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def center_error(a: BBox, b: BBox) -> float:
    return float(np.hypot(a.cx - b.cx, a.cy - b.cy))


@dataclass(frozen=True)
class MetricsReport:
    ao: float
    sr50: float
    auc: float
    precision20: float
    failures: int
    frames: int  # scored frames (init echoes and restart gaps excluded)
    sequences: int

    def __post_init__(self):
        for name in ("ao", "sr50", "auc", "precision20"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise UsageError(f"{name}={v} outside [0, 1]")


def _summarize(ious: np.ndarray, errors: np.ndarray, failures: int,
               sequences: int) -> MetricsReport:
    if ious.size == 0:
        raise UsageError("no scored frames")
    sr_at = [float(np.mean(ious >= tau)) for tau in TAU_GRID]
    return MetricsReport(
        ao=float(np.mean(ious)),
        sr50=float(np.mean(ious >= 0.5)),
        auc=float(np.mean(sr_at)),
        precision20=float(np.mean(errors < PRECISION_RADIUS)),
        failures=failures,
        frames=int(ious.size),
        sequences=sequences,
    )


def score_boxes(pred: list[BBox], gt: list[BBox]) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame IoU and center error, skipping frame 1 (the init echo)."""
    if len(pred) != len(gt):
        raise ConfigError(
            f"prediction has {len(pred)} boxes but ground truth has {len(gt)}"
        )
    if len(gt) < 2:
        raise UsageError("need at least 2 frames to score")
    ious = np.array([box_iou(p, g) for p, g in zip(pred[1:], gt[1:])])
    errs = np.array([center_error(p, g) for p, g in zip(pred[1:], gt[1:])])
    return ious, errs


def metrics_from_boxes(pred: list[BBox], gt: list[BBox]) -> MetricsReport:
    ious, errs = score_boxes(pred, gt)
    return _summarize(ious, errs, failures=0, sequences=1)


def metrics_from_logs(pred_path, gt_path) -> MetricsReport:
    """Continuous-protocol report from two box logs; pure in its inputs."""
    return metrics_from_boxes(read_box_log(pred_path), read_box_log(gt_path))


def static_baseline_metrics(gt: list[BBox]) -> MetricsReport:
    """The do-nothing tracker: init box repeated for the whole sequence."""
    if not gt:
        raise UsageError("empty ground truth")
    return metrics_from_boxes([gt[0]] * len(gt), gt)


def _track_once(params: ModelParams, frames, init_box: BBox,
                hyper: TrackHyper | None, provider) -> list[BBox]:
    return tracker.track_sequence(params, frames, init_box, hyper=hyper,
                                  provider=provider)


def _restart_run(params: ModelParams, frames, gt: list[BBox],
                 hyper: TrackHyper | None, provider):
    """One sequence under the restart protocol.

    Returns (ious, errors, failures).  The failing frame and the skipped gap
    contribute no samples; each reinit frame is an unscored echo.
    """
    n = len(frames)
    ious, errs = [], []
    failures = 0
    start = 0
    while start < n - 1:
        state = tracker.init(frames[start], gt[start], params, hyper=hyper,
                             provider=provider)
        failed_at = None
        for t in range(start + 1, n):
            box = tracker.track_step(state, frames[t])
            iou = box_iou(box, gt[t])
            if iou == 0.0:
                failures += 1
                failed_at = t
                break
            ious.append(iou)
            errs.append(center_error(box, gt[t]))
        if failed_at is None:
            break
        start = failed_at + RESTART_SKIP
    return np.array(ious), np.array(errs), failures


def evaluate(params: ModelParams, sequences, protocol: str = "continuous",
             hyper: TrackHyper | None = None, provider=None):
    """Run the tracker over (frames, gt) sequences and aggregate.

    Per-sequence metrics are averaged with equal sequence weight; failure
    counts add up.  Returns (aggregate, per_sequence_reports).
    """
    if protocol not in ("continuous", "restart"):
        raise ConfigError(f"unknown protocol {protocol!r}")
    seqs = list(sequences)
    if not seqs:
        raise UsageError("evaluate needs at least one sequence")
    per_seq = []
    for frames, gt in seqs:
        if len(frames) != len(gt):
            raise ArtifactError(
                f"sequence has {len(frames)} frames but {len(gt)} gt boxes"
            )
        if protocol == "continuous":
            pred = _track_once(params, frames, gt[0], hyper, provider)
            ious, errs = score_boxes(pred, gt)
            per_seq.append(_summarize(ious, errs, failures=0, sequences=1))
        else:
            ious, errs, failures = _restart_run(params, frames, gt, hyper,
                                                provider)
            if ious.size == 0:
                # Total loss of the target right away: score the failure run
                # as zero overlap rather than dropping the sequence.
                ious = np.array([0.0])
                errs = np.array([np.inf])
            per_seq.append(_summarize(ious, errs, failures=failures,
                                      sequences=1))
    agg = MetricsReport(
        ao=float(np.mean([r.ao for r in per_seq])),
        sr50=float(np.mean([r.sr50 for r in per_seq])),
        auc=float(np.mean([r.auc for r in per_seq])),
        precision20=float(np.mean([r.precision20 for r in per_seq])),
        failures=sum(r.failures for r in per_seq),
        frames=sum(r.frames for r in per_seq),
        sequences=len(per_seq),
    )
    return agg, per_seq


# ---------------------------------------------------------------------------
# Report files: flat key=value text plus a JSON twin.

_REPORT_KEYS = ("ao", "sr50", "auc", "precision20", "failures", "frames",
                "sequences")


def report_to_text(report: MetricsReport) -> str:
    d = asdict(report)
    lines = []
    for k in _REPORT_KEYS:
        v = d[k]
        lines.append(f"{k}={v:.10g}" if isinstance(v, float) else f"{k}={v}")
    return "\n".join(lines) + "\n"


def write_report(path, report: MetricsReport) -> None:
    """Write `path` (key=value) and `path`.json (structured) side by side."""
    p = Path(path)
    p.write_text(report_to_text(report), encoding="ascii")
    with open(p.with_suffix(p.suffix + ".json"), "w", encoding="ascii") as fh:
        json.dump(asdict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report(path) -> MetricsReport:
    p = Path(path)
    values = {}
    for ln, line in enumerate(p.read_text(encoding="ascii").splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise ArtifactError(f"{p}:{ln}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    missing = [k for k in _REPORT_KEYS if k not in values]
    if missing:
        raise ArtifactError(f"{p}: missing keys {missing}")
    extra = [k for k in values if k not in _REPORT_KEYS]
    if extra:
        raise ArtifactError(f"{p}: unknown keys {extra}")
    try:
        return MetricsReport(
            ao=float(values["ao"]),
            sr50=float(values["sr50"]),
            auc=float(values["auc"]),
            precision20=float(values["precision20"]),
            failures=int(values["failures"]),
            frames=int(values["frames"]),
            sequences=int(values["sequences"]),
        )
    except ValueError:
        raise ArtifactError(f"{p}: malformed numeric field") from None
