"""Command-line front end: train, track, eval, gen, gradcheck.

Thin orchestration over the library modules.  Exit codes: 0 ok, 2 bad
configuration or usage, 3 numeric failure, 4 broken artifact (weight files,
sequence directories, logs).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .align import OffsetField, aligned_conv
from .config import load_config
from .errors import (
    ArtifactError,
    ConfigError,
    NumericError,
    ShapeError,
    TrainingDiverged,
    UsageError,
)
from .evaluation import evaluate, metrics_from_boxes, report_to_text, write_report
from .losses import LossWeights, bce_loss, iou_loss, total_loss
from .network import NetConfig, save_weights, load_params
from .synth import gen_sequence, load_sequence, save_sequence
from .tensor import grad_check
from .tracker import init as tracker_init, read_box_log, track_step, write_box_log
from .train import PairSampler, TrainConfig, compute_pair_loss, train, write_loss_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_ARTIFACT = 4

WEIGHTS_NAME = "weights.ocwt"
CHECKPOINT_NAME = "checkpoint.ocwt"
LOSS_NAME = "loss.csv"
PREDICTIONS_NAME = "predictions.txt"
METRICS_NAME = "metrics.txt"


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aftrack")
    sub = p.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train a model from a config file")
    tr.add_argument("--config", required=True, help="run configuration file")
    tr.add_argument("--out", help="output directory (default: paths.out)")
    tr.add_argument("--seed", type=int, help="override the config seed")
    tr.set_defaults(func=_cmd_train)

    tk = sub.add_parser("track", help="run the tracker over a stored sequence")
    tk.add_argument("--config", required=True)
    tk.add_argument("--weights", help="weight file (default: paths.weights)")
    tk.add_argument("--out")
    tk.add_argument("--emit-scores", action="store_true",
                    help="also dump the fused score map of every frame")
    tk.add_argument("--online-provider", default="none",
                    help="online classifier to fuse in ('none' disables)")
    tk.set_defaults(func=_cmd_track)

    ev = sub.add_parser("eval", help="score predictions against ground truth")
    ev.add_argument("inputs", nargs="+",
                    help="prediction log + gt log, or sequence dirs with --weights")
    ev.add_argument("--config")
    ev.add_argument("--weights",
                    help="run the tracker on sequence directories first")
    ev.add_argument("--out")
    ev.set_defaults(func=_cmd_eval)

    gn = sub.add_parser("gen", help="generate a synthetic sequence")
    gn.add_argument("--config", required=True)
    gn.add_argument("--out")
    gn.add_argument("--seed", type=int, help="override the scene seed")
    gn.set_defaults(func=_cmd_gen)

    gc = sub.add_parser("gradcheck",
                        help="finite-difference check of every op and the full loss")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=_cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors and 0 on --help; keep both.
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, UsageError) as err:
        return _fail(EXIT_CONFIG, err)
    except TrainingDiverged as err:
        return _fail(EXIT_NUMERIC, err)
    except NumericError as err:
        return _fail(EXIT_NUMERIC, err)
    except (ArtifactError, ShapeError) as err:
        return _fail(EXIT_ARTIFACT, err)
    except OSError as err:
        return _fail(EXIT_ARTIFACT, err)


def _fail(code: int, err) -> int:
    print(f"error: {err}", file=sys.stderr)
    return code


def _out_dir(args, run=None) -> Path:
    out = getattr(args, "out", None)
    if out is None and run is not None:
        out = run.paths.out
    if out is None:
        raise ConfigError("no output directory: pass --out or set paths.out")
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# Commands


def _cmd_train(args) -> int:
    run = load_config(args.config)
    seed = args.seed if args.seed is not None else run.seed
    out = _out_dir(args, run)
    try:
        result = train(run.net, run.train, seed=seed, log=print)
    except TrainingDiverged as err:
        write_loss_csv(out / LOSS_NAME, err.history)
        if err.checkpoint is not None:
            save_weights(out / CHECKPOINT_NAME, err.checkpoint)
            print(f"error: {err}; last good state in {out / CHECKPOINT_NAME}",
                  file=sys.stderr)
        else:
            print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    save_weights(out / WEIGHTS_NAME, result.params)
    write_loss_csv(out / LOSS_NAME, result.history)
    print(f"{len(result.history)} steps, final loss "
          f"{result.history[-1].total:.6g}; wrote {out / WEIGHTS_NAME}")
    return EXIT_OK


def _resolve_provider(name: str | None):
    if name in (None, "none"):
        return None
    raise ConfigError(f"unknown online provider {name!r} (only 'none' is built in)")


def _write_score_map(path, scores: np.ndarray) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for row in scores:
            fh.write(" ".join(f"{v:.10g}" for v in row) + "\n")


def _cmd_track(args) -> int:
    run = load_config(args.config)
    weights = args.weights if args.weights is not None else run.paths.weights
    if weights is None:
        raise ConfigError("no weight file: pass --weights or set paths.weights")
    if run.paths.sequence is None:
        raise ConfigError("no input sequence: set paths.sequence")
    provider = _resolve_provider(args.online_provider)
    out = _out_dir(args, run)

    params = load_params(run.net, weights)
    frames, gt = load_sequence(run.paths.sequence)
    state = tracker_init(frames[0], gt[0], params, run.track, provider)
    boxes = [state.prev_box]
    score_dir = None
    if args.emit_scores:
        score_dir = out / "scores"
        score_dir.mkdir(exist_ok=True)
    for idx, frame in enumerate(frames[1:], start=2):
        boxes.append(track_step(state, frame))
        if score_dir is not None:
            _write_score_map(score_dir / f"frame_{idx:05d}.txt", state.last_scores)
    write_box_log(out / PREDICTIONS_NAME, boxes)
    print(f"tracked {len(frames)} frames; wrote {out / PREDICTIONS_NAME}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    if args.weights is None:
        if len(args.inputs) != 2:
            raise UsageError(
                "eval without --weights takes exactly two box logs: "
                "predictions then ground truth"
            )
        pred = read_box_log(args.inputs[0])
        gt = read_box_log(args.inputs[1])
        if len(pred) != len(gt):
            raise ConfigError(
                f"prediction log has {len(pred)} boxes but ground truth has "
                f"{len(gt)}"
            )
        report = metrics_from_boxes(pred, gt)
        run = None
    else:
        if args.config is None:
            raise ConfigError("eval with --weights needs --config for the "
                              "network shape")
        run = load_config(args.config)
        params = load_params(run.net, args.weights)
        seqs = [load_sequence(d) for d in args.inputs]
        report, _ = evaluate(params, seqs, protocol="continuous",
                             hyper=run.track)
    sys.stdout.write(report_to_text(report))
    out = args.out if args.out is not None else (run.paths.out if run else None)
    if out is not None:
        p = Path(out)
        p.mkdir(parents=True, exist_ok=True)
        write_report(p / METRICS_NAME, report)
    return EXIT_OK


def _cmd_gen(args) -> int:
    run = load_config(args.config)
    scene = run.scene
    if args.seed is not None:
        scene = dataclasses.replace(scene, seed=args.seed)
    out = _out_dir(args, run)
    frames, boxes = gen_sequence(scene)
    save_sequence(out, frames, boxes)
    print(f"wrote {len(frames)} frames to {out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    failed = 0
    for name, rep in op_checks(args.seed) + [composite_check(args.seed)]:
        print(f"{name:<20} {rep}")
        if not rep.passed:
            failed += 1
    if failed:
        print(f"error: {failed} gradient check(s) failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# Finite-difference battery.  Random inputs are drawn away from the kinks of
# the piecewise ops (relu/min/max/clamp and the iou min) so that central
# differences with step 1e-5 see a smooth function.

PER_OP_TOL = 1e-4
COMPOSITE_TOL = 1e-3

# Smallest legal network; the composite check probes every parameter element
# twice per finite difference, so size is runtime.
NANO = NetConfig(
    stage_channels=(1, 1, 2, 2),
    combined_channels=2,
    tower_depth=1,
    exemplar_size=16,
    search_size=24,
    couple_offsets=True,
)


def _signed(rng, shape, lo: float, hi: float) -> np.ndarray:
    """Magnitudes in [lo, hi] with random signs: no values near zero."""
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def op_checks(seed: int = 0) -> list[tuple[str, T.GradCheckReport]]:
    """grad_check every differentiable op once on small random inputs."""
    rng = np.random.default_rng(seed)
    out: list[tuple[str, T.GradCheckReport]] = []

    def run(name, params, build):
        out.append((name, grad_check(build, params, tol=PER_OP_TOL)))

    def mix(shape):
        # Random output weighting so reductions see non-uniform gradients.
        return T.constant(_signed(rng, shape, 0.5, 1.5))

    s = (2, 4, 4)
    c = mix(s)
    run("add", {"a": T.parameter(rng.uniform(-1, 1, s)), "b": T.parameter(rng.uniform(-1, 1, s))},
        lambda d, c=c: T.reduce_sum(T.mul(T.add(d["a"], d["b"]), c)))
    c = mix(s)
    run("sub", {"a": T.parameter(rng.uniform(-1, 1, s)), "b": T.parameter(rng.uniform(-1, 1, s))},
        lambda d, c=c: T.reduce_sum(T.mul(T.sub(d["a"], d["b"]), c)))
    c = mix(s)
    run("mul", {"a": T.parameter(rng.uniform(-1, 1, s)), "b": T.parameter(rng.uniform(-1, 1, s))},
        lambda d, c=c: T.reduce_sum(T.mul(T.mul(d["a"], d["b"]), c)))
    c = mix(s)
    run("div", {"a": T.parameter(rng.uniform(-1, 1, s)), "b": T.parameter(_signed(rng, s, 0.5, 1.5))},
        lambda d, c=c: T.reduce_sum(T.mul(T.div(d["a"], d["b"]), c)))
    c = mix(s)
    run("scale", {"a": T.parameter(rng.uniform(-1, 1, s))},
        lambda d, c=c: T.reduce_sum(T.mul(T.scale(d["a"], 1.7), c)))
    c = mix(s)
    run("shift", {"a": T.parameter(rng.uniform(-1, 1, s))},
        lambda d, c=c: T.reduce_sum(T.mul(T.shift(d["a"], 0.3), c)))
    c = mix(s)
    run("neg", {"a": T.parameter(rng.uniform(-1, 1, s))},
        lambda d, c=c: T.reduce_sum(T.mul(T.neg(d["a"]), c)))
    c = mix(s)
    run("exp", {"a": T.parameter(rng.uniform(-1, 1, s))},
        lambda d, c=c: T.reduce_sum(T.mul(T.exp(d["a"]), c)))
    c = mix(s)
    run("log", {"a": T.parameter(rng.uniform(0.5, 2.0, s))},
        lambda d, c=c: T.reduce_sum(T.mul(T.log(d["a"]), c)))
    c = mix(s)
    run("relu", {"a": T.parameter(_signed(rng, s, 0.2, 1.0))},
        lambda d, c=c: T.reduce_sum(T.mul(T.relu(d["a"]), c)))
    c = mix(s)
    run("sigmoid", {"a": T.parameter(rng.uniform(-2, 2, s))},
        lambda d, c=c: T.reduce_sum(T.mul(T.sigmoid(d["a"]), c)))

    # min/max need an elementwise gap between the arguments; clamp needs
    # values away from both cut points.
    a0 = rng.uniform(-1, 1, s)
    b0 = a0 + _signed(rng, s, 0.2, 1.0)
    c = mix(s)
    run("minimum", {"a": T.parameter(a0), "b": T.parameter(b0)},
        lambda d, c=c: T.reduce_sum(T.mul(T.minimum(d["a"], d["b"]), c)))
    a0 = rng.uniform(-1, 1, s)
    b0 = a0 + _signed(rng, s, 0.2, 1.0)
    c = mix(s)
    run("maximum", {"a": T.parameter(a0), "b": T.parameter(b0)},
        lambda d, c=c: T.reduce_sum(T.mul(T.maximum(d["a"], d["b"]), c)))
    inner = rng.uniform(-0.35, 0.35, s)
    outer = _signed(rng, s, 0.65, 1.0)
    a0 = np.where(rng.uniform(size=s) < 0.5, inner, outer)
    c = mix(s)
    run("clamp", {"a": T.parameter(a0)},
        lambda d, c=c: T.reduce_sum(T.mul(T.clamp(d["a"], -0.5, 0.5), c)))

    run("reduce_sum", {"a": T.parameter(rng.uniform(-1, 1, s))},
        lambda d: T.reduce_sum(d["a"]))
    run("reduce_mean", {"a": T.parameter(rng.uniform(-1, 1, s))},
        lambda d: T.reduce_mean(d["a"]))
    c = mix((4, 4))
    run("channel", {"a": T.parameter(rng.uniform(-1, 1, (3, 4, 4)))},
        lambda d, c=c: T.reduce_sum(T.mul(T.channel(d["a"], 1), c)))
    c = mix((3, 4, 4))
    run("stack", {"a": T.parameter(rng.uniform(-1, 1, (4, 4))),
                  "b": T.parameter(rng.uniform(-1, 1, (4, 4))),
                  "e": T.parameter(rng.uniform(-1, 1, (4, 4)))},
        lambda d, c=c: T.reduce_sum(T.mul(T.stack([d["a"], d["b"], d["e"]]), c)))
    c = mix((3, 4, 4))
    run("bias_add", {"x": T.parameter(rng.uniform(-1, 1, (3, 4, 4))),
                     "b": T.parameter(rng.uniform(-1, 1, (3,)))},
        lambda d, c=c: T.reduce_sum(T.mul(T.bias_add(d["x"], d["b"]), c)))

    c = mix((3, 6, 6))
    run("conv2d", {"x": T.parameter(rng.uniform(-1, 1, (2, 6, 6))),
                   "w": T.parameter(rng.uniform(-1, 1, (3, 2, 3, 3))),
                   "b": T.parameter(rng.uniform(-1, 1, (3,)))},
        lambda d, c=c: T.reduce_sum(T.mul(
            T.conv2d(d["x"], d["w"], d["b"], dilation=(1, 2), padding=(1, 2)), c)))
    c = mix((3, 4, 4))
    run("conv2d_stride2", {"x": T.parameter(rng.uniform(-1, 1, (2, 7, 7))),
                           "w": T.parameter(rng.uniform(-1, 1, (3, 2, 3, 3)))},
        lambda d, c=c: T.reduce_sum(T.mul(
            T.conv2d(d["x"], d["w"], padding=(1, 1), stride=2), c)))
    c = mix((2, 4, 4))
    run("depthwise_xcorr", {"s": T.parameter(rng.uniform(-1, 1, (2, 6, 6))),
                            "k": T.parameter(rng.uniform(-1, 1, (2, 3, 3)))},
        lambda d, c=c: T.reduce_sum(T.mul(T.depthwise_xcorr(d["s"], d["k"]), c)))

    pos = rng.uniform(-1.0, 5.5, size=(6, 2))  # spills past the border on purpose
    c = mix((2, 6))
    run("bilinear_sample", {"f": T.parameter(rng.uniform(-1, 1, (2, 5, 5)))},
        lambda d, c=c, pos=pos: T.reduce_sum(T.mul(T.bilinear_sample(d["f"], pos), c)))
    off = OffsetField(rng.uniform(-1.0, 1.0, size=(18, 5, 5)), kernel_size=3)
    c = mix((3, 5, 5))
    run("aligned_conv", {"f": T.parameter(rng.uniform(-1, 1, (2, 5, 5))),
                         "w": T.parameter(rng.uniform(-1, 1, (3, 2, 3, 3)))},
        lambda d, c=c, off=off: T.reduce_sum(T.mul(aligned_conv(d["f"], d["w"], off), c)))

    # Losses: targets kept clear of the min(l, l*) ties and the iou clamp.
    pred0 = rng.uniform(0.5, 3.0, (4, 3, 3))
    targ = rng.uniform(0.5, 3.0, (4, 3, 3))
    targ = np.where(np.abs(targ - pred0) < 0.05, pred0 + 0.1, targ)
    mask = (rng.uniform(size=(3, 3)) < 0.5).astype(float)
    mask[1, 1] = 1.0
    run("iou_loss", {"p": T.parameter(pred0)},
        lambda d, targ=targ, mask=mask: iou_loss(d["p"], targ, mask))

    prob = rng.uniform(0.1, 0.9, (4, 4))
    labels = rng.uniform(0.0, 1.0, (4, 4))
    pm = np.zeros((4, 4))
    nm = np.zeros((4, 4))
    pm[0, :2] = 1.0
    nm[2:, 1:3] = 1.0
    run("bce_loss", {"p": T.parameter(prob)},
        lambda d, labels=labels, pm=pm, nm=nm: bce_loss(d["p"], labels, pm, nm))

    run("total_loss", {"lr": T.parameter(np.asarray(0.7)),
                       "lo": T.parameter(np.asarray(0.4)),
                       "lf": T.parameter(np.asarray(0.9))},
        lambda d: total_loss(d["lr"], d["lo"], d["lf"], LossWeights()))
    return out


def composite_check(seed: int = 0) -> tuple[str, T.GradCheckReport]:
    """Full training loss on one sampled pair, offsets coupled, labels frozen.

    The object-aware labels are rebuilt from detached boxes on every forward
    pass during normal training; the probe freezes them so the function under
    test is a fixed differentiable map of the parameters.

    Fresh parameters have every hidden bias at exactly zero, which parks the
    pre-activations of relu-dead patches exactly on the kink, where the loss
    is not differentiable and central differences never converge.  The probe
    therefore jitters every parameter off that measure-zero set; the backward
    map is the same function everywhere, so any generic point checks it.
    """
    from .network import init_params

    params = init_params(NANO, seed=seed)
    jit = np.random.default_rng(seed + 77)
    for _, t in params.items():
        t.data += _signed(jit, t.data.shape, 0.02, 0.08)
    cfg = TrainConfig(epochs=1, pairs_per_epoch=1, batch_size=1,
                      frame_size=64, pool_sequences=1, pool_length=4)
    sampler = PairSampler(NANO, cfg, seed=seed)
    sampler.start_epoch(0)
    pair = sampler.sample()
    _, _, labels = compute_pair_loss(params, pair, cfg.label_radius,
                                     cfg.loss_weights)

    def build(d):
        total, _, _ = compute_pair_loss(params, pair, cfg.label_radius,
                                        cfg.loss_weights, oa_labels=labels)
        return total

    report = grad_check(build, dict(params.items()), tol=COMPOSITE_TOL,
                        step=1e-6, refine=(1e-7, 1e-8))
    return "composite_loss", report


if __name__ == "__main__":
    sys.exit(main())
