"""The nine release gates, one test per criterion.

Run with -v for the per-criterion verdict lines; each test also prints a
one-line summary with the measured numbers.  The two training-based gates
(end-to-end desk run, ablation trends) dominate the runtime; everything
else finishes in seconds.  Session-scoped fixtures make sure each training
configuration is fitted exactly once per run.
"""

import dataclasses
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
from oracles import iou_naive, regular_labels_naive, regression_targets_naive, xcorr_naive

import aftrack.tracker as trk
from aftrack import tensor as T
from aftrack.align import OffsetField, aligned_conv
from aftrack.cli import composite_check, op_checks
from aftrack.evaluation import evaluate, static_baseline_metrics
from aftrack.geometry import (
    BBox,
    GridSpec,
    classification_labels_regular,
    decode_boxes,
    feat_to_image,
    make_labels,
    objectaware_labels,
    regression_targets,
)
from aftrack.network import NetConfig, init_params, load_weights, save_weights
from aftrack.synth import easy_suite, gen_sequence, hard_suite
from aftrack.tracker import TrackHyper, fuse_online, fuse_scores, penalty, select_cell
from aftrack.train import PairSampler, TrainConfig, run_training, train

DESK = NetConfig()

# Reduced net for the ablation gate: the trend comparison needs six separate
# trainings, so the budget per fit has to be minutes, not tens of minutes.
MID = NetConfig(stage_channels=(8, 16, 16, 16), combined_channels=16,
                tower_depth=2, exemplar_size=48, search_size=96)
MID_SINGLE = dataclasses.replace(MID, dilation_set=((1, 1),))
MID_TRAIN = TrainConfig(epochs=4, pairs_per_epoch=800, batch_size=16)
MID_HYPER = TrackHyper(exemplar_size=48, search_size=96)
ABLATION_SEEDS = (0, 1, 2)


def summary(line: str) -> None:
    print(line)


# ---------------------------------------------------------------------------
# 1. Gradient suite


def test_criterion_1_gradient_suite():
    t0 = time.monotonic()
    worst_op = 0.0
    worst_comp = 0.0
    for seed in range(10):
        for name, rep in op_checks(seed):
            assert rep.passed, f"seed {seed} op {name}: {rep}"
            worst_op = max(worst_op, rep.max_rel_err)
        name, rep = composite_check(seed)
        assert rep.passed, f"seed {seed} {name}: {rep}"
        worst_comp = max(worst_comp, rep.max_rel_err)
    wall = time.monotonic() - t0
    assert wall < 120.0, f"gradient suite took {wall:.1f}s"
    summary(f"criterion 1: PASS worst per-op {worst_op:.2e} (tol 1e-4), "
            f"worst composite {worst_comp:.2e} (tol 1e-3), {wall:.1f}s")


# ---------------------------------------------------------------------------
# 2. Label oracle equivalence


def _grid_cells(grid):
    out = []
    for i in range(grid.height):
        for j in range(grid.width):
            x, y = feat_to_image((i, j), grid)
            out.append((i, j, x, y))
    return out


def test_criterion_2_label_oracle_equivalence():
    rng = np.random.default_rng(20)
    t0 = time.monotonic()
    for _ in range(100):
        g = GridSpec(height=int(rng.integers(3, 12)),
                     width=int(rng.integers(3, 12)),
                     stride=int(rng.choice([4, 8])),
                     offset=float(rng.integers(0, 16)))
        gt = BBox.from_center(*rng.uniform(10, 60, 2), *rng.uniform(5, 45, 2))
        cells = _grid_cells(g)

        targets, mask = regression_targets(gt, g)
        want = regression_targets_naive(cells, gt.corners())
        assert int(mask.sum()) == len(want)
        for (i, j), dist in want.items():
            assert mask[i, j] == 1.0
            assert tuple(targets[:, i, j]) == tuple(dist)

        labels = classification_labels_regular(gt, g, radius=16.0)
        for (i, j), lab in regular_labels_naive(cells, gt.corners(), 16.0).items():
            assert labels[i, j] == lab

        pred = np.abs(rng.normal(8.0, 3.0, size=(4, g.height, g.width)))
        boxes = decode_boxes(pred, g)
        oa = objectaware_labels(boxes, gt, mask)
        for i in range(g.height):
            for j in range(g.width):
                assert oa[i, j] == iou_naive(boxes[:, i, j], gt.corners()) * mask[i, j]
    wall = time.monotonic() - t0
    assert wall < 10.0, f"label oracle check took {wall:.1f}s"
    summary(f"criterion 2: PASS 100 instances exact, {wall:.2f}s")


# ---------------------------------------------------------------------------
# 3. Degeneration identities


def test_criterion_3_degeneration_identities():
    rng = np.random.default_rng(30)
    for n in range(50):
        c_in = int(rng.integers(1, 4))
        c_out = int(rng.integers(1, 4))
        h = int(rng.integers(4, 9))
        w = int(rng.integers(4, 9))
        feat = T.constant(rng.uniform(-2, 2, (c_in, h, w)))
        weight = T.constant(rng.uniform(-1, 1, (c_out, c_in, 3, 3)))
        via_aligned = aligned_conv(feat, weight, OffsetField.zeros(3, h, w))
        via_conv = T.conv2d(feat, weight, padding=(1, 1))
        np.testing.assert_array_equal(via_aligned.data, via_conv.data,
                                      err_msg=f"instance {n}")

        search = rng.uniform(-2, 2, (c_in, h + 3, w + 3))
        kernel = rng.uniform(-1, 1, (c_in, 3, 3))
        got = T.depthwise_xcorr(T.constant(search), T.constant(kernel))
        np.testing.assert_array_equal(got.data, xcorr_naive(search, kernel),
                                      err_msg=f"instance {n}")
    summary("criterion 3: PASS 50 zero-offset identities bit-exact, "
            "50 correlation oracles exact")


# ---------------------------------------------------------------------------
# 4. Encode/decode round trip


def test_criterion_4_roundtrip_exact():
    # Boxes are drawn on the 1/16 lattice: the identity is exact in real
    # arithmetic, and sixteenths keep every intermediate representable.
    rng = np.random.default_rng(40)
    g = DESK.grid()
    checked = 0
    for _ in range(100):
        cx, cy = np.round(rng.uniform(30, 98, 2) * 16) / 16
        w, h = np.round(rng.uniform(12, 60, 2) * 16) / 16
        gt = BBox.from_center(cx, cy, w, h)
        targets, mask = regression_targets(gt, g)
        boxes = decode_boxes(targets, g)
        assert mask.sum() > 0
        for i in range(g.height):
            for j in range(g.width):
                if mask[i, j]:
                    assert tuple(boxes[:, i, j]) == gt.corners()
                    checked += 1
    summary(f"criterion 4: PASS 100 boxes, {checked} in-box cells exact")


# ---------------------------------------------------------------------------
# 5. Overfit smoke


class _RepeatSampler:
    """Feeds the same pair forever."""

    def __init__(self, pair):
        self.pair = pair

    def start_epoch(self, epoch):
        pass

    def sample(self):
        return self.pair


OVERFIT_TRAIN = TrainConfig(epochs=20, pairs_per_epoch=10, batch_size=1,
                            pool_sequences=1, pool_length=8)


def _overfit_run(seed: int):
    params = init_params(DESK, seed=seed)
    pair = PairSampler(DESK, OVERFIT_TRAIN, seed=seed).sample()
    history = run_training(params, OVERFIT_TRAIN, _RepeatSampler(pair))
    assert len(history) == 200
    return [r.total for r in history]


def test_criterion_5_overfit_smoke():
    t0 = time.monotonic()
    drops = []
    for seed in (0, 1, 2):
        losses = _overfit_run(seed)
        drop = 1.0 - losses[-1] / losses[9]
        assert drop >= 0.5, f"seed {seed}: {drop:.1%} drop from step-10 loss"
        drops.append(drop)
    assert _overfit_run(0) == _overfit_run(0)  # bit-identical replay
    wall = time.monotonic() - t0
    assert wall < 300.0, f"overfit smoke took {wall:.1f}s"
    summary(f"criterion 5: PASS drops {', '.join(f'{d:.0%}' for d in drops)}, "
            f"deterministic, {wall:.0f}s")


# ---------------------------------------------------------------------------
# 6. End-to-end desk run


@pytest.fixture(scope="session")
def desk_run():
    t0 = time.monotonic()
    result = train(DESK, TrainConfig(), seed=0)
    return result, time.monotonic() - t0


def test_criterion_6_end_to_end_desk(desk_run):
    result, wall = desk_run
    assert wall < 1800.0, f"desk training took {wall / 60:.1f} min"
    scenes = easy_suite(20)
    seqs = [gen_sequence(s) for s in scenes]
    agg, per = evaluate(result.params, seqs, protocol="restart")
    assert agg.ao >= 0.55, f"easy-suite ao {agg.ao:.3f}"
    assert agg.failures == 0
    for i, scene in enumerate(scenes):
        if scene.velocity == (0.0, 0.0):
            continue
        base = static_baseline_metrics(seqs[i][1])
        assert per[i].ao > base.ao, (
            f"moving sequence {i}: ao {per[i].ao:.3f} vs static {base.ao:.3f}"
        )
    summary(f"criterion 6: PASS ao={agg.ao:.3f} failures=0 "
            f"train={wall / 60:.1f}min")


# ---------------------------------------------------------------------------
# 7. Ablation trends


@pytest.fixture(scope="session")
def ablation_runs():
    three = [train(MID, MID_TRAIN, seed=s).params for s in ABLATION_SEEDS]
    single = [train(MID_SINGLE, MID_TRAIN, seed=s).params for s in ABLATION_SEEDS]
    return three, single


def test_criterion_7_ablation_trends(ablation_runs):
    three, single = ablation_runs
    seqs = [gen_sequence(s) for s in hard_suite(50)]
    oa_scores, reg_scores, single_scores = [], [], []
    for params in three:
        agg, _ = evaluate(params, seqs, protocol="restart", hyper=MID_HYPER)
        oa_scores.append(agg.ao)
        agg, _ = evaluate(params, seqs, protocol="restart",
                          hyper=dataclasses.replace(MID_HYPER, omega=0.0))
        reg_scores.append(agg.ao)
    for params in single:
        agg, _ = evaluate(params, seqs, protocol="restart", hyper=MID_HYPER)
        single_scores.append(agg.ao)
    oa = float(np.mean(oa_scores))
    reg = float(np.mean(reg_scores))
    one = float(np.mean(single_scores))
    assert oa >= reg, f"object-aware {oa:.4f} < regular-only {reg:.4f}"
    assert oa >= one, f"three-branch {oa:.4f} < single-branch {one:.4f}"
    summary(f"criterion 7: PASS oa={oa:.4f} >= regular={reg:.4f}, "
            f"three-branch={oa:.4f} >= single={one:.4f} (3 seeds)")


# ---------------------------------------------------------------------------
# 8. Invariance suite


def test_criterion_8_invariances(monkeypatch):
    rng = np.random.default_rng(80)

    # Penalty neutrality at k = 0, pointwise and through whole trajectories.
    for _ in range(200):
        r, rp = rng.uniform(0.3, 3.0, 2)
        s, sp = rng.uniform(5.0, 80.0, 2)
        assert penalty(r, rp, s, sp, 0.0) == 1.0
        assert penalty(r, rp, s, sp, 0.0, literal=True) == 1.0
    frames = [rng.uniform(0, 255, (3, 96, 96)) for _ in range(4)]
    box = BBox.from_center(48.0, 48.0, 20.0, 24.0)
    params = init_params(DESK, seed=8)
    base = trk.track_sequence(params, frames, box, TrackHyper(k_pen=0.0))
    monkeypatch.setattr(trk, "_penalty_map",
                        lambda r, rp, s, sp, k, lit: np.ones_like(r))
    forced = trk.track_sequence(params, frames, box, TrackHyper(k_pen=0.0))
    assert [b.corners() for b in base] == [b.corners() for b in forced]

    # Argmax invariance under positive scaling.
    for _ in range(100):
        m = rng.uniform(-1, 1, (9, 9))
        lam = float(rng.uniform(1e-3, 1e3))
        assert select_cell(m * lam) == select_cell(m)

    # Fusion endpoints.
    for _ in range(50):
        p_o = rng.uniform(0, 1, (9, 9))
        p_r = rng.uniform(0, 1, (9, 9))
        np.testing.assert_array_equal(fuse_scores(p_o, p_r, 0.0), p_r)
        np.testing.assert_array_equal(fuse_scores(p_o, p_r, 1.0), p_o)
        np.testing.assert_array_equal(fuse_online(p_o, p_r, 0.0), p_r)
        np.testing.assert_array_equal(fuse_online(p_o, p_r, 1.0), p_o)

    # Translation equivariance of the label bundle, one stride at a time.
    g = GridSpec.centered(128, 9, 8)
    for _ in range(25):
        gt = BBox.from_center(*rng.uniform(40, 80, 2), *rng.uniform(12, 40, 2))
        a = make_labels(gt, g, radius=16.0)
        moved = BBox.from_center(gt.cx + g.stride, gt.cy, gt.w, gt.h)
        b = make_labels(moved, g, radius=16.0)
        np.testing.assert_array_equal(b.reg_mask[:, 1:], a.reg_mask[:, :-1])
        np.testing.assert_array_equal(b.cls_regular[:, 1:], a.cls_regular[:, :-1])
        np.testing.assert_array_equal(b.reg_targets[:, :, 1:],
                                      a.reg_targets[:, :, :-1])
    summary("criterion 8: PASS penalty neutrality, argmax scaling, "
            "fusion endpoints, label equivariance")


# ---------------------------------------------------------------------------
# 9. Serialization


MICRO = NetConfig(stage_channels=(2, 2, 3, 3), combined_channels=3,
                  tower_depth=1, exemplar_size=16, search_size=24)
MICRO_TRAIN = TrainConfig(epochs=2, pairs_per_epoch=4, batch_size=2,
                          frame_size=64, pool_sequences=1, pool_length=4,
                          freeze_backbone_epochs=1)


def test_criterion_9_serialization(tmp_path):
    params = init_params(MICRO, seed=9)
    a = tmp_path / "a.ocwt"
    b = tmp_path / "b.ocwt"
    save_weights(a, params)
    arrays = load_weights(a)
    for name, t in params.items():
        assert arrays[name].tobytes() == t.data.tobytes()
    save_weights(b, arrays)
    assert a.read_bytes() == b.read_bytes()

    first = tmp_path / "run1.ocwt"
    second = tmp_path / "run2.ocwt"
    save_weights(first, train(MICRO, MICRO_TRAIN, seed=4).params)
    save_weights(second, train(MICRO, MICRO_TRAIN, seed=4).params)
    assert first.read_bytes() == second.read_bytes()
    summary("criterion 9: PASS bit-exact round trip, "
            "same-seed runs byte-identical")
