"""Acceptance suite: one test per headline criterion.

Every test records a PASS/FAIL line through the ``criterion`` fixture;
the lines are repeated in the terminal summary so a plain ``pytest -v``
log shows all ten verdicts together.
"""
import json
import math
import shutil
import subprocess
import sys

import numpy as np

from conftest import mc_iou, random_box
from oracles import fd_gradients, max_relative_error, naive_ap, naive_match, naive_weights
from test_gating import random_instance
from fi3det.evaluation import average_precision, match_detections
from fi3det.gating import loss_and_grad
from fi3det.geometry import Box3, iou3d
from fi3det.losses import bce_dice_objectness, cosine_alignment_loss, incremental_loss, weighted_diou_regression
from fi3det.prototypes import PrototypeStore, update_prototype
from fi3det.session import ProtocolConfig, detect_scene, make_split_scenes, run_base_session, run_protocol
from fi3det.synth import WorldConfig
from fi3det.weighting import box_weight, combined_weights, point_weight

SEEDS = range(10)
EPS = np.finfo(float).eps

# Mean novel mAP of the noisy 3-way 5-shot run over seeds 0-9, measured
# before this suite was written (per seed: 1, 1, .9167, 1, 1, 1, 1, 1, 1, 1).
NOISY_NOVEL_MAP = 0.9916666666666666
NOISY_MARGIN = 0.02
NOISY_FLOOR = 0.85


def test_criterion_1_iou_matches_monte_carlo(criterion):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        a, b = random_box(rng, 0.6), random_box(rng, 0.6)
        worst = max(worst, abs(iou3d(a, b) - mc_iou(a, b, rng)))
    cube = Box3([0, 0, 0], [1, 1, 1])
    turned = Box3([0, 0, 0], [1, 1, 1], math.pi / 4)
    analytic = abs(iou3d(cube, turned) - math.sqrt(2) / 2)
    criterion(1, worst < 2e-3 and analytic < 1e-6,
              f"max |iou3d - MC| = {worst:.2e} over 100 pairs; pi/4 cube error {analytic:.1e}")


def test_criterion_2_weighting(criterion):
    errs = []
    for sigma in (0.25, 0.5, 1.3):
        for direction in np.eye(3):
            errs.append(abs(point_weight(sigma * direction, [0, 0, 0], sigma) - math.exp(-0.5)))
    ortho = abs(box_weight([[1.0, 0.0], [0.0, 3.0]]) - math.sqrt(2) / 2)
    rng = np.random.default_rng(2)
    mismatched = 0
    for _ in range(50):
        n = int(rng.integers(20, 120))
        pts = rng.uniform(-2, 2, (n, 3))
        feats = rng.normal(size=(n, 4))
        feats[rng.random(n) < 0.1] = 0
        bs = [random_box(rng, 1.5) for _ in range(int(rng.integers(1, 5)))]
        got, ref = combined_weights(pts, bs, feats, 0.5).as_dict(), naive_weights(pts, bs, feats, 0.5)
        # same (point, box) pattern; values agree to the last bit or two, since
        # the loop and the vectorized code sum in different orders
        if got.keys() != ref.keys() or any(not math.isclose(got[k], ref[k], rel_tol=4 * EPS, abs_tol=0) for k in ref):
            mismatched += 1
    criterion(2, max(errs) < 1e-12 and ortho < 1e-12 and mismatched == 0,
              f"point weight error {max(errs):.1e}, orthogonal box weight error {ortho:.1e}, "
              f"{mismatched}/50 scenes differ from the double loop")


def test_criterion_3_ema_closed_form(criterion):
    s = PrototypeStore(3, 2, 0.999)
    s.register(["a", "b"])
    v = np.array([1.0, 0.0, 0.0])
    for _ in range(3):
        update_prototype(s, "a", v, [1.0, 0.0], imprint=False)
    coef = s.proto3d["a"][0]
    update_prototype(s, "b", [1, 2, 3], [4, 5])
    imprinted = s.proto3d["b"].tolist() == [1, 2, 3] and s.proto2d["b"].tolist() == [4, 5]
    # 1 - 0.999**3 = 0.002997001 lies exactly 1e-9 from the rounded literal,
    # so the literal check gets a few ulps of slack on top of its tolerance
    ok = abs(coef - 0.002997) <= 1e-9 + 8 * EPS * 0.002997 and abs(coef - (1 - 0.999 ** 3)) < 1e-15 and imprinted
    criterion(3, ok, f"coefficient {coef:.12f} after 3 updates; imprint-first copies the mean: {imprinted}")


def test_criterion_4_gate_gradients(criterion):
    worst = 0.0
    for seed in range(20):
        g, x, s3, s2, y = random_instance(seed, "sigmoid" if seed % 2 == 0 else "softmax")
        _, analytic = loss_and_grad(g, x, s3, s2, y)
        numeric = fd_gradients(lambda: loss_and_grad(g, x, s3, s2, y)[0], g.flat())
        worst = max(worst, max_relative_error(analytic, numeric))
    criterion(4, worst < 1e-4, f"max relative error {worst:.2e} over 20 instances")


def test_criterion_5_ap_oracle(criterion):
    rng = np.random.default_rng(5)
    bad_match = bad_ap = 0
    for _ in range(500):
        gts = [random_box(rng, 1.0) for _ in range(int(rng.integers(0, 4)))]
        dets = [random_box(rng, 1.0) for _ in range(int(rng.integers(0, 6)))]
        scores = np.round(rng.random(len(dets)), 1)
        flags = match_detections(dets, scores, gts)
        bad_match += flags.tolist() != naive_match(list(zip(scores, dets)), gts, iou3d, 0.25)
        n_gt = len(gts) + int(rng.integers(0, 2))
        if n_gt:
            bad_ap += average_precision(flags, n_gt) != naive_ap(flags.tolist(), n_gt)
    tp_fp_tp = average_precision([True, False, True], 2)
    criterion(5, bad_match == 0 and bad_ap == 0 and abs(tp_fp_tp - 0.8333333333) < 1e-6,
              f"{bad_match} match and {bad_ap} AP disagreements in 500 cases; [TP, FP, TP] AP = {tp_fp_tp:.6f}")


def test_criterion_6_loss_fixed_points(criterion):
    rng = np.random.default_rng(6)
    target = (rng.random(40) < 0.4).astype(float)
    g = rng.normal(size=5)
    pseudo = Box3([0.2, -0.1, 0.5], [1.0, 0.6, 0.9], 0.3)
    y = np.eye(4)[rng.integers(0, 4, 7)]
    zeros = {
        "objectness": bce_dice_objectness(target, target),
        "alignment": cosine_alignment_loss(np.outer(rng.uniform(0.5, 2, 6), g), g, rng.uniform(0, 1, 6)),
        "regression": weighted_diou_regression([pseudo] * 4, pseudo, rng.uniform(0, 1, 4)),
        "incremental": incremental_loss(y, y),
    }
    f, w1, w2 = rng.normal(size=(6, 5)), rng.uniform(0, 1, 6), rng.uniform(0, 1, 6)
    preds = [random_box(rng, 0.4) for _ in range(6)]
    lin = []
    for loss in (lambda w: cosine_alignment_loss(f, g, w, z=6),
                 lambda w: weighted_diou_regression(preds, pseudo, w, z=6)):
        lin.append(abs(loss(w1 + 3.0 * w2) - (loss(w1) + 3.0 * loss(w2))))
    worst = max(zeros.values())
    criterion(6, worst < 1e-5 and max(lin) < 1e-12,
              f"largest loss at perfect inputs {worst:.1e} ({max(zeros, key=zeros.get)}); linearity error {max(lin):.1e}")


def _base_bytes(dets, base):
    keep = sorted(d.key() for d in dets if d.category in base)
    return repr(keep).encode()


def test_criterion_7_frozen_base(criterion):
    cfg = ProtocolConfig(preset="synth-seq", protocol="sequential", shot=1, n_train=12, n_val=3, mine=False,
                         epochs=40, world=WorldConfig(feature_noise=0.1, box_jitter=0.05))
    changed = []
    for seed in SEEDS:
        result = run_protocol(cfg, seed)
        assert result.document["complete"], result.document["sessions"][-1]
        digests = {s["base_detection_digest"] for s in result.document["sessions"]}
        first, last = result.states[0], result.states[-1]
        val = make_split_scenes(cfg, seed, "val", cfg.n_val)
        before = b"".join(_base_bytes(detect_scene(b, first, cfg), first.c_base) for b in val)
        after = b"".join(_base_bytes(detect_scene(b, last, cfg), last.c_base) for b in val)
        if len(digests) != 1 or before != after or len(result.states) != 3:
            changed.append(seed)
    criterion(7, not changed, f"base detections byte-identical across all sessions for "
                              f"{len(SEEDS) - len(changed)}/{len(SEEDS)} seeds")


def test_criterion_8_synthetic_end_to_end(criterion):
    clean = [run_protocol(ProtocolConfig(), seed).reports[1].novel_map for seed in range(3)]
    noisy_cfg = ProtocolConfig(world=WorldConfig(feature_noise=0.1, box_jitter=0.05), mine=False)
    noisy = [run_protocol(noisy_cfg, seed).reports[1].novel_map for seed in SEEDS]
    threshold = max(NOISY_FLOOR, NOISY_NOVEL_MAP - NOISY_MARGIN)
    ok = all(abs(m - 1.0) < 1e-6 for m in clean) and np.mean(noisy) >= threshold
    criterion(8, ok, f"zero-noise novel mAP {min(clean):.6f}; noisy mean {np.mean(noisy):.4f} "
                     f"(threshold {threshold:.4f})")


def test_criterion_9_weighting_ablation(criterion):
    world = WorldConfig(feature_noise=0.1, vlm_feature_noise=0.3, false_mask_rate=0.3,
                        merge_mask_rate=0.3, mask_dropout=0.1)
    cfg = ProtocolConfig(world=world, n_train=8, n_val=1)
    weighted, flat = [], []
    for seed in SEEDS:
        summary = run_base_session(cfg, seed).summary
        weighted.append(summary["supervised_iou"])
        flat.append(summary["supervised_iou_unweighted"])
    criterion(9, np.mean(weighted) >= np.mean(flat),
              f"supervised pseudo-label IoU weighted {np.mean(weighted):.4f} vs unweighted {np.mean(flat):.4f}")


def _simulate(tmp_path, run):
    exe = shutil.which("fi3det")
    cmd = [exe] if exe else [sys.executable, "-m", "fi3det.cli"]
    out = tmp_path / f"report{run}.json"
    proc = subprocess.run(cmd + ["simulate", "--config", str(tmp_path / "cfg.json"), "--seed", "11",
                                 "--out", str(out)], capture_output=True, check=True)
    return out.read_bytes(), out.with_suffix(".csv").read_bytes(), proc.stdout


def test_criterion_10_determinism(tmp_path, criterion):
    (tmp_path / "cfg.json").write_text(json.dumps({"n_train": 20, "n_val": 4, "epochs": 50}))
    first, second = _simulate(tmp_path, 0), _simulate(tmp_path, 1)
    criterion(10, first == second, f"two simulate runs wrote {len(first[0])}-byte reports, identical: {first == second}")
