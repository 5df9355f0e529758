"""IoU against Monte-Carlo oracles, matching, AP, and the CSV layout."""

import numpy as np
import pytest

from mf2sf.geometry import BoundingBox, points_in_box
from mf2sf.metrics import (
    BIN_LABELS,
    CSV_HEADER,
    EvalConfig,
    EvalReport,
    average_precision,
    bev_iou,
    filter_gt_boxes,
    iou_3d,
    report_csv,
)


def rand_box(rng, spread=4.0, zlift=0.0):
    center = np.array([
        rng.uniform(-spread, spread),
        rng.uniform(-spread, spread),
        zlift + rng.uniform(-0.5, 0.5),
    ])
    size = np.array([rng.uniform(0.8, 3.0), rng.uniform(0.8, 5.0), rng.uniform(0.8, 2.5)])
    return BoundingBox(center, size, rng.uniform(-np.pi, np.pi))


def tight_aabb(box):
    w, l, h = box.size
    c, s = abs(np.cos(box.heading)), abs(np.sin(box.heading))
    half = np.array([(l * c + w * s) / 2, (l * s + w * c) / 2, h / 2])
    return box.center - half, box.center + half


def mc_iou(rng, a, b, n, dims):
    """IoU oracle: Monte-Carlo intersection over the overlap of the two
    tight AABBs, with the union taken analytically. dims=2 or 3."""
    alo, ahi = tight_aabb(a)
    blo, bhi = tight_aabb(b)
    lo, hi = np.maximum(alo, blo), np.minimum(ahi, bhi)
    if dims == 2:
        lo[2], hi[2] = a.center[2] - 0.01, a.center[2] + 0.01  # z never excludes
        region = np.prod(hi[:2] - lo[:2])
        vol_a, vol_b = a.size[0] * a.size[1], b.size[0] * b.size[1]
    else:
        zlo, zhi = max(alo[2], blo[2]), min(ahi[2], bhi[2])
        if zhi <= zlo:
            return 0.0
        lo[2], hi[2] = zlo, zhi
        region = np.prod(hi - lo)
        vol_a, vol_b = np.prod(a.size), np.prod(b.size)
    if np.any(hi[:2] <= lo[:2]):
        return 0.0
    pts = rng.uniform(lo, hi, size=(n, 3))
    hits = (points_in_box(pts, a) & points_in_box(pts, b)).mean()
    if dims == 2:
        # Height differences must not veto BEV containment.
        a = BoundingBox(np.r_[a.center[:2], 0.0], a.size, a.heading)
        b = BoundingBox(np.r_[b.center[:2], 0.0], b.size, b.heading)
        pts[:, 2] = 0.0
        hits = (points_in_box(pts, a) & points_in_box(pts, b)).mean()
    inter = float(hits) * float(region)
    union = float(vol_a) + float(vol_b) - inter
    return inter / union


def test_bev_iou_exact_cases():
    a = BoundingBox(np.zeros(3), np.array([2.0, 4.0, 1.5]), 0.3)
    assert bev_iou(a, a) == pytest.approx(1.0, abs=1e-12)
    far = BoundingBox(np.array([50.0, 0.0, 0.0]), np.array([2.0, 4.0, 1.5]), -1.0)
    assert bev_iou(a, far) == 0.0
    # Same footprint at different heights still overlaps in BEV.
    lifted = BoundingBox(np.array([0.0, 0.0, 10.0]), np.array([2.0, 4.0, 1.5]), 0.3)
    assert bev_iou(a, lifted) == pytest.approx(1.0, abs=1e-12)


def test_iou_3d_exact_cases():
    a = BoundingBox(np.zeros(3), np.array([2.0, 4.0, 1.5]), 0.3)
    assert iou_3d(a, a) == pytest.approx(1.0, abs=1e-12)
    lifted = BoundingBox(np.array([0.0, 0.0, 10.0]), np.array([2.0, 4.0, 1.5]), 0.3)
    assert iou_3d(a, lifted) == 0.0  # disjoint z intervals
    half = BoundingBox(np.array([0.0, 0.0, 0.75]), np.array([2.0, 4.0, 1.5]), 0.3)
    # Half the height overlaps: inter = V/2, union = 3V/2.
    assert iou_3d(a, half) == pytest.approx(1.0 / 3.0, abs=1e-9)


def test_bev_iou_monte_carlo():
    rng = np.random.default_rng(10)
    for _ in range(25):
        a, b = rand_box(rng), rand_box(rng)
        got = bev_iou(a, b)
        ora = mc_iou(rng, a, b, 60_000, dims=2)
        np.testing.assert_allclose(got, ora, atol=0.01)


def test_iou_3d_monte_carlo():
    rng = np.random.default_rng(11)
    for _ in range(25):
        a, b = rand_box(rng), rand_box(rng)
        got = iou_3d(a, b)
        ora = mc_iou(rng, a, b, 60_000, dims=3)
        np.testing.assert_allclose(got, ora, atol=0.01)


def test_iou_symmetry_and_translation_invariance():
    rng = np.random.default_rng(12)
    shift = np.array([17.0, -4.0, 2.0])
    for _ in range(50):
        a, b = rand_box(rng), rand_box(rng)
        assert bev_iou(a, b) == pytest.approx(bev_iou(b, a), abs=1e-9)
        assert iou_3d(a, b) == pytest.approx(iou_3d(b, a), abs=1e-9)
        a2 = BoundingBox(a.center + shift, a.size, a.heading)
        b2 = BoundingBox(b.center + shift, b.size, b.heading)
        assert bev_iou(a2, b2) == pytest.approx(bev_iou(a, b), abs=1e-7)
        assert iou_3d(a2, b2) == pytest.approx(iou_3d(a, b), abs=1e-7)


def test_filter_needs_strictly_more_than_min_points():
    box = BoundingBox(np.zeros(3), np.array([2.0, 2.0, 2.0]), 0.0)
    inside5 = np.zeros((5, 3))
    inside6 = np.zeros((6, 3))
    outside = np.full((20, 3), 30.0)
    assert filter_gt_boxes([box], np.vstack([inside5, outside])) == []
    assert filter_gt_boxes([box], np.vstack([inside6, outside])) == [box]
    assert filter_gt_boxes([box], inside6, min_points=6) == []
    with pytest.raises(ValueError, match=r"\(N, 3\)"):
        filter_gt_boxes([box], np.zeros((4, 2)))


def vehicle_at(x, y, heading=0.0, z=0.8):
    return BoundingBox(np.array([x, y, z]), np.array([2.0, 4.5, 1.6]), heading)


def test_ap_trivial_single_prediction():
    cfg = EvalConfig(iou_threshold=0.7)
    gt = vehicle_at(5.0, 0.0)
    hit = average_precision([[(gt, 0.9)]], [[gt]], cfg)
    assert hit.bev["Overall"] == pytest.approx(1.0)
    assert hit.d3["Overall"] == pytest.approx(1.0)
    miss_box = vehicle_at(15.0, 0.0)
    miss = average_precision([[(miss_box, 0.9)]], [[gt]], cfg)
    assert miss.bev["Overall"] == 0.0
    assert miss.d3["Overall"] == 0.0


def test_ap_hand_constructed_pr_curve():
    # 3 GT; 4 predictions scored 0.9 > 0.8 > 0.7 > 0.6 land TP, FP, TP, TP.
    # Precision envelope integrates to 1/3 * 1 + 1/3 * 3/4 + 1/3 * 3/4 = 5/6.
    cfg = EvalConfig(iou_threshold=0.7)
    g1, g2, g3 = vehicle_at(5, 0), vehicle_at(10, 8), vehicle_at(-12, 3)
    preds = [
        (vehicle_at(5, 0), 0.9),
        (vehicle_at(25, -20), 0.8),
        (vehicle_at(10, 8), 0.7),
        (vehicle_at(-12, 3), 0.6),
    ]
    rep = average_precision([preds], [[g1, g2, g3]], cfg)
    assert rep.bev["Overall"] == pytest.approx(5.0 / 6.0, abs=1e-12)
    assert rep.d3["Overall"] == pytest.approx(5.0 / 6.0, abs=1e-12)
    assert rep.n_gt["Overall"] == 3 and rep.n_pred["Overall"] == 4


def test_ap_monotone_under_fp_removal():
    cfg = EvalConfig(iou_threshold=0.7)
    gts = [[vehicle_at(5, 0), vehicle_at(10, 8)]]
    with_fp = [[(vehicle_at(5, 0), 0.9), (vehicle_at(40, 40), 0.85), (vehicle_at(10, 8), 0.8)]]
    without = [[(vehicle_at(5, 0), 0.9), (vehicle_at(10, 8), 0.8)]]
    ap_with = average_precision(with_fp, gts, cfg).bev["Overall"]
    ap_without = average_precision(without, gts, cfg).bev["Overall"]
    assert ap_without >= ap_with


def test_ap_greedy_matches_each_gt_once():
    cfg = EvalConfig(iou_threshold=0.5)
    gt = vehicle_at(5, 0)
    # Two near-identical predictions on one GT: second one is a FP.
    preds = [[(vehicle_at(5, 0), 0.9), (vehicle_at(5.1, 0), 0.8)]]
    rep = average_precision(preds, [[gt]], cfg)
    assert rep.bev["Overall"] == pytest.approx(1.0)  # envelope absorbs the tail FP
    # Reversing scores must still match exactly one.
    preds_rev = [[(vehicle_at(5.1, 0), 0.9), (vehicle_at(5, 0), 0.8)]]
    rep_rev = average_precision(preds_rev, [[gt]], cfg)
    assert rep_rev.n_gt["Overall"] == 1


def test_ap_distance_bins_and_na():
    cfg = EvalConfig(iou_threshold=0.7)
    near = vehicle_at(10, 0)
    mid = vehicle_at(40, 0)
    preds = [[(near, 0.9), (vehicle_at(60, 0), 0.85), (mid, 0.8)]]
    rep = average_precision(preds, [[near, mid]], cfg)
    assert rep.bev["0-30m"] == pytest.approx(1.0)
    assert rep.bev["30-50m"] == pytest.approx(1.0)
    assert rep.bev["50m-Inf"] is None  # no GT beyond 50 m
    assert rep.n_gt["50m-Inf"] == 0
    # The far FP outranks the second TP, so it bites in Overall:
    # envelope integrates to 0.5 * 1 + 0.5 * 2/3 = 5/6.
    assert rep.bev["Overall"] == pytest.approx(5.0 / 6.0, abs=1e-12)


def test_tp_bins_by_gt_fp_bins_by_prediction():
    cfg = EvalConfig(iou_threshold=0.5)
    # GT at 29 m, matched by a prediction whose own center is past 30 m.
    gt = vehicle_at(29.0, 0.0)
    pred = (vehicle_at(30.5, 0.0), 0.9)
    assert bev_iou(pred[0], gt) >= 0.5
    rep = average_precision([[pred]], [[gt]], cfg)
    assert rep.bev["0-30m"] == pytest.approx(1.0)  # TP lands in the GT bin
    assert rep.bev["30-50m"] is None
    rep2 = average_precision([[(vehicle_at(35.0, 0.0), 0.9)]], [[gt]], cfg)
    assert rep2.bev["0-30m"] == 0.0  # unmatched GT, no predictions in bin
    assert rep2.n_pred["30-50m"] == 1  # FP lands in its own bin


def test_report_csv_layout():
    rep = EvalReport(
        method="Baseline (1 frame)",
        bev={"Overall": 0.5, "0-30m": 0.75, "30-50m": None, "50m-Inf": None},
        d3={"Overall": 0.25, "0-30m": 0.5, "30-50m": None, "50m-Inf": None},
    )
    text = report_csv([rep])
    lines = text.splitlines()
    assert lines[0] == CSV_HEADER
    assert lines[1] == (
        "Baseline (1 frame), 0.500000, 0.750000, n/a, n/a, "
        "0.250000, 0.500000, n/a, n/a"
    )
    assert text.endswith("\n")
    assert len(BIN_LABELS) == 3


def test_eval_config_validation():
    with pytest.raises(ValueError, match="iou_threshold"):
        EvalConfig(iou_threshold=0.0)
    with pytest.raises(ValueError, match="bins"):
        EvalConfig(distance_bins=((0.0, 30.0), (20.0, 10.0)))
