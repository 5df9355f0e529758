"""Rotated-box IoU, BEV and 3D mAP with distance breakdowns, and the
minimum-point ground-truth filter."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BoundingBox, points_in_box
from .kernels import box_corners_bev, clip_area

__all__ = [
    "BIN_LABELS",
    "CSV_HEADER",
    "DISTANCE_BINS",
    "EvalConfig",
    "EvalReport",
    "average_precision",
    "bev_iou",
    "filter_gt_boxes",
    "iou_3d",
    "report_csv",
]

DISTANCE_BINS = ((0.0, 30.0), (30.0, 50.0), (50.0, float("inf")))
BIN_LABELS = ("0-30m", "30-50m", "50m-Inf")
CSV_HEADER = (
    "Method, BEV Overall, BEV 0-30m, BEV 30-50m, BEV 50m-Inf, "
    "3D Overall, 3D 0-30m, 3D 30-50m, 3D 50m-Inf"
)
_AREA_EPS = 1e-12


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.7
    min_points: int = 5
    distance_bins: tuple = DISTANCE_BINS

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")
        if self.min_points < 0:
            raise ValueError("min_points must be >= 0")
        edges = [b[0] for b in self.distance_bins] + [self.distance_bins[-1][1]]
        if any(lo >= hi for lo, hi in zip(edges, edges[1:])):
            raise ValueError("distance bins must be ordered and non-empty")


@dataclass(frozen=True)
class EvalReport:
    """mAP per metric and distance bin; None marks a bin with no ground truth."""

    method: str
    bev: dict = field(default_factory=dict)
    d3: dict = field(default_factory=dict)
    n_gt: dict = field(default_factory=dict)
    n_pred: dict = field(default_factory=dict)


def _bev_quad(box: BoundingBox) -> np.ndarray:
    row = np.array(
        [[box.center[0], box.center[1], box.size[0], box.size[1], box.heading]]
    )
    return box_corners_bev(row)[0]


def bev_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of the two heading-rotated BEV rectangles."""
    area_a = float(a.size[0] * a.size[1])
    area_b = float(b.size[0] * b.size[1])
    # Clipping identical rotated quads drifts a few ulp above the true
    # area; the intersection can never exceed either input area, so
    # clamping restores exact 1.0 for identical boxes.
    inter = min(float(clip_area(_bev_quad(a), _bev_quad(b))), area_a, area_b)
    union = area_a + area_b - inter
    if union <= _AREA_EPS:
        return 0.0
    return inter / union


def iou_3d(a: BoundingBox, b: BoundingBox) -> float:
    """BEV intersection times vertical overlap, over the volume union."""
    inter_bev = min(float(clip_area(_bev_quad(a), _bev_quad(b))),
                    float(a.size[0] * a.size[1]), float(b.size[0] * b.size[1]))
    za0, za1 = a.center[2] - a.size[2] / 2, a.center[2] + a.size[2] / 2
    zb0, zb1 = b.center[2] - b.size[2] / 2, b.center[2] + b.size[2] / 2
    dz = max(0.0, min(za1, zb1) - max(za0, zb0))
    inter = inter_bev * dz
    vol_a = float(np.prod(a.size))
    vol_b = float(np.prod(b.size))
    union = vol_a + vol_b - inter
    if union <= _AREA_EPS:
        return 0.0
    return inter / union


def filter_gt_boxes(boxes, points: np.ndarray, min_points: int = 5):
    """Keep boxes holding strictly more than min_points of the given cloud."""
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {points.shape}")
    return [b for b in boxes if int(points_in_box(points, b).sum()) > min_points]


def _bin_index(box: BoundingBox, bins) -> int:
    d = float(np.hypot(box.center[0], box.center[1]))
    for k, (lo, hi) in enumerate(bins):
        if lo <= d < hi:
            return k
    return len(bins) - 1


def _match_frames(preds_per_frame, gts_per_frame, iou_fn, thresh, bins):
    """Greedy score-descending matching; returns scored flags and GT counts.

    Output rows are (score, frame, order, tp, bin); true positives take the
    matched ground-truth box's distance bin, false positives their own.
    """
    rows = []
    gt_bin_counts = np.zeros(len(bins), dtype=int)
    for fi, (preds, gts) in enumerate(zip(preds_per_frame, gts_per_frame)):
        for g in gts:
            gt_bin_counts[_bin_index(g, bins)] += 1
        order = sorted(range(len(preds)), key=lambda j: (-preds[j][1], j))
        taken = [False] * len(gts)
        for rank, j in enumerate(order):
            box, score = preds[j]
            best, best_iou = -1, 0.0
            for gi, g in enumerate(gts):
                if taken[gi]:
                    continue
                iou = iou_fn(box, g)
                if iou >= thresh and iou > best_iou:
                    best, best_iou = gi, iou
            if best >= 0:
                taken[best] = True
                rows.append((score, fi, rank, True, _bin_index(gts[best], bins)))
            else:
                rows.append((score, fi, rank, False, _bin_index(box, bins)))
    return rows, gt_bin_counts


def _ap_from_rows(rows, n_gt: int):
    """All-point average precision over (score, frame, order, tp, bin) rows."""
    if n_gt == 0:
        return None
    if not rows:
        return 0.0
    rows = sorted(rows, key=lambda r: (-r[0], r[1], r[2]))
    tp = np.array([r[3] for r in rows], dtype=float)
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    precision = tp_cum / (tp_cum + fp_cum)
    recall = tp_cum / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def average_precision(preds_per_frame, gts_per_frame, cfg: EvalConfig,
                      method: str = "model") -> EvalReport:
    """BEV and 3D mAP, overall and per distance bin.

    preds_per_frame: per frame, a list of (BoundingBox, score); gts_per_frame:
    per frame, a list of BoundingBox already filtered for minimum points.
    Overall uses every prediction and ground truth; a bin with no ground
    truth is reported as None.
    """
    if len(preds_per_frame) != len(gts_per_frame):
        raise ValueError("prediction and ground-truth frame counts differ")
    bins = cfg.distance_bins
    out = {"bev": {}, "d3": {}}
    counts_gt = None
    counts_pred = {}
    for key, iou_fn in (("bev", bev_iou), ("d3", iou_3d)):
        rows, gt_bins = _match_frames(
            preds_per_frame, gts_per_frame, iou_fn, cfg.iou_threshold, bins
        )
        counts_gt = gt_bins
        out[key]["Overall"] = _ap_from_rows(rows, int(gt_bins.sum()))
        for k, label in enumerate(BIN_LABELS[: len(bins)]):
            sub = [r for r in rows if r[4] == k]
            out[key][label] = _ap_from_rows(sub, int(gt_bins[k]))
            if key == "bev":
                counts_pred[label] = len(sub)
    n_gt = {label: int(counts_gt[k]) for k, label in enumerate(BIN_LABELS[: len(bins)])}
    n_gt["Overall"] = int(counts_gt.sum())
    counts_pred["Overall"] = sum(len(p) for p in preds_per_frame)
    return EvalReport(method=method, bev=out["bev"], d3=out["d3"],
                      n_gt=n_gt, n_pred=counts_pred)


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.6f}"


def report_csv(reports) -> str:
    """Fixed-layout CSV; one row per method, deterministic formatting."""
    lines = [CSV_HEADER]
    labels = ("Overall",) + BIN_LABELS
    for rep in reports:
        cells = [rep.method]
        cells += [_fmt(rep.bev.get(label)) for label in labels]
        cells += [_fmt(rep.d3.get(label)) for label in labels]
        lines.append(", ".join(cells))
    return "\n".join(lines) + "\n"
