"""Hot numeric kernels with numba and pure-numpy paths.

Each kernel exists twice: a loop implementation that numba jits (the
default path) and a numpy fallback. :mod:`mf2sf.backend` selects the
active set via ``MF2SF_BACKEND``; ``benchmarks/bench_kernels.py`` times
both. The loop kernels avoid ``prange`` so results are bit-deterministic,
and ``col2im_add`` keeps the same per-cell accumulation order in both
paths so the backends agree bitwise.

Box convention used throughout: a BEV box is ``(cx, cy, w, l, heading)``
where ``l`` spans the box-local x axis (along heading) and ``w`` the
box-local y axis. Corners are returned counterclockwise.
"""

from __future__ import annotations

import numpy as np

from .backend import USE_NUMBA

if USE_NUMBA:
    from numba import njit

    def _jit(fn):
        return njit(cache=True, fastmath=False)(fn)


# ---------------------------------------------------------------------------
# rotated-rectangle clipping (Sutherland-Hodgman)


def _clip_area_src(pa, pb):
    # Area of intersection of two convex quads, corners CCW, (4, 2) each.
    cur = np.empty((16, 2))
    nxt = np.empty((16, 2))
    n_cur = 4
    for i in range(4):
        cur[i, 0] = pb[i, 0]
        cur[i, 1] = pb[i, 1]
    for e in range(4):
        ax = pa[e, 0]
        ay = pa[e, 1]
        ex = pa[(e + 1) % 4, 0] - ax
        ey = pa[(e + 1) % 4, 1] - ay
        n_nxt = 0
        for i in range(n_cur):
            px = cur[i, 0]
            py = cur[i, 1]
            qx = cur[(i + 1) % n_cur, 0]
            qy = cur[(i + 1) % n_cur, 1]
            dp = ex * (py - ay) - ey * (px - ax)
            dq = ex * (qy - ay) - ey * (qx - ax)
            if dp >= 0.0:
                nxt[n_nxt, 0] = px
                nxt[n_nxt, 1] = py
                n_nxt += 1
            if (dp > 0.0 and dq < 0.0) or (dp < 0.0 and dq > 0.0):
                t = dp / (dp - dq)
                nxt[n_nxt, 0] = px + t * (qx - px)
                nxt[n_nxt, 1] = py + t * (qy - py)
                n_nxt += 1
        if n_nxt == 0:
            return 0.0
        n_cur = n_nxt
        tmp = cur
        cur = nxt
        nxt = tmp
    area = 0.0
    for i in range(n_cur):
        j = (i + 1) % n_cur
        area += cur[i, 0] * cur[j, 1] - cur[j, 0] * cur[i, 1]
    return 0.5 * abs(area)


def _make_iou_matrix(clip_fn):
    def iou_matrix(corners_a, areas_a, corners_b, areas_b, out):
        for i in range(corners_a.shape[0]):
            for j in range(corners_b.shape[0]):
                if areas_a[i] <= 0.0 or areas_b[j] <= 0.0:
                    out[i, j] = 0.0
                    continue
                inter = clip_fn(corners_a[i], corners_b[j])
                union = areas_a[i] + areas_b[j] - inter
                out[i, j] = inter / union if union > 0.0 else 0.0

    return iou_matrix


def _make_nms(clip_fn):
    def nms(corners, areas, iou_thresh, keep):
        # corners pre-sorted by descending score; keep is uint8 out buffer
        n = corners.shape[0]
        for i in range(n):
            keep[i] = 1
        for i in range(n):
            if keep[i] == 0:
                continue
            for j in range(i + 1, n):
                if keep[j] == 0:
                    continue
                inter = clip_fn(corners[i], corners[j])
                union = areas[i] + areas[j] - inter
                iou = inter / union if union > 0.0 else 0.0
                if iou >= iou_thresh:
                    keep[j] = 0

    return nms


_clip_area_numpy = _clip_area_src
_iou_matrix_numpy = _make_iou_matrix(_clip_area_src)
_nms_numpy = _make_nms(_clip_area_src)

if USE_NUMBA:
    _clip_area_numba = _jit(_clip_area_src)
    _iou_matrix_numba = _jit(_make_iou_matrix(_clip_area_numba))
    _nms_numba = _jit(_make_nms(_clip_area_numba))


def box_corners_bev(boxes: np.ndarray) -> np.ndarray:
    """CCW BEV corners (N, 4, 2) for boxes (N, 5) = (cx, cy, w, l, heading)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    c = np.cos(boxes[:, 4])
    s = np.sin(boxes[:, 4])
    hl = 0.5 * boxes[:, 3]
    hw = 0.5 * boxes[:, 2]
    lx = np.stack([hl, -hl, -hl, hl], axis=1)
    ly = np.stack([hw, hw, -hw, -hw], axis=1)
    out = np.empty((boxes.shape[0], 4, 2))
    out[:, :, 0] = boxes[:, 0:1] + c[:, None] * lx - s[:, None] * ly
    out[:, :, 1] = boxes[:, 1:2] + s[:, None] * lx + c[:, None] * ly
    return out


def clip_area(corners_a: np.ndarray, corners_b: np.ndarray) -> float:
    """Intersection area of two convex CCW quads given as (4, 2) corners."""
    if USE_NUMBA:
        return float(_clip_area_numba(corners_a, corners_b))
    return float(_clip_area_numpy(corners_a, corners_b))


def iou_matrix_bev(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise rotated-rectangle IoU, (N, M) for (N, 5) x (M, 5) boxes."""
    boxes_a = np.atleast_2d(np.asarray(boxes_a, dtype=np.float64))
    boxes_b = np.atleast_2d(np.asarray(boxes_b, dtype=np.float64))
    ca = box_corners_bev(boxes_a)
    cb = box_corners_bev(boxes_b)
    aa = boxes_a[:, 2] * boxes_a[:, 3]
    ab = boxes_b[:, 2] * boxes_b[:, 3]
    out = np.empty((boxes_a.shape[0], boxes_b.shape[0]))
    fn = _iou_matrix_numba if USE_NUMBA else _iou_matrix_numpy
    fn(ca, aa, cb, ab, out)
    return out


def nms_bev(boxes: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy rotated NMS over score-desc-sorted (N, 5) boxes.

    Returns a boolean keep mask. A box is suppressed when its IoU with an
    earlier kept box is >= iou_thresh.
    """
    boxes = np.atleast_2d(np.asarray(boxes, dtype=np.float64))
    corners = box_corners_bev(boxes)
    areas = boxes[:, 2] * boxes[:, 3]
    keep = np.empty(boxes.shape[0], dtype=np.uint8)
    fn = _nms_numba if USE_NUMBA else _nms_numpy
    fn(corners, areas, float(iou_thresh), keep)
    return keep.astype(bool)


# ---------------------------------------------------------------------------
# pillar grouping


def _group_pillars_src(keys, n_cells, max_points, point_pillar, point_slot, pillar_keys, counts):
    # keys: flat pixel index per point, processed in the given order.
    # Pillars are numbered by first appearance; each holds at most
    # max_points points, extras are dropped (point_pillar stays -1).
    cell_map = np.full(n_cells, -1, dtype=np.int32)
    n_pillars = 0
    for m in range(keys.shape[0]):
        k = keys[m]
        p = cell_map[k]
        if p == -1:
            p = n_pillars
            cell_map[k] = p
            pillar_keys[p] = k
            counts[p] = 0
            n_pillars += 1
        c = counts[p]
        if c < max_points:
            point_pillar[m] = p
            point_slot[m] = c
            counts[p] = c + 1
    return n_pillars


_group_pillars_loop = _jit(_group_pillars_src) if USE_NUMBA else None


def _group_pillars_numpy(keys, max_points):
    m = keys.shape[0]
    uniq, first, inv = np.unique(keys, return_index=True, return_inverse=True)
    appearance = np.argsort(first, kind="stable")
    rank = np.empty(uniq.shape[0], dtype=np.int64)
    rank[appearance] = np.arange(uniq.shape[0])
    point_pillar = rank[inv]
    pillar_keys = uniq[appearance]
    order = np.argsort(point_pillar, kind="stable")
    sorted_pillar = point_pillar[order]
    starts = np.searchsorted(sorted_pillar, np.arange(uniq.shape[0]))
    slot_sorted = np.arange(m) - starts[sorted_pillar]
    point_slot = np.empty(m, dtype=np.int64)
    point_slot[order] = slot_sorted
    dropped = point_slot >= max_points
    point_pillar = point_pillar.astype(np.int32)
    point_slot = point_slot.astype(np.int32)
    point_pillar[dropped] = -1
    point_slot[dropped] = -1
    return point_pillar, point_slot, pillar_keys.astype(np.int64)


def group_pillars(keys: np.ndarray, n_cells: int, max_points: int):
    """Group points (by flat pixel key, in order) into capped pillars.

    Returns (point_pillar, point_slot, pillar_keys): per-point pillar index
    and slot (-1 where the point was dropped by the cap), and the pillar's
    flat pixel key in first-appearance order.
    """
    keys = np.ascontiguousarray(keys, dtype=np.int64)
    m = keys.shape[0]
    if m == 0:
        empty32 = np.empty(0, dtype=np.int32)
        return empty32, empty32.copy(), np.empty(0, dtype=np.int64)
    if USE_NUMBA:
        point_pillar = np.full(m, -1, dtype=np.int32)
        point_slot = np.full(m, -1, dtype=np.int32)
        pillar_keys = np.empty(m, dtype=np.int64)
        counts = np.empty(m, dtype=np.int32)
        n = _group_pillars_loop(
            keys, n_cells, max_points, point_pillar, point_slot, pillar_keys, counts
        )
        return point_pillar, point_slot, pillar_keys[:n].copy()
    return _group_pillars_numpy(keys, max_points)


def _segment_max_src(values, seg, out, arg):
    n, c = values.shape
    for i in range(n):
        s = seg[i]
        for j in range(c):
            v = values[i, j]
            if arg[s, j] < 0 or v > out[s, j]:
                out[s, j] = v
                arg[s, j] = i


_segment_max_loop = _jit(_segment_max_src) if USE_NUMBA else None


def _segment_max_numpy(values, seg, out, arg):
    n = values.shape[0]
    n_segments = out.shape[0]
    # Stable sort by segment keeps original order within a segment, so the
    # first-occurrence tie-break below matches the loop kernel exactly.
    order = np.argsort(seg, kind="stable")
    vs = values[order]
    ss = seg[order]
    counts = np.bincount(ss, minlength=n_segments)
    present = counts > 0
    starts = np.zeros(n_segments, dtype=np.int64)
    starts[1:] = np.cumsum(counts)[:-1]
    out[present] = np.maximum.reduceat(vs, starts[present], axis=0)
    pos = np.where(vs == out[ss], np.arange(n)[:, None], n)
    first_sorted = np.minimum.reduceat(pos, starts[present], axis=0)
    arg[present] = order[first_sorted]


def segment_max(values: np.ndarray, segment_ids: np.ndarray, n_segments: int):
    """Per-segment, per-channel max over rows of values (N, C).

    Returns (out, argmax) of shapes (n_segments, C); ties resolve to the
    first row in input order. Empty segments give out 0 and argmax -1.
    """
    values = np.ascontiguousarray(values)
    seg = np.ascontiguousarray(segment_ids, dtype=np.int64)
    if values.ndim != 2 or seg.shape != (values.shape[0],):
        raise ValueError(
            f"values must be (N, C) with matching ids, got {values.shape} and {seg.shape}"
        )
    out = np.zeros((n_segments, values.shape[1]), dtype=values.dtype)
    arg = np.full((n_segments, values.shape[1]), -1, dtype=np.int64)
    if values.shape[0] == 0 or n_segments == 0:
        return out, arg
    if seg.min() < 0 or seg.max() >= n_segments:
        raise ValueError("segment ids out of range")
    if USE_NUMBA:
        _segment_max_loop(values, seg, out, arg)
    else:
        _segment_max_numpy(values, seg, out, arg)
    return out, arg


# ---------------------------------------------------------------------------
# conv2d patch extraction and its adjoint


def same_padding(size: int, ksize: int, stride: int) -> tuple[int, int, int]:
    """(out_size, pad_begin, pad_end) for SAME padding."""
    out = -(-size // stride)
    pad_total = max((out - 1) * stride + ksize - size, 0)
    pad_begin = pad_total // 2
    return out, pad_begin, pad_total - pad_begin


def _im2col_src(xpad, ksize, stride, oh, ow, out):
    n_batch, _, _, nc = xpad.shape
    for di in range(ksize):
        for dj in range(ksize):
            for n in range(n_batch):
                for i in range(oh):
                    for j in range(ow):
                        for c in range(nc):
                            out[n, i, j, di, dj, c] = xpad[n, i * stride + di, j * stride + dj, c]


_im2col_loop = _jit(_im2col_src) if USE_NUMBA else None


def _im2col_numpy(x, ksize, stride):
    _, h, w, _ = x.shape
    oh, pt, pb = same_padding(h, ksize, stride)
    ow, pl, pr = same_padding(w, ksize, stride)
    xpad = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xpad, (ksize, ksize), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols, (oh, ow)


def im2col(x: np.ndarray, ksize: int, stride: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Extract SAME-padded conv patches from (N, H, W, C).

    Returns (cols, (oh, ow)) with cols shaped (N, OH, OW, k, k, C).
    """
    if not USE_NUMBA:
        return _im2col_numpy(x, ksize, stride)
    n, h, w, c = x.shape
    oh, pt, pb = same_padding(h, ksize, stride)
    ow, pl, pr = same_padding(w, ksize, stride)
    xpad = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    out = np.empty((n, oh, ow, ksize, ksize, c), dtype=x.dtype)
    _im2col_loop(xpad, ksize, stride, oh, ow, out)
    return out, (oh, ow)


def _col2im_src(gcols, ksize, stride, gpad):
    n_batch, oh, ow = gcols.shape[0], gcols.shape[1], gcols.shape[2]
    nc = gcols.shape[5]
    for di in range(ksize):
        for dj in range(ksize):
            for n in range(n_batch):
                for i in range(oh):
                    for j in range(ow):
                        for c in range(nc):
                            gpad[n, i * stride + di, j * stride + dj, c] += gcols[n, i, j, di, dj, c]


_col2im_loop = _jit(_col2im_src) if USE_NUMBA else None


def _col2im_numpy(gcols, ksize, stride, h, w):
    n, oh, ow = gcols.shape[0], gcols.shape[1], gcols.shape[2]
    c = gcols.shape[5]
    _, pt, pb = same_padding(h, ksize, stride)
    _, pl, pr = same_padding(w, ksize, stride)
    gpad = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=gcols.dtype)
    for di in range(ksize):
        for dj in range(ksize):
            gpad[:, di : di + oh * stride : stride, dj : dj + ow * stride : stride, :] += gcols[
                :, :, :, di, dj, :
            ]
    return gpad[:, pt : pt + h, pl : pl + w, :]


def col2im_add(gcols: np.ndarray, ksize: int, stride: int, h: int, w: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to (N, H, W, C)."""
    if not USE_NUMBA:
        return _col2im_numpy(gcols, ksize, stride, h, w)
    n = gcols.shape[0]
    c = gcols.shape[5]
    _, pt, pb = same_padding(h, ksize, stride)
    _, pl, pr = same_padding(w, ksize, stride)
    gpad = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=gcols.dtype)
    _col2im_loop(gcols, ksize, stride, gpad)
    return gpad[:, pt : pt + h, pl : pl + w, :]
