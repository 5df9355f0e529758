"""Timing comparison of the jitted kernels against their numpy fallbacks.

Run: python3 benchmarks/bench_kernels.py [--repeats N]
The active backend is chosen by MF2SF_BACKEND as usual; this script times
both code paths in one process by calling the private numpy variants
directly, plus one full detector training step for context.
"""

import argparse
import time

import numpy as np

from mf2sf import kernels
from mf2sf.backend import BACKEND, USE_NUMBA


def timeit(fn, repeats):
    fn()  # warm jit caches and allocators
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_pair(name, public_fn, numpy_fn, args, repeats):
    t_pub = timeit(lambda: public_fn(*args), repeats)
    t_np = timeit(lambda: numpy_fn(*args), repeats)
    label = "numba" if USE_NUMBA else "numpy"
    speedup = t_np / t_pub if t_pub > 0 else float("inf")
    print(f"{name:<22} {label:>6}: {t_pub * 1e3:8.3f} ms   numpy: "
          f"{t_np * 1e3:8.3f} ms   ratio: {speedup:5.2f}x")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=7)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    print(f"backend: {BACKEND} (numba {'on' if USE_NUMBA else 'off'})\n")

    n_boxes = 256
    boxes = np.column_stack([
        rng.uniform(-30, 30, n_boxes),
        rng.uniform(-30, 30, n_boxes),
        rng.uniform(1, 3, n_boxes),
        rng.uniform(2, 5, n_boxes),
        rng.uniform(-np.pi, np.pi, n_boxes),
    ])
    corners = kernels.box_corners_bev(boxes)
    areas = boxes[:, 2] * boxes[:, 3]

    def iou_numpy(ba, bb):
        out = np.empty((ba.shape[0], bb.shape[0]))
        kernels._iou_matrix_numpy(corners, areas, corners, areas, out)
        return out

    def nms_numpy(b, thresh):
        keep = np.empty(b.shape[0], dtype=np.uint8)
        kernels._nms_numpy(corners, areas, thresh, keep)
        return keep

    bench_pair(
        "iou_matrix_bev 256^2", kernels.iou_matrix_bev, iou_numpy,
        (boxes, boxes), args.repeats,
    )
    bench_pair(
        "nms_bev 256", kernels.nms_bev, nms_numpy,
        (boxes, 0.5), args.repeats,
    )

    n_pts = 120_000
    keys = rng.integers(0, 4096, n_pts).astype(np.int64)
    bench_pair(
        "group_pillars 120k", kernels.group_pillars,
        lambda k, n, m: kernels._group_pillars_numpy(k, m),
        (keys, 4096, 32), args.repeats,
    )

    n_rows = 60_000
    vals = rng.standard_normal((n_rows, 32)).astype(np.float32)
    segs = np.sort(rng.integers(0, 4096, n_rows)).astype(np.int64)

    def segmax_numpy(v, s, k):
        out = np.zeros((k, v.shape[1]), dtype=v.dtype)
        arg = np.full((k, v.shape[1]), -1, dtype=np.int64)
        kernels._segment_max_numpy(v, s, out, arg)
        return out, arg

    bench_pair(
        "segment_max 60kx32", kernels.segment_max, segmax_numpy,
        (vals, segs, 4096), args.repeats,
    )

    img = rng.standard_normal((1, 64, 64, 32)).astype(np.float32)
    bench_pair(
        "im2col 64x64x32 k3", kernels.im2col, kernels._im2col_numpy,
        (img, 3, 1), args.repeats,
    )
    cols, _ = kernels.im2col(img, 3, 1)
    bench_pair(
        "col2im 64x64x32 k3",
        lambda c, k, s, h, w: kernels.col2im_add(c, k, s, h, w),
        lambda c, k, s, h, w: kernels._col2im_numpy(c, k, s, h, w),
        (cols, 3, 1, 64, 64), args.repeats,
    )

    # One full training step for scale: forward + backward on a synthetic frame.
    from mf2sf.detector import GridConfig, init_params, pillarize
    from mf2sf.simdata import SceneConfig, generate_sequence
    from mf2sf.training import LossConfig, TrainingDataset, sample_losses

    seq = generate_sequence(SceneConfig(n_frames=2, rng_seed=0))
    ds = TrainingDataset([seq])
    params = init_params(0)
    lcfg = LossConfig()
    grid = GridConfig()

    def step():
        total, *_ = sample_losses(ds, 0, params, grid, lcfg, 0, 0, multi_frame=False)
        for p in params.values():
            p.grad = None
        total.backward()

    t = timeit(step, args.repeats)
    print(f"\ndetector fwd+bwd single frame: {t * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
