"""Pillarization, forward contracts, target codec, and decoding."""

import numpy as np
import pytest

from mf2sf.detector import (
    DetectionOutput,
    GridConfig,
    PillarTensor,
    TargetMap,
    assign_targets,
    count_params,
    decode,
    forward,
    init_params,
    pillarize,
)
from mf2sf.geometry import BoundingBox, wrap_angle
from mf2sf.tensor import Tensor

GRID = GridConfig()


def cloud(rng, n, span=25.0):
    pts = rng.uniform(-span, span, size=(n, 3)).astype(np.float32).astype(np.float64)
    pts[:, 2] = rng.uniform(-0.5, 3.5, size=n)
    feats = rng.uniform(0, 1, size=(n, 1))
    return pts, feats


def test_grid_config_validation():
    assert (GRID.nx, GRID.ny) == (64, 64)
    assert (GRID.out_nx, GRID.out_ny) == (32, 32)
    np.testing.assert_allclose(GRID.out_pixel, 1.92)
    with pytest.raises(ValueError, match="integer multiple"):
        GridConfig(x_min=-30.0, x_max=30.5)
    with pytest.raises(ValueError, match="z range"):
        GridConfig(z_min=2.0, z_max=1.0)


def test_pillarize_single_point_at_pixel_center():
    # Pixel (32, 32) has center (0.48, 0.48).
    pts = np.array([[0.48, 0.48, 1.0]])
    feats = np.array([[0.7]])
    pt = pillarize(pts, feats, GRID, rng_seed=0)
    assert pt.n_pillars == 1
    assert pt.pixel_indices[0] == 32 * 64 + 32
    assert pt.block.shape == (1, 9)
    np.testing.assert_array_equal(pt.point_pillar, [0])
    np.testing.assert_allclose(pt.block[0, :4], [0.48, 0.48, 1.0, 0.7], atol=1e-7)
    np.testing.assert_allclose(pt.block[0, 4:], 0.0, atol=1e-7)  # offsets vanish


def test_pillarize_cap_is_seeded_uniform_subsample():
    grid = GridConfig(max_points_per_pillar=32)
    rng = np.random.default_rng(0)
    pts = np.zeros((40, 3))
    pts[:, 0] = 0.3 + rng.uniform(-0.05, 0.05, 40)  # all in one pillar
    pts[:, 1] = 0.3
    pts[:, 2] = np.arange(40) * 0.01
    feats = np.ones((40, 1))
    a = pillarize(pts, feats, grid, rng_seed=7)
    b = pillarize(pts, feats, grid, rng_seed=7)
    c = pillarize(pts, feats, grid, rng_seed=8)
    assert a.n_pillars == 1 and a.block.shape[0] == 32
    np.testing.assert_array_equal(a.block, b.block)  # fixed seed reproduces
    assert not np.array_equal(a.block, c.block)  # different seed resamples
    # Retained rows are a subset of the input points.
    kept_z = np.sort(a.block[:, 2])
    assert set(np.round(kept_z / 0.01).astype(int)).issubset(set(range(40)))


def test_pillarize_indexing_matches_floor_oracle():
    rng = np.random.default_rng(3)
    pts, feats = cloud(rng, 500, span=35.0)  # some points leave the grid
    pt = pillarize(pts, feats, GRID, rng_seed=1)
    inside = pt.block.shape[0]
    assert pt.point_pillar.shape == (inside,)
    for r in range(inside):
        x, y = float(pt.block[r, 0]), float(pt.block[r, 1])
        ix = int(np.floor((x - GRID.x_min) / GRID.pixel_size))
        iy = int(np.floor((y - GRID.y_min) / GRID.pixel_size))
        assert iy * GRID.nx + ix == pt.pixel_indices[pt.point_pillar[r]]
    dropped = (
        (pts[:, 0] < GRID.x_min)
        | (pts[:, 0] >= GRID.x_max)
        | (pts[:, 1] < GRID.y_min)
        | (pts[:, 1] >= GRID.y_max)
        | (pts[:, 2] < GRID.z_min)
        | (pts[:, 2] >= GRID.z_max)
    )
    assert inside == (~dropped).sum()


def test_pillar_budget_drops_whole_pillars():
    g = GridConfig(max_pillars=3)
    rng = np.random.default_rng(5)
    pts, feats = cloud(rng, 200)
    pt = pillarize(pts, feats, g, rng_seed=0)
    assert pt.n_pillars == 3
    assert np.unique(pt.pixel_indices).size == 3


def test_param_layout_identical_across_instances():
    teacher = init_params(rng_seed=1)
    student = init_params(rng_seed=2)
    assert list(teacher.keys()) == list(student.keys())
    assert [p.data.shape for p in teacher.values()] == [p.data.shape for p in student.values()]
    assert count_params(teacher) == count_params(student)
    assert teacher["pointnet.w"].data.shape == (9, 32)
    assert teacher["fuse.w"].data.shape == (3, 3, 64, 32)
    # Existence head starts at the rare-foreground prior.
    np.testing.assert_allclose(teacher["head_cls.b"].data, -np.log(99.0), rtol=1e-6)


def test_forward_shapes_and_finiteness():
    rng = np.random.default_rng(11)
    pts, feats = cloud(rng, 800)
    out = forward(pillarize(pts, feats, GRID, 0), init_params(0), GRID)
    assert out.feature_map.data.shape == (32, 32, 32)
    assert out.cls.data.shape == (32, 32, 1)
    assert out.loc.data.shape == (32, 32, 8)
    assert np.all(out.cls.data > 0) and np.all(out.cls.data < 1)
    out_cat = forward(pillarize(pts, feats, GRID, 0), init_params(0), GRID, feature_layer="concat")
    assert out_cat.feature_map.data.shape == (32, 32, 64)
    with pytest.raises(ValueError, match="feature_layer"):
        forward(pillarize(pts, feats, GRID, 0), init_params(0), GRID, feature_layer="phi")


def test_forward_empty_cloud_is_deterministic():
    pt = pillarize(np.zeros((0, 3)), np.zeros((0, 1)), GRID, 0)
    params = init_params(3)
    a = forward(pt, params, GRID)
    b = forward(pt, params, GRID)
    np.testing.assert_array_equal(a.cls.data, b.cls.data)
    assert np.all(np.isfinite(a.cls.data))


def test_forward_rejects_non_finite():
    params = init_params(0)
    params["fuse.b"].data[0] = np.nan
    pt = pillarize(np.zeros((0, 3)), np.zeros((0, 1)), GRID, 0)
    with pytest.raises(FloatingPointError):
        forward(pt, params, GRID)


def test_forward_invariant_to_packed_row_order():
    # The per-pillar max must not depend on how rows are ordered in the
    # packed block, only on which pillar each row belongs to.
    rng = np.random.default_rng(13)
    pts, feats = cloud(rng, 300)
    pt = pillarize(pts, feats, GRID, rng_seed=2)
    perm = np.random.default_rng(29).permutation(pt.block.shape[0])
    shuffled = PillarTensor(
        block=pt.block[perm],
        point_pillar=pt.point_pillar[perm],
        pixel_indices=pt.pixel_indices,
        n_pillars=pt.n_pillars,
    )
    params = init_params(5)
    np.testing.assert_allclose(
        forward(pt, params, GRID).cls.data, forward(shuffled, params, GRID).cls.data, atol=1e-6
    )


def test_forward_permutation_invariant_within_pillars():
    # With no pillar over the cap, different shuffles keep the same point
    # sets per pillar; the PointNet max must not care about slot order.
    rng = np.random.default_rng(17)
    pts, feats = cloud(rng, 150)
    params = init_params(1)
    a = forward(pillarize(pts, feats, GRID, rng_seed=0), params, GRID)
    b = forward(pillarize(pts, feats, GRID, rng_seed=99), params, GRID)
    np.testing.assert_allclose(a.cls.data, b.cls.data, atol=2e-5)
    np.testing.assert_allclose(a.feature_map.data, b.feature_map.data, atol=2e-5)


# ---------------------------------------------------------------------------
# targets and decoding


def test_assign_targets_no_boxes():
    tm = assign_targets([], GRID)
    assert tm.n_positive == 0
    np.testing.assert_array_equal(tm.existence, 0.0)
    np.testing.assert_array_equal(tm.loc, 0.0)


def test_assign_targets_two_by_two_box():
    # Output pixels are 1.92 m; centers sit at x_min + (i+0.5)*1.92.
    # A box centered between four pixel centers with half extent 1.1
    # covers exactly those four.
    cx = GRID.x_min + 2 * 1.92
    cy = GRID.y_min + 3 * 1.92
    box = BoundingBox(np.array([cx, cy, 1.0]), np.array([2.2, 2.2, 1.5]), 0.0)
    tm = assign_targets([box], GRID)
    assert tm.n_positive == 4
    ys, xs = np.nonzero(tm.positive)
    assert set(zip(ys.tolist(), xs.tolist())) == {(2, 1), (2, 2), (3, 1), (3, 2)}
    got = tm.loc[tm.positive]
    np.testing.assert_allclose(np.abs(got[:, 0]), 0.5, atol=1e-6)  # half-pixel offsets
    np.testing.assert_allclose(np.abs(got[:, 1]), 0.5, atol=1e-6)
    np.testing.assert_allclose(got[:, 2], 1.0, atol=1e-6)
    np.testing.assert_allclose(got[:, 3:6], np.tile(np.log([2.2, 2.2, 1.5]), (4, 1)), rtol=1e-6)


def test_assign_targets_heading_sin_cos():
    box = BoundingBox(np.array([0.0, 0.0, 0.5]), np.array([4.0, 4.0, 1.5]), np.pi / 4)
    tm = assign_targets([box], GRID)
    assert tm.n_positive > 0
    got = tm.loc[tm.positive]
    np.testing.assert_allclose(got[:, 6], np.sqrt(2) / 2, rtol=1e-6)
    np.testing.assert_allclose(got[:, 7], np.sqrt(2) / 2, rtol=1e-6)


def test_assign_targets_overlap_uses_nearest_center():
    a = BoundingBox(np.array([0.0, 0.0, 0.5]), np.array([6.0, 6.0, 1.5]), 0.0, track_id=0)
    b = BoundingBox(np.array([3.0, 0.0, 0.5]), np.array([6.0, 6.0, 1.5]), 0.0, track_id=1)
    tm = assign_targets([a, b], GRID)
    px = GRID.x_min + (np.arange(GRID.out_nx) + 0.5) * GRID.out_pixel
    py = GRID.y_min + (np.arange(GRID.out_ny) + 0.5) * GRID.out_pixel
    xs, ys = np.meshgrid(px, py)
    for iy, ix in zip(*np.nonzero(tm.positive)):
        dx = tm.loc[iy, ix, 0] * GRID.out_pixel
        decoded_cx = xs[iy, ix] + dx
        da = abs(xs[iy, ix] - 0.0)
        db = abs(xs[iy, ix] - 3.0)
        expect_cx = 0.0 if (da < db or np.isclose(da, db)) else 3.0
        np.testing.assert_allclose(decoded_cx, expect_cx, atol=1e-5)


def make_output(existence, loc):
    return DetectionOutput(
        feature_map=Tensor(np.zeros((GRID.out_ny, GRID.out_nx, 32), dtype=np.float32)),
        cls=Tensor(existence.astype(np.float32)),
        loc=Tensor(loc.astype(np.float32)),
    )


def test_decode_inverts_encoding():
    rng = np.random.default_rng(23)
    boxes = [
        BoundingBox(np.array([-12.0, 5.0, 0.8]), np.array([1.9, 4.5, 1.6]), 0.4),
        BoundingBox(np.array([10.0, -8.0, 0.9]), np.array([2.1, 4.1, 1.5]), -2.9),
        BoundingBox(np.array([3.0, 18.0, 0.7]), np.array([0.6, 0.7, 1.8]), 1.2),
    ]
    tm = assign_targets(boxes, GRID)
    dets = decode(make_output(tm.existence * 0.99, tm.loc), GRID, score_threshold=0.3, nms_iou=0.5)
    assert len(dets) == len(boxes)
    matched = set()
    for det, score in dets:
        dists = [np.linalg.norm(det.center - b.center) for b in boxes]
        i = int(np.argmin(dists))
        matched.add(i)
        np.testing.assert_allclose(det.center, boxes[i].center, atol=1e-5)
        np.testing.assert_allclose(det.size, boxes[i].size, rtol=1e-5)
        dh = wrap_angle(det.heading - boxes[i].heading)
        np.testing.assert_allclose(dh, 0.0, atol=1e-5)
    assert matched == {0, 1, 2}


def test_decode_nms_keeps_highest_score():
    # Two pixels decode to the same physical box with scores 0.9 and 0.8.
    existence = np.zeros((GRID.out_ny, GRID.out_nx, 1))
    loc = np.zeros((GRID.out_ny, GRID.out_nx, 8))
    px, py = np.meshgrid(
        GRID.x_min + (np.arange(GRID.out_nx) + 0.5) * GRID.out_pixel,
        GRID.y_min + (np.arange(GRID.out_ny) + 0.5) * GRID.out_pixel,
    )
    target = np.array([0.48, 0.48, 1.0])
    for (iy, ix), score in (((16, 16), 0.9), ((16, 17), 0.8)):
        existence[iy, ix, 0] = score
        loc[iy, ix, 0] = (target[0] - px[iy, ix]) / GRID.out_pixel
        loc[iy, ix, 1] = (target[1] - py[iy, ix]) / GRID.out_pixel
        loc[iy, ix, 2] = target[2]
        loc[iy, ix, 3:6] = np.log([1.9, 4.5, 1.6])
        loc[iy, ix, 7] = 1.0
    dets = decode(make_output(existence, loc), GRID, 0.3, 0.5)
    assert len(dets) == 1
    box, score = dets[0]
    assert score == pytest.approx(0.9, abs=1e-6)
    np.testing.assert_allclose(box.center, target, atol=1e-5)


def test_decode_empty_below_threshold():
    existence = np.full((GRID.out_ny, GRID.out_nx, 1), 0.1)
    loc = np.zeros((GRID.out_ny, GRID.out_nx, 8))
    loc[:, :, 3:6] = 0.1
    loc[:, :, 7] = 1.0
    assert decode(make_output(existence, loc), GRID, 0.3, 0.5) == []
