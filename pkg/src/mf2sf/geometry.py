"""Rigid-pose math, oriented boxes, and multi-frame point aggregation.

Everything here runs in float64; registration round trips are expected to
hold to 1e-9. Point transforms are written as elementwise expressions
rather than matmul so that transforming a subset of an array is bitwise
identical to transforming the full array and slicing, which the tracked
and static aggregators rely on to agree exactly on points outside boxes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angle(angle):
    """Wrap an angle (scalar or array) to [-pi, pi).

    Values already in range are returned unchanged (bitwise), so wrapping
    is idempotent; this keeps stored angles stable across re-validation.
    """
    wrapped = (angle + np.pi) % TWO_PI - np.pi
    return np.where((angle >= -np.pi) & (angle < np.pi), angle, wrapped)


class ObjectClass(IntEnum):
    VEHICLE = 0
    PEDESTRIAN = 1


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: x -> rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.ascontiguousarray(self.rotation, dtype=np.float64)
        t = np.ascontiguousarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"pose needs (3, 3) rotation and (3,) translation, got {r.shape} and {t.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation is not orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self.compose(other)).apply(x) = self.apply(other.apply(x))."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T.copy()
        return Pose(rt, -(rt @ self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (N, 3) points. Elementwise so sub-array results match sliced full-array results bitwise."""
        p = np.asarray(points, dtype=np.float64)
        r = self.rotation
        return p[:, 0:1] * r[:, 0] + p[:, 1:2] * r[:, 1] + p[:, 2:3] * r[:, 2] + self.translation

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def yaw_pose(yaw: float, translation=(0.0, 0.0, 0.0)) -> Pose:
    """Pose rotating about +z by yaw, then translating."""
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return Pose(rot, np.asarray(translation, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class BoundingBox:
    """Oriented box: size is (w, l, h) with l spanning the heading axis."""

    center: np.ndarray
    size: np.ndarray
    heading: float
    track_id: int = 0
    class_id: ObjectClass = ObjectClass.VEHICLE

    def __post_init__(self):
        center = np.ascontiguousarray(self.center, dtype=np.float64)
        size = np.ascontiguousarray(self.size, dtype=np.float64)
        if center.shape != (3,) or size.shape != (3,):
            raise ValueError("box needs (3,) center and (3,) size")
        if not (np.all(np.isfinite(center)) and np.all(np.isfinite(size)) and np.isfinite(self.heading)):
            raise ValueError("box contains non-finite values")
        if np.any(size <= 0.0):
            raise ValueError(f"box size must be strictly positive, got {size}")
        if self.track_id < 0:
            raise ValueError("track_id must be >= 0")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))
        object.__setattr__(self, "class_id", ObjectClass(self.class_id))


@dataclass(frozen=True, eq=False)
class PointCloudFrame:
    """One sweep: sensor-frame points and per-point features, plus labels."""

    t: int
    points: np.ndarray
    features: np.ndarray
    ego_pose: Pose
    boxes: tuple[BoundingBox, ...] = field(default_factory=tuple)

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        feat = np.ascontiguousarray(self.features, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if feat.ndim != 2 or feat.shape[0] != pts.shape[0]:
            raise ValueError(f"features must be (N, c) matching points, got {feat.shape}")
        if feat.shape[1] < 1:
            raise ValueError("features need at least one column")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(feat))):
            raise ValueError("frame contains non-finite values")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "features", feat)
        object.__setattr__(self, "boxes", tuple(self.boxes))

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


def box_to_pose(box: BoundingBox) -> Pose:
    """Box-local -> frame coordinates: yaw by heading, translate to center."""
    return yaw_pose(box.heading, box.center)


def points_in_box(points: np.ndarray, box: BoundingBox) -> np.ndarray:
    """Boolean mask of points inside the box (boundary inclusive).

    Box-local x (the heading axis) is bounded by +-l/2 = size[1]/2, local y
    by +-w/2 = size[0]/2, z by +-h/2 = size[2]/2.
    """
    p = np.asarray(points, dtype=np.float64) - box.center
    c, s = np.cos(box.heading), np.sin(box.heading)
    lx = c * p[:, 0] + s * p[:, 1]
    ly = -s * p[:, 0] + c * p[:, 1]
    w, l, h = box.size
    return (np.abs(lx) <= 0.5 * l) & (np.abs(ly) <= 0.5 * w) & (np.abs(p[:, 2]) <= 0.5 * h)


def transform_frame(src: PointCloudFrame, target_pose: Pose) -> np.ndarray:
    """Re-express a frame's points in the coordinates of target_pose."""
    return target_pose.inverse().compose(src.ego_pose).apply(src.points)


def _check_feature_widths(frames) -> int:
    widths = {f.features.shape[1] for f in frames}
    if len(widths) != 1:
        raise ValueError(f"frames have mismatched feature widths: {sorted(widths)}")
    return widths.pop()


def aggregate_static(frames, target_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Union all frames' points in the target frame's coordinates.

    Every point follows the ego path; no deduplication. Output order is
    frame index ascending, original point order within each frame.
    """
    _check_feature_widths(frames)
    target = frames[target_index]
    out_pts, out_feat = [], []
    for q, frame in enumerate(frames):
        if q == target_index:
            out_pts.append(frame.points.copy())
        else:
            out_pts.append(transform_frame(frame, target.ego_pose))
        out_feat.append(frame.features)
    return np.concatenate(out_pts, axis=0), np.concatenate(out_feat, axis=0)


def _assign_boxes(points: np.ndarray, boxes) -> np.ndarray:
    """Per-point owning box index, -1 outside all boxes, nearest center on overlap."""
    owner = np.full(points.shape[0], -1, dtype=np.int64)
    if not boxes:
        return owner
    masks = np.stack([points_in_box(points, b) for b in boxes])
    centers = np.stack([b.center for b in boxes])
    d2 = ((points[None, :, :] - centers[:, None, :]) ** 2).sum(axis=2)
    d2 = np.where(masks, d2, np.inf)
    inside = masks.any(axis=0)
    owner[inside] = d2.argmin(axis=0)[inside]
    return owner


def aggregate_tracked(frames, target_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Union frames with per-track rigid de-blurring of box points.

    A point owned by box k in source frame q is carried so its box-local
    coordinates are preserved exactly: x_t = pose(b_t^k) o pose(b_q^k)^-1
    applied to x_q. Points outside every box follow the ego path as in
    aggregate_static. Points of tracks absent from the target frame are
    dropped.
    """
    _check_feature_widths(frames)
    target = frames[target_index]
    target_boxes = {b.track_id: b for b in target.boxes}
    out_pts, out_feat = [], []
    for q, frame in enumerate(frames):
        if q == target_index:
            out_pts.append(frame.points.copy())
            out_feat.append(frame.features)
            continue
        pts = frame.points
        owner = _assign_boxes(pts, frame.boxes)
        moved = np.empty_like(pts)
        keep = np.ones(pts.shape[0], dtype=bool)
        free = owner < 0
        if free.any():
            rel = target.ego_pose.inverse().compose(frame.ego_pose)
            moved[free] = rel.apply(pts[free])
        for bi, box in enumerate(frame.boxes):
            sel = owner == bi
            if not sel.any():
                continue
            target_box = target_boxes.get(box.track_id)
            if target_box is None:
                keep[sel] = False
                continue
            carry = box_to_pose(target_box).compose(box_to_pose(box).inverse())
            moved[sel] = carry.apply(pts[sel])
        out_pts.append(moved[keep])
        out_feat.append(frame.features[keep])
    return np.concatenate(out_pts, axis=0), np.concatenate(out_feat, axis=0)
