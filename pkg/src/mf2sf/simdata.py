"""Synthetic labeled LiDAR sequences and their on-disk format.

A scene is a flat ground plane plus cuboid objects observed by a yaw-only
moving sensor at ground level. Points are allocated per frame across
ground annuli and visible box faces with weight area / range^2 (largest
remainder, so the per-frame budget is hit exactly), then perturbed by
isotropic Gaussian noise. Every float that ends up in a frame is
quantized through float32 at creation, so writing and re-reading a
sequence is bit-exact.

File layout (little-endian): magic "MF2SF", u16 version, u32 frame count;
per frame u32 N, u8 c, N x 3 f32 points, N x c f32 features, 12 x f64 ego
pose (row-major rotation then translation), u32 box count; per box 8 x
f32 (center, size, heading, reserved) + u32 track_id + u8 class_id.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    BoundingBox,
    ObjectClass,
    PointCloudFrame,
    Pose,
    wrap_angle,
    yaw_pose,
)

MAGIC = b"MF2SF"
FORMAT_VERSION = 1

GROUND_RADII = (2.0, 5.0, 10.0, 20.0, 30.0, 36.0)
GROUND_REFLECTANCE = 0.2
REFLECTANCE_NOISE = 0.05
FACE_INSET = 1.0 - 1e-4  # keeps quantized surface points strictly inside their box
# The ego frame origin sits on the ground; the scanning aperture is mounted
# this far above it, which sets face visibility and ground incidence.
SENSOR_HEIGHT = 1.8

VEHICLE_SIZE = np.array([1.9, 4.5, 1.6])
PEDESTRIAN_SIZE = np.array([0.6, 0.6, 1.8])


class FormatError(Exception):
    """Raised when a sequence or manifest file cannot be decoded."""


@dataclass(frozen=True)
class SceneConfig:
    n_frames: int = 10
    frame_dt: float = 0.1
    area: float = 30.0
    n_vehicles: int = 4
    n_pedestrians: int = 2
    n_static_clutter: int = 3
    points_per_frame_target: int = 4096
    noise_sigma: float = 0.02
    ego_speed: float = 2.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if min(self.n_vehicles, self.n_pedestrians, self.n_static_clutter) < 0:
            raise ValueError("object counts must be >= 0")
        if self.points_per_frame_target < 0:
            raise ValueError("points_per_frame_target must be >= 0")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be >= 0")
        if self.frame_dt <= 0.0 or self.area <= 0.0:
            raise ValueError("frame_dt and area must be positive")


@dataclass(frozen=True, eq=False)
class ObjectTrack:
    """One rigid object's world trajectory over the whole sequence."""

    track_id: int
    class_id: ObjectClass
    size: np.ndarray  # (3,) w, l, h; float32-exact
    centers: np.ndarray  # (T, 3) world
    headings: np.ndarray  # (T,) world
    reflectance: float
    labeled: bool = True

    def __post_init__(self):
        size = np.ascontiguousarray(self.size, dtype=np.float64)
        centers = np.ascontiguousarray(self.centers, dtype=np.float64)
        headings = np.ascontiguousarray(self.headings, dtype=np.float64)
        if centers.shape != (headings.shape[0], 3):
            raise ValueError("centers must be (T, 3) matching headings (T,)")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "headings", headings)


@dataclass(frozen=True, eq=False)
class Sequence:
    frames: tuple[PointCloudFrame, ...]

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))

    def __len__(self) -> int:
        return len(self.frames)


def _quantize_f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).astype(np.float32)


def _quantize_heading(h: float) -> float:
    # float32 rounding can push a wrapped angle just past +-pi; re-wrap and
    # re-quantize until stable so stored headings survive re-validation.
    h = float(wrap_angle(float(h)))
    for _ in range(4):
        h32 = float(np.float32(h))
        if -np.pi <= h32 < np.pi:
            return h32
        h = float(wrap_angle(h32))
    raise AssertionError("heading quantization did not converge")


# ---------------------------------------------------------------------------
# trajectories


def vehicle_track(
    start_xy,
    heading: float,
    speed: float,
    yaw_rate: float,
    size,
    n_frames: int,
    frame_dt: float,
    track_id: int,
    reflectance: float,
) -> ObjectTrack:
    """Constant-speed track; heading advances by yaw_rate (rad/s)."""
    size = _quantize_f32(size).astype(np.float64)
    centers = np.empty((n_frames, 3))
    headings = np.empty(n_frames)
    pos = np.array([start_xy[0], start_xy[1], 0.5 * size[2]])
    h = heading
    for t in range(n_frames):
        centers[t] = pos
        headings[t] = h
        pos = pos + speed * frame_dt * np.array([np.cos(h), np.sin(h), 0.0])
        h = h + yaw_rate * frame_dt
    return ObjectTrack(track_id, ObjectClass.VEHICLE, size, centers, headings, reflectance)


def pedestrian_track(
    rng: np.random.Generator,
    start_xy,
    heading: float,
    speed: float,
    size,
    n_frames: int,
    frame_dt: float,
    track_id: int,
    reflectance: float,
    walk_sigma: float = 0.35,
) -> ObjectTrack:
    """Constant-speed track whose heading takes a Gaussian random walk."""
    size = _quantize_f32(size).astype(np.float64)
    centers = np.empty((n_frames, 3))
    headings = np.empty(n_frames)
    pos = np.array([start_xy[0], start_xy[1], 0.5 * size[2]])
    h = heading
    for t in range(n_frames):
        centers[t] = pos
        headings[t] = h
        pos = pos + speed * frame_dt * np.array([np.cos(h), np.sin(h), 0.0])
        h = h + walk_sigma * rng.normal()
    return ObjectTrack(track_id, ObjectClass.PEDESTRIAN, size, centers, headings, reflectance)


def static_track(
    center_xy, heading: float, size, n_frames: int, track_id: int, reflectance: float, labeled: bool
) -> ObjectTrack:
    size = _quantize_f32(size).astype(np.float64)
    center = np.array([center_xy[0], center_xy[1], 0.5 * size[2]])
    centers = np.tile(center, (n_frames, 1))
    headings = np.full(n_frames, float(heading))
    return ObjectTrack(track_id, ObjectClass.VEHICLE, size, centers, headings, reflectance, labeled)


def ego_path(cfg: SceneConfig) -> list[Pose]:
    """Yaw-only gentle arc on the ground plane, starting at the origin."""
    yaw_rate = 0.06
    poses = []
    pos = np.zeros(3)
    yaw = 0.0
    for _ in range(cfg.n_frames):
        poses.append(yaw_pose(yaw, pos.copy()))
        pos = pos + cfg.ego_speed * cfg.frame_dt * np.array([np.cos(yaw), np.sin(yaw), 0.0])
        yaw += yaw_rate * cfg.frame_dt
    return poses


def sample_tracks(cfg: SceneConfig, rng: np.random.Generator) -> list[ObjectTrack]:
    """Draw the scene's object trajectories. Clutter tracks are unlabeled."""
    tracks = []
    tid = 0
    span = 0.55 * cfg.area
    for _ in range(cfg.n_vehicles):
        size = VEHICLE_SIZE * rng.uniform(0.9, 1.1, size=3)
        start = rng.uniform(-span, span, size=2)
        # Half-circle with margin for yaw-rate and ego-yaw drift: cuboid
        # clouds carry no front/back cue, so theta and theta+pi would be
        # indistinguishable targets and sin/cos regression would collapse
        # to zero. Keeping headings inside one half-circle makes the
        # footprint-to-heading map single-valued.
        heading = rng.uniform(-1.25, 1.25)
        speed = rng.uniform(2.0, 8.0)
        yaw_rate = rng.uniform(-0.2, 0.2) if rng.random() < 0.5 else 0.0
        tracks.append(
            vehicle_track(start, heading, speed, yaw_rate, size, cfg.n_frames, cfg.frame_dt, tid, rng.uniform(0.2, 0.9))
        )
        tid += 1
    for _ in range(cfg.n_pedestrians):
        size = PEDESTRIAN_SIZE * rng.uniform(0.9, 1.1, size=3)
        start = rng.uniform(-span, span, size=2)
        heading = rng.uniform(-np.pi, np.pi)
        speed = rng.uniform(0.5, 1.5)
        tracks.append(
            pedestrian_track(rng, start, heading, speed, size, cfg.n_frames, cfg.frame_dt, tid, rng.uniform(0.2, 0.9))
        )
        tid += 1
    for _ in range(cfg.n_static_clutter):
        size = rng.uniform(0.3, 1.4, size=3)
        center = rng.uniform(-span, span, size=2)
        heading = rng.uniform(-np.pi, np.pi)
        tracks.append(
            static_track(center, heading, size, cfg.n_frames, tid, rng.uniform(0.2, 0.9), labeled=False)
        )
        tid += 1
    return tracks


# ---------------------------------------------------------------------------
# rendering


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation proportional to weights, summing exactly to total."""
    if total <= 0 or weights.size == 0 or weights.sum() <= 0.0:
        return np.zeros(weights.size, dtype=np.int64)
    quota = weights / weights.sum() * total
    base = np.floor(quota).astype(np.int64)
    frac = quota - base
    short = total - int(base.sum())
    order = np.argsort(-frac, kind="stable")
    base[order[:short]] += 1
    return base


_FACES = (
    (0, 1.0),
    (0, -1.0),
    (1, 1.0),
    (1, -1.0),
    (2, 1.0),
    (2, -1.0),
)


def _ego_yaw(pose: Pose) -> float:
    r = pose.rotation
    if abs(r[2, 2] - 1.0) > 1e-9:
        raise ValueError("ego poses must be yaw-only")
    return float(np.arctan2(r[1, 0], r[0, 0]))


def render_sequence(cfg, tracks, ego_poses, rng, with_provenance: bool = False):
    """Render frames for given trajectories and ego poses.

    Returns the Sequence, plus per-frame provenance arrays (ground = -1,
    otherwise index into `tracks`) when with_provenance is set.
    """
    if len(ego_poses) != cfg.n_frames:
        raise ValueError("need one ego pose per frame")
    frames = []
    provenance = []
    for t in range(cfg.n_frames):
        ego = ego_poses[t]
        ego_yaw = _ego_yaw(ego)
        sensor = ego.translation + np.array([0.0, 0.0, SENSOR_HEIGHT])

        # Collect sampleable entities in a fixed order: ground annuli, then
        # each track's visible faces.
        entities = []  # (kind, payload, weight)
        for a in range(len(GROUND_RADII) - 1):
            r0, r1 = GROUND_RADII[a], GROUND_RADII[a + 1]
            area = np.pi * (r1 * r1 - r0 * r0)
            rep = 0.5 * (r0 + r1)
            # Inverse-cube law for a horizontal patch seen from height h.
            weight = area * SENSOR_HEIGHT / (rep**2 + SENSOR_HEIGHT**2) ** 1.5
            entities.append(("ground", (r0, r1), weight))
        for k, tr in enumerate(tracks):
            w, l, h = tr.size
            half = np.array([0.5 * l, 0.5 * w, 0.5 * h])  # box-local x spans l
            areas = {0: w * h, 1: l * h, 2: w * l}
            pose = yaw_pose(tr.headings[t], tr.centers[t])
            for axis, sign in _FACES:
                center_local = np.zeros(3)
                center_local[axis] = sign * half[axis]
                face_center = pose.apply(center_local[None, :])[0]
                normal = sign * pose.rotation[:, axis]
                to_sensor = sensor - face_center
                if float(normal @ to_sensor) <= 0.0:
                    continue
                r = max(float(np.linalg.norm(to_sensor)), 1.0)
                entities.append(("face", (k, axis, sign, half, pose), areas[axis] / r**2))

        alloc = _largest_remainder(
            np.array([e[2] for e in entities]), cfg.points_per_frame_target
        )

        world_pts = []
        refl = []
        prov = []
        for (kind, payload, _), n in zip(entities, alloc):
            if n == 0:
                continue
            if kind == "ground":
                r0, r1 = payload
                radius = np.sqrt(rng.uniform(r0 * r0, r1 * r1, size=n))
                angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
                pts = np.zeros((n, 3))
                pts[:, 0] = sensor[0] + radius * np.cos(angle)
                pts[:, 1] = sensor[1] + radius * np.sin(angle)
                base = GROUND_REFLECTANCE
                prov.append(np.full(n, -1, dtype=np.int64))
            else:
                k, axis, sign, half, pose = payload
                local = rng.uniform(-1.0, 1.0, size=(n, 3)) * (half * FACE_INSET)
                local[:, axis] = sign * half[axis] * FACE_INSET
                pts = pose.apply(local)
                base = tracks[k].reflectance
                prov.append(np.full(n, k, dtype=np.int64))
            world_pts.append(pts)
            refl.append(base + REFLECTANCE_NOISE * rng.normal(size=n))

        if world_pts:
            world = np.concatenate(world_pts, axis=0)
            prov_arr = np.concatenate(prov)
            feats = np.clip(np.concatenate(refl), 0.0, 1.0)[:, None]
        else:
            world = np.zeros((0, 3))
            prov_arr = np.zeros(0, dtype=np.int64)
            feats = np.zeros((0, 1))
        pts_sensor = ego.inverse().apply(world)
        pts_sensor = pts_sensor + cfg.noise_sigma * rng.normal(size=pts_sensor.shape)

        boxes = []
        for tr in tracks:
            if not tr.labeled:
                continue
            center = _quantize_f32(ego.inverse().apply(tr.centers[t][None, :])[0])
            boxes.append(
                BoundingBox(
                    center=center,
                    size=_quantize_f32(tr.size),
                    heading=_quantize_heading(tr.headings[t] - ego_yaw),
                    track_id=tr.track_id,
                    class_id=tr.class_id,
                )
            )
        frames.append(
            PointCloudFrame(
                t=t,
                points=_quantize_f32(pts_sensor),
                features=_quantize_f32(feats),
                ego_pose=ego,
                boxes=tuple(boxes),
            )
        )
        provenance.append(prov_arr)
    seq = Sequence(tuple(frames))
    return (seq, provenance) if with_provenance else seq


def generate_sequence(cfg: SceneConfig) -> Sequence:
    """Deterministically generate one labeled sequence from the config."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.rng_seed))
    tracks = sample_tracks(cfg, rng)
    return render_sequence(cfg, tracks, ego_path(cfg), rng)


# ---------------------------------------------------------------------------
# file format


def write_sequence(seq: Sequence, path) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", FORMAT_VERSION, len(seq.frames)))
        for fr in seq.frames:
            c = fr.features.shape[1]
            f.write(struct.pack("<IB", fr.n_points, c))
            f.write(fr.points.astype("<f4").tobytes())
            f.write(fr.features.astype("<f4").tobytes())
            f.write(fr.ego_pose.rotation.astype("<f8").tobytes())
            f.write(fr.ego_pose.translation.astype("<f8").tobytes())
            f.write(struct.pack("<I", len(fr.boxes)))
            for b in fr.boxes:
                rec = np.array([*b.center, *b.size, b.heading, 0.0], dtype="<f4")
                f.write(rec.tobytes())
                f.write(struct.pack("<IB", b.track_id, int(b.class_id)))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError(f"truncated file: wanted {n} bytes at offset {self.off}")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count), dtype=dtype).copy()


def read_sequence(path) -> Sequence:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError("bad magic: not a sequence file")
    version, n_frames = r.unpack("<HI")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    frames = []
    for t in range(n_frames):
        n, c = r.unpack("<IB")
        if c < 1:
            raise FormatError("feature width must be >= 1")
        pts = r.array("<f4", n * 3).reshape(n, 3)
        feats = r.array("<f4", n * c).reshape(n, c)
        rot = r.array("<f8", 9).reshape(3, 3)
        trans = r.array("<f8", 3)
        try:
            pose = Pose(rot, trans)
        except ValueError as e:
            raise FormatError(f"invalid ego pose in frame {t}: {e}") from e
        n_boxes, = r.unpack("<I")
        boxes = []
        for _ in range(n_boxes):
            vals = r.array("<f4", 8)
            track_id, class_id = r.unpack("<IB")
            try:
                boxes.append(
                    BoundingBox(
                        center=vals[:3].astype(np.float64),
                        size=vals[3:6].astype(np.float64),
                        heading=float(vals[6]),
                        track_id=int(track_id),
                        class_id=ObjectClass(int(class_id)),
                    )
                )
            except ValueError as e:
                raise FormatError(f"invalid box in frame {t}: {e}") from e
        frames.append(PointCloudFrame(t=t, points=pts, features=feats, ego_pose=pose, boxes=tuple(boxes)))
    if r.off != len(r.data):
        raise FormatError(f"{len(r.data) - r.off} trailing bytes after last frame")
    return Sequence(tuple(frames))


# ---------------------------------------------------------------------------
# manifest


def write_manifest(path, entries) -> None:
    """entries: iterable of (filename, split) with split in {train, val}."""
    with open(path, "w", encoding="utf-8") as f:
        for name, split in entries:
            if split not in ("train", "val"):
                raise ValueError(f"split must be train or val, got {split!r}")
            if " " in name:
                raise ValueError("sequence filenames must not contain spaces")
            f.write(f"{name} {split}\n")


def read_manifest(path) -> list[tuple[str, str]]:
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2 or parts[1] not in ("train", "val"):
                raise FormatError(f"manifest line {lineno} malformed: {line!r}")
            entries.append((parts[0], parts[1]))
    return entries
