"""Losses and the two-stage pipeline: a teacher trained on tracked
multi-frame clouds distills into an identical single-frame student
through a feature consistency term."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .detector import GridConfig, assign_targets, forward, init_params, pillarize
from .geometry import ObjectClass, aggregate_tracked
from .optim import AdamState, adam_step, lr_schedule, save_checkpoint
from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = [
    "LossConfig",
    "StageConfig",
    "TrainingDataset",
    "consistency_loss",
    "default_lambda",
    "focal_loss",
    "huber_loss",
    "train_baseline",
    "train_stage1",
    "train_stage2",
]

P_CLAMP = 1e-7
LAMBDA_VEHICLE = 0.1
LAMBDA_PEDESTRIAN = 0.01
# Warmup spans 5 of 75 reference epochs; shorter runs scale it down.
WARMUP_FRACTION = 5.0 / 75.0

ROLE_STUDENT = 0
ROLE_TEACHER = 1


def default_lambda(class_id: int) -> float:
    return LAMBDA_PEDESTRIAN if class_id == ObjectClass.PEDESTRIAN else LAMBDA_VEHICLE


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters.

    alpha_on_negative keeps the focal weight alpha on both branches; the
    False setting switches to the common (1 - alpha) negative weight.
    cls_norm and loc losses divide by the positive-pixel count when
    normalize_by_positives is set; consistency_mode picks mean or sum
    reduction of the squared feature distance.
    """

    alpha: float = 0.25
    gamma: float = 2.0
    sigma: float = 3.0
    lam: float = LAMBDA_VEHICLE
    alpha_on_negative: bool = True
    normalize_by_positives: bool = True
    consistency_mode: str = "mean"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.sigma <= 0.0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.lam < 0.0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.consistency_mode not in ("mean", "sum"):
            raise ValueError(f"unknown consistency_mode {self.consistency_mode!r}")


@dataclass(frozen=True)
class StageConfig:
    n_frames_teacher: int = 5
    epochs: int = 75
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.n_frames_teacher < 1:
            raise ValueError("n_frames_teacher must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def focal_loss(p: Tensor, y: np.ndarray, alpha: float = 0.25, gamma: float = 2.0,
               alpha_on_negative: bool = True) -> Tensor:
    """Sum over the map of -a (1-p)^g log p at y=1 and -a' p^g log(1-p) at y=0."""
    if p.data.shape != np.shape(y):
        raise ShapeError(f"focal_loss shapes {p.data.shape} vs {np.shape(y)}")
    pc = T.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    ones = Tensor(np.ones_like(pc.data))
    ym = np.asarray(y, dtype=pc.data.dtype)
    pos = T.mul(T.mul(T.power(T.sub(ones, pc), gamma), T.log(pc)), Tensor(ym))
    neg = T.mul(T.mul(T.power(pc, gamma), T.log(T.sub(ones, pc))), Tensor(1.0 - ym))
    neg_coef = alpha if alpha_on_negative else 1.0 - alpha
    return T.add(T.scalar_mul(T.tsum(pos), -alpha), T.scalar_mul(T.tsum(neg), -neg_coef))


def huber_loss(d: Tensor, sigma: float = 3.0, mask: np.ndarray | None = None) -> Tensor:
    """Sum of 0.5 d^2 s^2 where |d| < 1/s^2 and |d| - 1/(2 s^2) elsewhere.

    mask broadcasts against d and weights each element; the piecewise
    region and the sign of d are constants of the graph, which is the
    correct a.e. derivative for both branches.
    """
    delta = 1.0 / (sigma * sigma)
    dt = d.data.dtype
    small = (np.abs(d.data) < delta).astype(dt)
    sign = np.sign(d.data).astype(dt)
    quad = T.scalar_mul(T.square(d), 0.5 * sigma * sigma)
    lin = T.add(T.mul(d, Tensor(sign)), Tensor(np.full_like(d.data, -0.5 * delta)))
    picked = T.add(T.mul(quad, Tensor(small)), T.mul(lin, Tensor(1.0 - small)))
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=dt), d.data.shape)
        picked = T.mul(picked, Tensor(np.ascontiguousarray(m)))
    return T.tsum(picked)


def consistency_loss(phi_s: Tensor, phi_m: Tensor, mode: str = "mean") -> Tensor:
    """Squared L2 distance between feature maps, mean over elements by default."""
    if phi_s.data.shape != phi_m.data.shape:
        raise ShapeError(
            f"consistency_loss shapes {phi_s.data.shape} vs {phi_m.data.shape}"
        )
    if mode not in ("mean", "sum"):
        raise ValueError(f"unknown mode {mode!r}")
    sq = T.square(T.sub(phi_s, phi_m))
    return T.mean(sq) if mode == "mean" else T.tsum(sq)


# ---------------------------------------------------------------------------
# dataset


class TrainingDataset:
    """Frame-level samples over sequences, with cached tracked aggregation.

    Each sample is one (sequence, frame) pair. The single-frame input is
    that frame; the multi-frame input unions the n_frames_teacher-long
    window ending at the frame (shorter near the start) with per-track
    de-blurring into the frame's coordinates.
    """

    def __init__(self, sequences, n_frames_teacher: int = 5,
                 class_id: int = ObjectClass.VEHICLE):
        self.sequences = tuple(sequences)
        if n_frames_teacher < 1:
            raise ValueError("n_frames_teacher must be >= 1")
        self.n_frames_teacher = int(n_frames_teacher)
        self.class_id = int(class_id)
        self.samples = tuple(
            (si, t) for si, seq in enumerate(self.sequences) for t in range(len(seq))
        )
        self._agg_cache: dict = {}

    def __len__(self) -> int:
        return len(self.samples)

    def student_input(self, i: int):
        si, t = self.samples[i]
        frame = self.sequences[si].frames[t]
        return frame.points, frame.features

    def teacher_input(self, i: int):
        si, t = self.samples[i]
        key = (si, t)
        if key not in self._agg_cache:
            lo = max(0, t - self.n_frames_teacher + 1)
            window = self.sequences[si].frames[lo : t + 1]
            self._agg_cache[key] = aggregate_tracked(window, t - lo)
        return self._agg_cache[key]

    def target_boxes(self, i: int):
        si, t = self.samples[i]
        frame = self.sequences[si].frames[t]
        return [b for b in frame.boxes if b.class_id == self.class_id]


# ---------------------------------------------------------------------------
# training loops


def _as_frozen(params_like: dict) -> dict:
    out = {}
    for name, value in params_like.items():
        data = value.data if isinstance(value, Tensor) else value
        out[name] = Tensor(np.asarray(data), requires_grad=False)
    return out


def _check_same_layout(a: dict, b: dict) -> None:
    sa = {k: tuple(v.data.shape) for k, v in a.items()}
    sb = {k: tuple(v.data.shape) for k, v in b.items()}
    if sa != sb:
        raise ValueError(f"parameter layouts differ: {sorted(sa)} vs {sorted(sb)}")


def sample_losses(dataset: TrainingDataset, i: int, params: dict, grid: GridConfig,
                  loss_cfg: LossConfig, seed: int, epoch: int, multi_frame: bool,
                  teacher_params: dict | None = None):
    """Loss terms for one sample; returns (total, l_cls, l_loc, l_c) Tensors.

    l_c is None unless teacher_params is given and lam > 0; with lam = 0 the
    multi-frame input is never built, so the graph is identical to plain
    single-frame training.
    """
    role = ROLE_TEACHER if multi_frame else ROLE_STUDENT
    points, features = dataset.teacher_input(i) if multi_frame else dataset.student_input(i)
    pillars = pillarize(points, features, grid, rng_seed=(seed, epoch, i, role))
    out = forward(pillars, params, grid)

    targets = assign_targets(dataset.target_boxes(i), grid)
    npos = max(1, targets.n_positive)
    norm = 1.0 / npos if loss_cfg.normalize_by_positives else 1.0
    l_cls = T.scalar_mul(
        focal_loss(out.cls, targets.existence, loss_cfg.alpha, loss_cfg.gamma,
                   loss_cfg.alpha_on_negative),
        norm,
    )
    residual = T.sub(out.loc, Tensor(targets.loc.astype(out.loc.data.dtype)))
    l_loc = T.scalar_mul(
        huber_loss(residual, loss_cfg.sigma, mask=targets.existence), norm
    )
    total = T.add(l_cls, l_loc)

    l_c = None
    if teacher_params is not None and loss_cfg.lam > 0.0:
        t_pts, t_feats = dataset.teacher_input(i)
        t_pillars = pillarize(t_pts, t_feats, grid, rng_seed=(seed, epoch, i, ROLE_TEACHER))
        t_out = forward(t_pillars, teacher_params, grid)
        l_c = consistency_loss(out.feature_map, t_out.feature_map, loss_cfg.consistency_mode)
        total = T.add(total, T.scalar_mul(l_c, loss_cfg.lam))
    return total, l_cls, l_loc, l_c


def _warmup_steps(total_steps: int) -> int:
    w = max(1, int(round(total_steps * WARMUP_FRACTION)))
    return min(w, total_steps - 1) if total_steps > 1 else 0


def _lr_at(step: int, total_steps: int) -> float:
    warmup = _warmup_steps(total_steps)
    if warmup == 0:
        return lr_schedule(1, 2, 1)  # single-step run trains at the peak rate
    return lr_schedule(step, total_steps, warmup)


def _train(dataset: TrainingDataset, grid: GridConfig, loss_cfg: LossConfig,
           stage_cfg: StageConfig, multi_frame: bool, teacher_params: dict | None,
           out_dir=None, log_path=None, ckpt_name: str = "model"):
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    params = init_params(rng_seed=stage_cfg.seed)
    if teacher_params is not None:
        teacher_params = _as_frozen(teacher_params)
        _check_same_layout(params, teacher_params)

    n = len(dataset)
    bs = stage_cfg.batch_size
    steps_per_epoch = math.ceil(n / bs)
    total_steps = stage_cfg.epochs * steps_per_epoch
    state = AdamState()
    history = []
    step = 0
    seed = stage_cfg.seed

    for epoch in range(stage_cfg.epochs):
        order = np.random.default_rng(np.random.SeedSequence((seed, epoch))).permutation(n)
        for b in range(steps_per_epoch):
            idxs = order[b * bs : (b + 1) * bs]
            for p in params.values():
                p.grad = None
            acc = None
            sums = {"loss_cls": 0.0, "loss_loc": 0.0, "loss_c": 0.0}
            for i in idxs:
                total, l_cls, l_loc, l_c = sample_losses(
                    dataset, int(i), params, grid, loss_cfg, seed, epoch,
                    multi_frame, teacher_params,
                )
                sums["loss_cls"] += float(l_cls.data)
                sums["loss_loc"] += float(l_loc.data)
                sums["loss_c"] += float(l_c.data) if l_c is not None else 0.0
                acc = total if acc is None else T.add(acc, total)
            batch_loss = T.scalar_mul(acc, 1.0 / len(idxs))
            if not np.isfinite(batch_loss.data):
                raise FloatingPointError(f"non-finite loss at step {step}")
            batch_loss.backward()
            lr = _lr_at(step, total_steps)
            grads = {k: p.grad for k, p in params.items()}
            try:
                adam_step(params, grads, state, lr)
            except FloatingPointError as err:
                raise FloatingPointError(f"{err} at step {step}") from err
            history.append({
                "step": step,
                "lr": lr,
                "loss_cls": sums["loss_cls"] / len(idxs),
                "loss_loc": sums["loss_loc"] / len(idxs),
                "loss_c": sums["loss_c"] / len(idxs),
                "loss_total": float(batch_loss.data),
            })
            step += 1
        if out_dir is not None:
            save_checkpoint(params, f"{out_dir}/{ckpt_name}_epoch{epoch:03d}.ckpt")
    if out_dir is not None:
        save_checkpoint(params, f"{out_dir}/{ckpt_name}.ckpt")
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for rec in history:
                fh.write(json.dumps(rec) + "\n")
    return params, history


def train_stage1(dataset: TrainingDataset, grid: GridConfig, loss_cfg: LossConfig,
                 stage_cfg: StageConfig, out_dir=None, log_path=None):
    """Teacher on tracked multi-frame clouds with detection losses only."""
    cfg = replace(loss_cfg, lam=0.0)
    return _train(dataset, grid, cfg, stage_cfg, multi_frame=True,
                  teacher_params=None, out_dir=out_dir, log_path=log_path,
                  ckpt_name="teacher")


def train_stage2(dataset: TrainingDataset, teacher_params: dict, grid: GridConfig,
                 loss_cfg: LossConfig, stage_cfg: StageConfig, out_dir=None,
                 log_path=None):
    """Student on single frames; the frozen teacher supervises features."""
    return _train(dataset, grid, loss_cfg, stage_cfg, multi_frame=False,
                  teacher_params=teacher_params, out_dir=out_dir,
                  log_path=log_path, ckpt_name="student")


def train_baseline(dataset: TrainingDataset, grid: GridConfig, loss_cfg: LossConfig,
                   stage_cfg: StageConfig, out_dir=None, log_path=None):
    """Single-frame training with detection losses only."""
    cfg = replace(loss_cfg, lam=0.0)
    return _train(dataset, grid, cfg, stage_cfg, multi_frame=False,
                  teacher_params=None, out_dir=out_dir, log_path=log_path,
                  ckpt_name="baseline")
