"""Operator entry point: data generation, the three training modes,
evaluation, and report emission.

Exit codes: 0 success, 1 internal failure, 2 usage error. Configuration
comes from flags plus an optional key=value file; flags win.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .detector import GridConfig, decode, forward, pillarize
from .geometry import ObjectClass, aggregate_tracked
from .metrics import EvalConfig, average_precision, filter_gt_boxes, report_csv
from .optim import load_checkpoint
from .simdata import SceneConfig, generate_sequence, read_manifest, read_sequence, \
    write_manifest, write_sequence
from .tensor import Tensor
from .training import LossConfig, StageConfig, TrainingDataset, default_lambda, \
    train_baseline, train_stage1, train_stage2

__all__ = ["main"]

CLASS_NAMES = {"vehicle": ObjectClass.VEHICLE, "pedestrian": ObjectClass.PEDESTRIAN}
DEFAULT_IOU = {ObjectClass.VEHICLE: 0.7, ObjectClass.PEDESTRIAN: 0.5}


class UsageError(Exception):
    pass


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10, check=False,
        )
        return out.stdout.strip() or "unknown"
    except OSError:
        return "unknown"


def _write_run_manifest(out_dir: Path, command: str, config: dict, artifacts) -> Path:
    path = out_dir / "run_manifest.json"
    record = {
        "command": command,
        "config": {k: v for k, v in sorted(config.items()) if k != "func"},
        "git": _git_describe(),
        "artifacts": sorted(str(a) for a in artifacts),
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


def _require_dir(path_str: str, what: str) -> Path:
    path = Path(path_str)
    if not path.is_dir():
        raise UsageError(f"{what} directory not found: {path}")
    return path


def _parse_class(name: str) -> ObjectClass:
    if name not in CLASS_NAMES:
        raise UsageError(f"unknown class {name!r}; choose from {sorted(CLASS_NAMES)}")
    return CLASS_NAMES[name]


def _seq_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence((seed, index)).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not 0.0 <= args.val_fraction < 1.0:
        raise UsageError(f"--val-fraction must be in [0, 1), got {args.val_fraction}")
    n_val = int(round(args.sequences * args.val_fraction))
    n_train = args.sequences - n_val
    entries = []
    artifacts = []
    for i in range(args.sequences):
        cfg = SceneConfig(
            n_frames=args.frames,
            area=args.area,
            n_vehicles=args.vehicles,
            n_pedestrians=args.pedestrians,
            n_static_clutter=args.clutter,
            points_per_frame_target=args.points,
            noise_sigma=args.noise,
            ego_speed=args.ego_speed,
            rng_seed=_seq_seed(args.seed, i),
        )
        seq = generate_sequence(cfg)
        name = f"seq_{i:03d}.bin"
        write_sequence(seq, out / name)
        entries.append((name, "train" if i < n_train else "val"))
        artifacts.append(out / name)
    manifest = out / "manifest.txt"
    write_manifest(manifest, entries)
    artifacts.append(manifest)
    _write_run_manifest(out, "gen-data", vars(args), artifacts)
    print(f"wrote {n_train} train / {n_val} val sequences to {out}")
    return 0


def _load_split(data_dir: Path, split: str):
    manifest = data_dir / "manifest.txt"
    if not manifest.is_file():
        raise UsageError(f"manifest not found: {manifest}")
    entries = read_manifest(manifest)
    names = [name for name, part in entries if part == split]
    if not names:
        raise UsageError(f"no {split!r} sequences listed in {manifest}")
    return [read_sequence(data_dir / name) for name in names]


def _cmd_train(args) -> int:
    data_dir = _require_dir(args.data, "data")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    obj_class = _parse_class(args.obj_class)
    sequences = _load_split(data_dir, "train")
    dataset = TrainingDataset(sequences, n_frames_teacher=args.frames_teacher,
                              class_id=obj_class)
    grid = GridConfig()
    lam = default_lambda(obj_class) if args.lam is None else args.lam
    loss_cfg = LossConfig(lam=lam)
    stage_cfg = StageConfig(n_frames_teacher=args.frames_teacher,
                            epochs=args.epochs, batch_size=args.batch_size,
                            seed=args.seed)
    log_path = out / f"{args.mode}_log.ndjson"
    if args.mode == "teacher":
        params, _ = train_stage1(dataset, grid, loss_cfg, stage_cfg,
                                 out_dir=str(out), log_path=str(log_path))
        final = out / "teacher.ckpt"
    elif args.mode == "student":
        if not args.teacher:
            raise UsageError("--mode student requires --teacher CKPT")
        teacher = load_checkpoint(args.teacher)
        params, _ = train_stage2(dataset, teacher, grid, loss_cfg, stage_cfg,
                                 out_dir=str(out), log_path=str(log_path))
        final = out / "student.ckpt"
    else:
        params, _ = train_baseline(dataset, grid, loss_cfg, stage_cfg,
                                   out_dir=str(out), log_path=str(log_path))
        final = out / "baseline.ckpt"
    artifacts = sorted(out.glob("*.ckpt")) + [log_path]
    _write_run_manifest(out, "train", vars(args), artifacts)
    print(f"trained {args.mode}; final checkpoint {final}")
    return 0


def eval_checkpoint(params: dict, sequences, obj_class: ObjectClass,
                    n_frames: int, eval_cfg: EvalConfig, grid: GridConfig,
                    score_threshold: float = 0.3, nms_iou: float = 0.5):
    """Decode detections per frame and score them; returns (preds, gts)."""
    preds_per_frame = []
    gts_per_frame = []
    for si, seq in enumerate(sequences):
        for t in range(len(seq)):
            if n_frames > 1:
                lo = max(0, t - n_frames + 1)
                points, features = aggregate_tracked(seq.frames[lo : t + 1], t - lo)
            else:
                frame = seq.frames[t]
                points, features = frame.points, frame.features
            pillars = pillarize(points, features, grid, rng_seed=(0, si, t))
            out = forward(pillars, params, grid)
            preds_per_frame.append(decode(out, grid, score_threshold, nms_iou))
            boxes = [b for b in seq.frames[t].boxes if b.class_id == obj_class]
            # Point counts for the >min_points filter come from the raw frame
            # at t, never the aggregated input, so every method is scored
            # against the same ground-truth set.
            gts_per_frame.append(
                filter_gt_boxes(boxes, seq.frames[t].points, eval_cfg.min_points)
            )
    return preds_per_frame, gts_per_frame


def _params_from_checkpoint(path: str) -> dict:
    raw = load_checkpoint(path)
    return {k: Tensor(v, requires_grad=False) for k, v in raw.items()}


def _cmd_eval(args) -> int:
    data_dir = _require_dir(args.data, "data")
    ckpt = Path(args.ckpt)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    obj_class = _parse_class(args.obj_class)
    iou = DEFAULT_IOU[obj_class] if args.iou is None else args.iou
    eval_cfg = EvalConfig(iou_threshold=iou, min_points=args.min_points)
    sequences = _load_split(data_dir, args.split)
    params = _params_from_checkpoint(str(ckpt))
    method = args.method or f"{ckpt.stem} ({args.frames} frame{'s' if args.frames > 1 else ''})"
    preds, gts = eval_checkpoint(params, sequences, obj_class, args.frames,
                                 eval_cfg, GridConfig(),
                                 args.score_threshold, args.nms_iou)
    report = average_precision(preds, gts, eval_cfg, method=method)
    text = report_csv([report])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    _write_run_manifest(out.parent, "eval", vars(args), [out])
    print(text, end="")
    return 0


def _svg_bar_plot(methods, values, title: str) -> str:
    """Self-contained SVG bar chart of Overall 3D mAP per method."""
    width, height, margin, bottom = 560, 300, 50, 60
    plot_w, plot_h = width - 2 * margin, height - margin - bottom
    n = len(methods)
    slot = plot_w / max(1, n)
    bar_w = slot * 0.6
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="15">{title}</text>',
        f'<line x1="{margin}" y1="{margin + plot_h}" x2="{width - margin}" '
        f'y2="{margin + plot_h}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{margin + plot_h}" stroke="black"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = margin + plot_h * (1.0 - frac)
        parts.append(
            f'<text x="{margin - 8}" y="{y + 4:.1f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{frac:.2f}</text>'
        )
        parts.append(
            f'<line x1="{margin - 4}" y1="{y:.1f}" x2="{margin}" y2="{y:.1f}" '
            f'stroke="black"/>'
        )
    for i, (name, value) in enumerate(zip(methods, values)):
        v = 0.0 if value is None else max(0.0, min(1.0, value))
        x = margin + i * slot + (slot - bar_w) / 2
        h = plot_h * v
        y = margin + plot_h - h
        parts.append(
            f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w:.1f}" height="{h:.1f}" '
            f'fill="#4878a8"/>'
        )
        label = "n/a" if value is None else f"{value:.4f}"
        parts.append(
            f'<text x="{x + bar_w / 2:.1f}" y="{y - 6:.1f}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12">{label}</text>'
        )
        parts.append(
            f'<text x="{x + bar_w / 2:.1f}" y="{margin + plot_h + 18:.1f}" '
            f'text-anchor="middle" font-family="sans-serif" font-size="12">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _cmd_report(args) -> int:
    header = None
    rows = []
    for run in args.runs:
        path = Path(run)
        if not path.is_file():
            raise UsageError(f"report input not found: {path}")
        lines = path.read_text().splitlines()
        if not lines:
            raise UsageError(f"empty report file: {path}")
        if header is None:
            header = lines[0]
        elif lines[0] != header:
            raise UsageError(f"column layout of {path} differs from {args.runs[0]}")
        rows.extend(lines[1:])
    combined = "\n".join([header] + rows) + "\n"
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(combined)
    methods, values = [], []
    for row in rows:
        cells = [c.strip() for c in row.split(",")]
        methods.append(cells[0])
        overall_3d = cells[5]
        values.append(None if overall_3d == "n/a" else float(overall_3d))
    plot_path = Path(args.plot)
    plot_path.parent.mkdir(parents=True, exist_ok=True)
    plot_path.write_text(_svg_bar_plot(methods, values, "Overall 3D mAP"))
    _write_run_manifest(out.parent, "report", vars(args), [out, plot_path])
    print(combined, end="")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mf2sf",
        description="Multi-frame to single-frame distillation pipeline "
        "for BEV object detection.",
    )
    parser.add_argument("--config", help="key=value file; explicit flags win")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--sequences", type=int, default=50)
    g.add_argument("--frames", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--val-fraction", type=float, default=0.2)
    g.add_argument("--area", type=float, default=30.0)
    g.add_argument("--vehicles", type=int, default=4)
    g.add_argument("--pedestrians", type=int, default=0)
    g.add_argument("--clutter", type=int, default=3)
    g.add_argument("--points", type=int, default=4096)
    g.add_argument("--noise", type=float, default=0.02)
    g.add_argument("--ego-speed", type=float, default=2.0)
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("train", help="train teacher, student, or baseline")
    t.add_argument("--mode", choices=("teacher", "student", "baseline"), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--teacher", help="teacher checkpoint (student mode)")
    t.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="consistency weight; default picked by class")
    t.add_argument("--epochs", type=int, default=75)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--class", dest="obj_class", default="vehicle")
    t.add_argument("--frames-teacher", type=int, default=5)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the val split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="CSV output path")
    e.add_argument("--class", dest="obj_class", default="vehicle")
    e.add_argument("--iou", type=float, default=None,
                   help="match threshold; default 0.7 vehicle / 0.5 pedestrian")
    e.add_argument("--frames", type=int, default=1,
                   help="input frames per sample; >1 uses tracked aggregation")
    e.add_argument("--split", choices=("train", "val"), default="val")
    e.add_argument("--min-points", type=int, default=5)
    e.add_argument("--score-threshold", type=float, default=0.3)
    e.add_argument("--nms-iou", type=float, default=0.5)
    e.add_argument("--method", help="row label in the report")
    e.set_defaults(func=_cmd_eval)

    r = sub.add_parser("report", help="combine eval CSVs and plot 3D mAP")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--plot", required=True)
    r.set_defaults(func=_cmd_report)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv) -> list:
    """Fold key=value defaults from --config into the parser; flags win."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return list(argv)
    path = Path(known.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    overrides = {}
    for ln, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{ln}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        value = value.strip()
        try:
            overrides[key] = json.loads(value)
        except json.JSONDecodeError:
            overrides[key] = value
    known_dests = set()
    for action_parser in [parser] + [
        p for action in parser._subparsers._group_actions
        for p in action.choices.values()
    ]:
        known_dests.update(a.dest for a in action_parser._actions)
    unknown = set(overrides) - known_dests
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for action in parser._subparsers._group_actions:
        for p in action.choices.values():
            p.set_defaults(**{k: v for k, v in overrides.items()
                              if k in {a.dest for a in p._actions}})
    return list(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = _build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (KeyboardInterrupt, SystemExit):
        raise
    except Exception as err:  # internal failure contract: exit code 1
        print(f"internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
