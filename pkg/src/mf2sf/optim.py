"""Adam with bias correction, the warmup+cosine LR schedule, and checkpoints.

Checkpoint files are versioned binary: magic "MFCK", u16 version, u32
record count, then per record u16 name length + utf-8 name + u8 ndim +
u32 dims + raw little-endian f32 data. Records keep insertion order, so
a round trip is bit-exact and byte-stable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

CKPT_MAGIC = b"MFCK"
CKPT_VERSION = 1

LR_INITIAL = 3e-4
LR_PEAK = 3e-3
LR_FINAL = 3e-6


class CheckpointError(Exception):
    """Raised when a checkpoint file cannot be decoded."""


def lr_schedule(step: int, total_steps: int, warmup_steps: int) -> float:
    """Linear ramp 3e-4 -> 3e-3 over warmup, cosine decay to 3e-6 at the end."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if not 0 < warmup_steps < total_steps:
        raise ValueError("warmup_steps must be in (0, total_steps)")
    if step <= warmup_steps:
        return LR_INITIAL + (LR_PEAK - LR_INITIAL) * step / warmup_steps
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return LR_FINAL + 0.5 * (LR_PEAK - LR_FINAL) * (1.0 + np.cos(np.pi * frac))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """One Adam update over named parameters, in place. Halts on bad gradients."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name!r}")
        g = np.asarray(grads[name])
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = p.data - update.astype(p.data.dtype)
    return params


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: dict, path) -> None:
    """Write named arrays (Tensor or ndarray values) as ordered f32 records."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<HI", CKPT_VERSION, len(params)))
        for name, p in params.items():
            # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d.
            arr = np.asarray(p.data if isinstance(p, Tensor) else p, dtype="<f4")
            enc = name.encode("utf-8")
            if len(enc) > 65535:
                raise ValueError(f"parameter name too long: {name[:40]}...")
            if arr.ndim > 255:
                raise ValueError("too many dimensions")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    """Read a checkpoint into an ordered dict of float32 arrays."""
    with open(path, "rb") as f:
        data = f.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {off}")
        out = data[off : off + n]
        off += n
        return out

    if take(4) != CKPT_MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version, count = struct.unpack("<HI", take(6))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (namelen,) = struct.unpack("<H", take(2))
        name = take(namelen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).copy()
        if name in out:
            raise CheckpointError(f"duplicate parameter name {name!r}")
        out[name] = arr
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} trailing bytes in checkpoint")
    return out
