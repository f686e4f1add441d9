"""Binary checkpoint container.

Layout (little-endian): magic ``CBIL``, u32 version, then four length-prefixed
UTF-8 blocks (stage tag, config echo, RNG state JSON, metadata JSON), a u32
tensor count and for each tensor: u32 name length, name, u32 rank, rank u32
dims and the float32 values in C order.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"CBIL"
VERSION = 1
STAGES = ("mvae", "cluster", "policy")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: str
    tensors: dict = field(default_factory=dict)  # name -> float32 ndarray
    config_text: str = ""
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown stage tag {self.stage!r}")


def _block(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _block(ckpt.stage), _block(ckpt.config_text),
             _block(json.dumps(ckpt.rng_state, sort_keys=True)), _block(json.dumps(ckpt.meta, sort_keys=True)),
             struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        parts.append(_block(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, name: str):
        self.buf, self.pos, self.name = buf, 0, name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.name}: truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def decode_checkpoint(buf: bytes, name: str = "<bytes>", expect_stage: str | None = None) -> Checkpoint:
    r = _Reader(buf, name)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{name}: not a CBIL checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{name}: unsupported checkpoint version {version}")
    stage = r.text()
    if expect_stage is not None and stage != expect_stage:
        raise CheckpointError(f"{name}: expected a {expect_stage!r} checkpoint, found {stage!r}")
    config_text = r.text()
    rng_state = json.loads(r.text())
    meta = json.loads(r.text())
    tensors = {}
    for _ in range(r.u32()):
        tname = r.text()
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        tensors[tname] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).copy()
    if r.pos != len(buf):
        raise CheckpointError(f"{name}: trailing bytes after tensor table")
    return Checkpoint(stage, tensors, config_text, rng_state, meta)


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    data = encode_checkpoint(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path, expect_stage: str | None = None) -> Checkpoint:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), str(path), expect_stage)


def file_sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def module_tensors(module, prefix: str = "") -> dict:
    return {prefix + k: v.detach().cpu().numpy().astype(np.float32) for k, v in module.state_dict().items()}


def load_module_tensors(module, tensors: dict, prefix: str = "") -> None:
    import torch

    state = {}
    for k, ref in module.state_dict().items():
        key = prefix + k
        if key not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {key!r}")
        arr = tensors[key]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"tensor {key!r} has shape {arr.shape}, expected {tuple(ref.shape)}")
        state[k] = torch.from_numpy(np.array(arr)).to(ref.dtype)
    module.load_state_dict(state)


def optimizer_tensors(opt, prefix: str) -> tuple[dict, dict]:
    """Adam state as tensors plus JSON-able step counters."""
    tensors, steps = {}, {}
    for i, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            if key == "step":
                steps[str(i)] = float(val)
            else:
                tensors[f"{prefix}{i}.{key}"] = val.detach().cpu().numpy().astype(np.float32)
    return tensors, steps


def load_optimizer_tensors(opt, tensors: dict, steps: dict, prefix: str) -> None:
    import torch

    sd = opt.state_dict()
    state = {}
    for i_str, step in steps.items():
        i = int(i_str)
        entry = {"step": torch.tensor(step)}
        for name in list(tensors):
            if name.startswith(f"{prefix}{i}."):
                entry[name[len(f"{prefix}{i}."):]] = torch.from_numpy(np.array(tensors[name]))
        state[i] = entry
    sd["state"] = state
    opt.load_state_dict(sd)
