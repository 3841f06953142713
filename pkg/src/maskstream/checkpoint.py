"""Checkpoint persistence, parameter transplant and snapshot averaging."""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

FORMAT_VERSION = 1
MAGIC = b"MSCK"
_U32 = struct.Struct("<I")

# Stage-2 initialization maps: which parameter-name prefixes come from the Mask-CTC model
TRANSDUCER_MAPPING = ("encoder.",)
CBS_MAPPING = ("encoder.", "ctc_head.")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: "OrderedDict[str, np.ndarray]"
    meta: dict = field(default_factory=dict)

    def save(self, path: str | os.PathLike) -> Path:
        """Write atomically (temp file + rename) so a crash never leaves a partial file."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(self.to_bytes())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return path

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        meta = json.dumps(self.meta, sort_keys=True, separators=(",", ":")).encode()
        buf.write(MAGIC)
        buf.write(_U32.pack(FORMAT_VERSION))
        buf.write(_U32.pack(len(meta)))
        buf.write(meta)
        buf.write(_U32.pack(len(self.params)))
        for name, value in self.params.items():
            value = np.ascontiguousarray(value, dtype="<f4")
            raw = name.encode()
            buf.write(_U32.pack(len(raw)))
            buf.write(raw)
            buf.write(_U32.pack(value.ndim))
            for dim in value.shape:
                buf.write(_U32.pack(dim))
            buf.write(value.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        view = memoryview(raw)
        pos = 0

        def u32():
            nonlocal pos
            if pos + 4 > len(view):
                raise CheckpointError("checkpoint is truncated")
            (v,) = _U32.unpack_from(view, pos)
            pos += 4
            return v

        if bytes(view[:4]) != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        pos = 4
        version = u32()
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        n_meta = u32()
        meta = json.loads(bytes(view[pos:pos + n_meta]).decode())
        pos += n_meta
        params = OrderedDict()
        for _ in range(u32()):
            n_name = u32()
            name = bytes(view[pos:pos + n_name]).decode()
            pos += n_name
            shape = tuple(u32() for _ in range(u32()))
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * count > len(view):
                raise CheckpointError(f"checkpoint is truncated inside {name}")
            params[name] = np.frombuffer(view, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
        if pos != len(view):
            raise CheckpointError("trailing bytes after last parameter")
        return cls(params, meta)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    @classmethod
    def from_module(cls, module: nn.Module, meta: dict | None = None) -> "Checkpoint":
        params = OrderedDict((n, p.detach().cpu().numpy().astype(np.float32).copy())
                             for n, p in module.named_parameters())
        return cls(params, dict(meta or {}))


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _selected(names: Iterable[str], mapping: Sequence[str]) -> list[str]:
    return [n for n in names if any(n.startswith(prefix) for prefix in mapping)]


def transplant(target: nn.Module, ckpt: Checkpoint, mapping: Sequence[str]) -> dict:
    """Copy every parameter whose name starts with a prefix in ``mapping`` from ``ckpt``.

    All names and shapes are verified before anything is written. Returns a report
    with the ``copied`` and ``kept`` parameter names.
    """
    own = OrderedDict(target.named_parameters())
    copied = _selected(own, mapping)
    if not copied:
        raise CheckpointError(f"no target parameters match {list(mapping)}")
    source_sel = _selected(ckpt.params, mapping)
    missing = [n for n in copied if n not in ckpt.params]
    extra = [n for n in source_sel if n not in own]
    if missing or extra:
        raise CheckpointError(f"mapped names differ: missing in checkpoint={missing}, missing in target={extra}")
    for n in copied:
        if tuple(ckpt.params[n].shape) != tuple(own[n].shape):
            raise CheckpointError(f"shape mismatch for {n}: {ckpt.params[n].shape} vs {tuple(own[n].shape)}")
    with torch.no_grad():
        for n in copied:
            own[n].copy_(torch.from_numpy(np.asarray(ckpt.params[n])))
    kept = [n for n in own if n not in set(copied)]
    return {"copied": copied, "kept": kept}


def average_params(snapshots: Sequence[Mapping[str, np.ndarray]]) -> "OrderedDict[str, np.ndarray]":
    if not snapshots:
        raise CheckpointError("nothing to average")
    names = list(snapshots[0])
    for snap in snapshots[1:]:
        if list(snap) != names:
            raise CheckpointError("snapshots have different parameter names")
        for n in names:
            if snap[n].shape != snapshots[0][n].shape:
                raise CheckpointError(f"snapshots disagree on the shape of {n}")
    out = OrderedDict()
    for n in names:
        stack = np.stack([np.asarray(s[n], dtype=np.float64) for s in snapshots])
        out[n] = stack.mean(axis=0).astype(np.float32)
    return out


def average_checkpoints(ckpts: Sequence[Checkpoint]) -> Checkpoint:
    """Elementwise mean of parameters; metadata comes from the first checkpoint."""
    meta = dict(ckpts[0].meta) if ckpts else {}
    meta["averaged"] = len(ckpts)
    return Checkpoint(average_params([c.params for c in ckpts]), meta)
