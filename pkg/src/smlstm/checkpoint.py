"""SMCK checkpoint files.

Layout (little-endian)::

    b"SMCK" | u32 version | u32 meta_len | meta (UTF-8 JSON, sorted keys)
    | u32 n_blocks | n_blocks x (u32 name_len | name | u32 ndim | ndim x u32 dim | float64 payload)

Block names are ``param/<name>``, ``opt_m/<name>`` and ``opt_v/<name>``.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

import numpy as np

from .encoders import FormatError

MAGIC = b"SMCK"
VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    config: Dict[str, Any]
    opt_m: Dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: Dict[str, np.ndarray] = field(default_factory=dict)
    opt_step: int = 0
    epoch: int = 0
    step: int = 0
    rng: Dict[str, Any] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)

    def meta(self) -> Dict[str, Any]:
        return {
            "config": self.config,
            "epoch": self.epoch,
            "step": self.step,
            "opt_step": self.opt_step,
            "rng": self.rng,
            "extra": self.extra,
            "format_version": VERSION,
        }


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    blocks = []
    for prefix, table in (("param", ckpt.params), ("opt_m", ckpt.opt_m), ("opt_v", ckpt.opt_v)):
        for name, arr in table.items():
            blocks.append((f"{prefix}/{name}", np.asarray(arr, dtype=np.float64)))
    out = [MAGIC, _U32.pack(VERSION), _U32.pack(len(meta)), meta, _U32.pack(len(blocks))]
    for name, arr in blocks:
        raw = name.encode("utf-8")
        out.append(_U32.pack(len(raw)))
        out.append(raw)
        out.append(_U32.pack(arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype("<f8").tobytes(order="C"))
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, expected b'SMCK'", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    meta_len = r.u32("metadata length")
    at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt metadata: {exc}", at) from None
    tables: Dict[str, Dict[str, np.ndarray]] = {"param": {}, "opt_m": {}, "opt_v": {}}
    for _ in range(r.u32("block count")):
        at = r.pos
        name = r.take(r.u32("name length"), "block name").decode("utf-8")
        prefix, _, key = name.partition("/")
        if prefix not in tables or not key:
            raise FormatError(f"unknown block {name!r}", at)
        ndim = r.u32("ndim")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "shape"))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(8 * count, f"payload of {name}"), dtype="<f8").astype(np.float64)
        tables[prefix][key] = data.reshape(shape)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    return Checkpoint(
        params=tables["param"], config=meta["config"], opt_m=tables["opt_m"], opt_v=tables["opt_v"],
        opt_step=meta["opt_step"], epoch=meta["epoch"], step=meta["step"], rng=meta["rng"], extra=meta["extra"],
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write via a temporary sibling and rename, so a crash never leaves a partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
