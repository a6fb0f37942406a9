"""Checkpoint file format.

Layout: a UTF-8 text header of ``key = value`` lines (first line is the
magic string, terminated by an empty line), then ``tensors`` binary records::

    u16 name length | name (utf-8) | u8 dtype-tag length | dtype tag ("f4", "f8", "i8")
    | u8 rank | rank x u64 extents | row-major little-endian payload

Saving what was loaded reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import config as cfgio

MAGIC = "coopetition-checkpoint"
VERSION = 1
_TAGS = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


@dataclass
class Checkpoint:
    config: dict[str, Any]  # flat TrainConfig
    step: int
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    rng_state: dict | None = None
    version: int = VERSION

    def header(self) -> dict[str, Any]:
        h: dict[str, Any] = {"version": self.version, "step": self.step, "adam.t": self.adam_t}
        h["rng.data"] = json.dumps(self.rng_state, sort_keys=True) if self.rng_state else None
        for k, v in self.config.items():
            h[f"config.{k}"] = v
        h["tensors"] = len(self.params) + len(self.adam_m) + len(self.adam_v)
        return h

    def tensors(self):
        for k, v in self.params.items():
            yield f"param/{k}", v
        for k, v in self.adam_m.items():
            yield f"adam.m/{k}", v
        for k, v in self.adam_v.items():
            yield f"adam.v/{k}", v


def _tag(arr: np.ndarray) -> str:
    for tag, dt in _TAGS.items():
        if arr.dtype == dt or arr.dtype == dt.newbyteorder("="):
            return tag
    raise TypeError(f"unsupported dtype {arr.dtype}")


def to_bytes(ckpt: Checkpoint) -> bytes:
    lines = [MAGIC + "\n", cfgio.dumps(ckpt.header()), "\n"]
    out = bytearray("".join(lines).encode("utf-8"))
    for name, arr in ckpt.tensors():
        tag = _tag(arr)
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", len(tag)) + tag.encode("ascii")
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes()
    return bytes(out)


def from_bytes(buf: bytes) -> Checkpoint:
    end = buf.find(b"\n\n")
    if end < 0:
        raise ValueError("checkpoint header is not terminated")
    head = buf[: end + 1].decode("utf-8").splitlines()
    if not head or head[0] != MAGIC:
        raise ValueError("not a coopetition checkpoint")
    h = cfgio.loads("\n".join(head[1:]))
    if h.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {h.get('version')}")
    pos = end + 2
    params, m, v = {}, {}, {}
    for _ in range(int(h["tensors"])):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (tl,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dt = _TAGS[buf[pos : pos + tl].decode("ascii")]
        pos += tl
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(buf, dtype=dt, count=size // dt.itemsize, offset=pos)
        arr = arr.reshape(shape).astype(dt.newbyteorder("="), copy=True)
        pos += size
        kind, key = name.split("/", 1)
        {"param": params, "adam.m": m, "adam.v": v}[kind][key] = arr
    if pos != len(buf):
        raise ValueError("trailing bytes after the last tensor record")
    rng = h.get("rng.data")
    config = {k[len("config."):]: val for k, val in h.items() if k.startswith("config.")}
    return Checkpoint(
        config=config,
        step=int(h["step"]),
        params=params,
        adam_m=m,
        adam_v=v,
        adam_t=int(h["adam.t"]),
        rng_state=(json.loads(rng) if isinstance(rng, str) else rng) or None,
        version=int(h["version"]),
    )


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def checkpoint_name(step: int) -> str:
    return f"step_{step:09d}.ckpt"


def list_checkpoints(run_dir) -> list[Path]:
    run_dir = Path(run_dir)
    d = run_dir / "checkpoints" if (run_dir / "checkpoints").is_dir() else run_dir
    return sorted(d.glob("step_*.ckpt"))
