"""Bit-exact binary checkpoints.

Layout (little-endian)::

    b"DFPC" | u32 version
    u32 n | n bytes UTF-8 JSON header (model config, prompt source, free-form metadata)
    u32 task count | per task: u16 len | UTF-8 name
    manifest: parameters, then prompt vectors as "prompts.<task>"
    u8 has_optim | [u64 step | f64 beta1, beta2, eps, lr | manifest "m.<name>" | manifest "v.<name>"]
    u32 CRC32 of every preceding byte

A manifest is ``u32 count`` followed by entries of
``u16 name_len | name | u8 dtype tag | u8 rank | rank x u32 dims | payload``.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import DFPIR, ModelConfig
from .optim import OptimState
from .prompts import PromptTable, TaskRegistry

MAGIC = b"DFPC"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


def _pack_manifest(entries: list[tuple[str, np.ndarray]]) -> bytes:
    out = bytearray(struct.pack("<I", len(entries)))
    seen = set()
    for name, arr in entries:
        if name in seen:
            raise CheckpointError(f"duplicate manifest entry {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        if arr.dtype not in _TAG_OF:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        tag = _TAG_OF[arr.dtype]
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<BB", tag, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, width: str = "<H") -> str:
        (n,) = self.unpack(width)
        return self.take(n).decode("utf-8")

    def manifest(self) -> list[tuple[str, np.ndarray]]:
        (count,) = self.unpack("<I")
        entries, seen = [], set()
        for _ in range(count):
            name = self.string()
            if name in seen:
                raise CheckpointError(f"{self.path}: duplicate manifest entry {name!r}")
            seen.add(name)
            tag, rank = self.unpack("<BB")
            if tag not in DTYPE_TAGS:
                raise CheckpointError(f"{self.path}: unknown dtype tag {tag} for {name}")
            shape = self.unpack(f"<{rank}I")
            dt = DTYPE_TAGS[tag]
            n = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(self.take(n * dt.itemsize), dtype=dt).reshape(shape)
            entries.append((name, arr.astype(dt.newbyteorder("="))))
        return entries


def encode_checkpoint(model: DFPIR, optim: OptimState | None = None, meta: dict | None = None) -> bytes:
    header = {"model": model.config.to_dict(), "prompt_source": model.prompts.source, "meta": meta or {}}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    out = bytearray(MAGIC + struct.pack("<I", VERSION))
    out += struct.pack("<I", len(raw)) + raw
    names = model.registry.names
    out += struct.pack("<I", len(names))
    for t in names:
        b = t.encode("utf-8")
        out += struct.pack("<H", len(b)) + b
    params = list(model.named_parameters())
    out += _pack_manifest([(n, p.data) for n, p in params]
                          + [("prompts." + t, model.prompts.vectors[t]) for t in names])
    if optim is None:
        out += b"\x00"
    else:
        optim.validate([p.data for _, p in params])
        out += b"\x01" + struct.pack("<Q4d", optim.step, optim.beta1, optim.beta2, optim.eps, optim.lr)
        out += _pack_manifest([("m." + n, m) for (n, _), m in zip(params, optim.m)])
        out += _pack_manifest([("v." + n, v) for (n, _), v in zip(params, optim.v)])
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def save_checkpoint(path, model: DFPIR, optim: OptimState | None = None, meta: dict | None = None) -> None:
    path = Path(path)
    data = encode_checkpoint(model, optim, meta)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def decode_checkpoint(buf: bytes, path="<bytes>"):
    """Returns (model, optim or None, meta)."""
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupt")
    r = _Reader(buf[:-4], path)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(r.string("<I"))
        config = ModelConfig.from_dict(header["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config header ({exc})") from exc
    (ntasks,) = r.unpack("<I")
    tasks = tuple(r.string() for _ in range(ntasks))
    if tasks != config.tasks:
        raise CheckpointError(f"{path}: task registry {tasks} disagrees with config {config.tasks}")
    entries = dict(r.manifest())
    registry = TaskRegistry(tasks)
    try:
        prompts = PromptTable(registry, {t: entries.pop("prompts." + t) for t in tasks},
                              header.get("prompt_source", "seeded-table"))
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing prompt vector {exc}") from exc
    dtypes = {a.dtype for a in entries.values()}
    if len(dtypes) != 1:
        raise CheckpointError(f"{path}: mixed parameter dtypes {dtypes}")
    model = DFPIR(config, prompts, dtype=dtypes.pop())
    try:
        model.load_state_dict(entries)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: parameters do not fit the model ({exc})") from exc

    (has_optim,) = r.unpack("<B")
    optim = None
    if has_optim:
        step, b1, b2, eps, lr = r.unpack("<Q4d")
        names = [n for n, _ in model.named_parameters()]
        m = dict(r.manifest())
        v = dict(r.manifest())
        try:
            optim = OptimState([m["m." + n] for n in names], [v["v." + n] for n in names],
                               step, b1, b2, eps, lr)
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing optimizer moment {exc}") from exc
        optim.validate([p.data for p in model.parameters()])
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} unexpected trailing bytes")
    return model, optim, header.get("meta", {})


def load_checkpoint(path):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(buf, path)
