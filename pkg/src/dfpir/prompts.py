"""Degradation-type prompt embeddings and the guidance MLP that scores channels.

The text-encoder embeddings of the original method are replaced by a fixed
per-task vector: either drawn once from a seeded stream, or read from a
``DFPE`` binary file holding externally computed embeddings.

File layout (little-endian)::

    b"DFPE" | u32 count | count x (u16 name_len | utf-8 name | u32 dim | dim x f32)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import Init, Linear, Module
from .rng import Rng
from .tensor import Tensor

DEFAULT_TASKS = ("noise15", "noise25", "noise50", "derain", "dehaze", "deblur", "lowlight")

PROMPT_MAGIC = b"DFPE"


class UnknownTaskError(KeyError):
    pass


class TaskRegistry:
    """Ordered, duplicate-free list of degradation type ids."""

    def __init__(self, names=DEFAULT_TASKS):
        names = tuple(names)
        if not names:
            raise ValueError("task registry is empty")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate task ids in {names}")
        self.names = names
        self._index = {n: i for i, n in enumerate(names)}

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __contains__(self, name) -> bool:
        return name in self._index

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownTaskError(f"unknown task {name!r}; registered: {', '.join(self.names)}") from None


class PromptTable:
    """Fixed embedding per registered task."""

    def __init__(self, registry: TaskRegistry, vectors: dict[str, np.ndarray], source: str):
        self.registry = registry
        self.source = source
        dims = {v.shape for v in vectors.values()}
        if len(dims) != 1:
            raise ValueError(f"prompt vectors have inconsistent shapes {dims}")
        for name in registry:
            if name not in vectors:
                raise UnknownTaskError(f"no prompt embedding for task {name!r}")
            if not np.isfinite(vectors[name]).all():
                raise ValueError(f"prompt embedding for {name!r} is not finite")
        self.vectors = {n: np.asarray(vectors[n], dtype=np.float32) for n in registry}
        self.dim = next(iter(dims))[0]

    @classmethod
    def seeded(cls, registry: TaskRegistry, dim: int, seed: int) -> "PromptTable":
        attempt = 0
        while True:
            rng = Rng(seed, "prompts", attempt)
            table = rng.normal((len(registry), dim)).astype(np.float32)
            # regenerate on any collision between tasks
            if len({row.tobytes() for row in table}) == len(registry):
                break
            attempt += 1
        return cls(registry, {n: table[i] for i, n in enumerate(registry)}, "seeded-table")

    @classmethod
    def from_file(cls, path, registry: TaskRegistry) -> "PromptTable":
        vectors = read_prompt_file(path)
        return cls(registry, vectors, "file")

    def lookup(self, task: str) -> np.ndarray:
        self.registry.index(task)
        return self.vectors[task]

    def batch(self, tasks, dtype=np.float32) -> np.ndarray:
        return np.stack([self.lookup(t) for t in tasks]).astype(dtype)


def write_prompt_file(path, vectors: dict[str, np.ndarray]) -> None:
    out = bytearray(PROMPT_MAGIC)
    out += struct.pack("<I", len(vectors))
    for name, vec in vectors.items():
        raw = name.encode("utf-8")
        v = np.asarray(vec, dtype="<f4").ravel()
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<I", v.size) + v.tobytes()
    Path(path).write_bytes(bytes(out))


def read_prompt_file(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != PROMPT_MAGIC:
        raise ValueError(f"{path}: not a prompt embedding file (bad magic)")
    pos = 4
    try:
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        vectors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (dim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            if pos + 4 * dim > len(buf):
                raise ValueError("truncated vector")
            vectors[name] = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos).astype(np.float32)
            pos += 4 * dim
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise ValueError(f"{path}: corrupt prompt file ({exc})") from exc
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return vectors


class DGM(Module):
    """Two linear layers with gelu between: prompt (L) -> hidden -> 2C channel scores."""

    def __init__(self, init: Init, prompt_dim: int, out_channels: int, hidden: int | None = None):
        hidden = out_channels if hidden is None else hidden
        self.fc1 = Linear(init, prompt_dim, hidden)
        self.fc2 = Linear(init, hidden, out_channels)
        self.out_channels = out_channels

    def forward(self, prompt: Tensor) -> Tensor:
        if prompt.ndim == 1:
            prompt = T.reshape(prompt, (1, prompt.shape[0]))
        return self.fc2(T.gelu(self.fc1(prompt)))


def dgm_forward(prompt: Tensor, params: DGM) -> Tensor:
    return params(prompt)
