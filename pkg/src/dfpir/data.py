"""Synthetic degradations and the patch/batch pipeline.

Every generator is a pure function of its inputs and seed. Random draws come
from :class:`~dfpir.rng.Rng` streams keyed by ``(seed, purpose, index)``, so a
batch is fully determined by the dataset seed and the batch index.
"""

from __future__ import annotations

import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .images import ImageFormatError, read_image
from .rng import Rng

IMAGE_SUFFIXES = (".ppm", ".pgm", ".png")


class DataError(ValueError):
    pass


@dataclass
class ImageSample:
    clean: np.ndarray
    degraded: np.ndarray
    task: str

    def __post_init__(self):
        if self.clean.shape != self.degraded.shape:
            raise DataError(f"clean {self.clean.shape} and degraded {self.degraded.shape} differ")


@dataclass
class DatasetSpec:
    tasks: tuple[str, ...] = ("noise25", "derain", "dehaze")
    patch: int = 64
    source: str | None = None  # directory of PPM/PNG images; None = procedural textures
    samples_per_epoch: int = 400
    seed: int = 0
    _images: list = field(default_factory=list, init=False, repr=False)

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        if not self.tasks:
            raise DataError("no tasks enabled")
        for t in self.tasks:
            task_kind(t)
        if self.patch < 8 or self.patch % 8:
            raise DataError(f"patch size must be a positive multiple of 8, got {self.patch}")
        if self.samples_per_epoch < 1:
            raise DataError("samples_per_epoch must be >= 1")
        if self.source is not None:
            self._images = load_source_images(self.source, self.patch)


# -- degradations --------------------------------------------------------------------

def add_gaussian_noise(clean: np.ndarray, sigma255: float, seed: int) -> np.ndarray:
    if sigma255 < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma255}")
    clean = np.asarray(clean)
    if sigma255 == 0:
        return clean.copy()
    n = Rng(seed, "gaussian-noise").normal(clean.shape) * (sigma255 / 255.0)
    return (clean + n).astype(clean.dtype)


def synthesize_haze(clean: np.ndarray, t, airlight: float) -> np.ndarray:
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr <= 0) or np.any(t_arr > 1):
        raise ValueError(f"transmission must be in (0, 1], got {t}")
    if not 0.0 <= airlight <= 1.0:
        raise ValueError(f"airlight must be in [0, 1], got {airlight}")
    clean = np.asarray(clean)
    return (clean * t_arr + airlight * (1.0 - t_arr)).astype(clean.dtype)


def _segment_coverage(h: int, w: int, p0: np.ndarray, p1: np.ndarray, width: float) -> np.ndarray:
    """Anti-aliased coverage of segments p0->p1 ((n, 2) arrays of (y, x)), shape (n, h, w)."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ay, ax = p0[:, 0, None, None], p0[:, 1, None, None]
    dy, dx = (p1 - p0)[:, 0, None, None], (p1 - p0)[:, 1, None, None]
    len2 = dy * dy + dx * dx
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(len2 > 0, ((yy - ay) * dy + (xx - ax) * dx) / len2, 0.0)
    s = np.clip(s, 0.0, 1.0)
    dist = np.hypot(yy - (ay + s * dy), xx - (ax + s * dx))
    return np.clip(width - dist, 0.0, 1.0)


def rain_layer(h: int, w: int, streak_count: int, angle: float, seed: int) -> np.ndarray:
    """Streak layer in [0, 1]; angle in degrees from vertical."""
    if streak_count < 0:
        raise ValueError("streak_count must be >= 0")
    if streak_count == 0:
        return np.zeros((h, w))
    rng = Rng(seed, "rain")
    centers = rng.random((streak_count, 2)) * np.array([h, w])
    lengths = rng.uniform(0.08, 0.3, streak_count) * max(h, w)
    theta = np.deg2rad(angle + rng.uniform(-4.0, 4.0, streak_count))
    direction = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    half = (lengths / 2)[:, None] * direction
    cover = _segment_coverage(h, w, centers - half, centers + half, 1.0)
    return np.clip(cover.sum(axis=0), 0.0, 1.0)


def synthesize_rain(clean: np.ndarray, streak_count: int, angle: float, intensity: float,
                    seed: int) -> np.ndarray:
    clean = np.asarray(clean)
    if streak_count == 0 or intensity == 0:
        return clean.copy()
    layer = rain_layer(clean.shape[-2], clean.shape[-1], streak_count, angle, seed)
    return (clean + intensity * layer).astype(clean.dtype)


def motion_kernel(kernel_len: int, angle: float) -> np.ndarray:
    """Normalized linear motion kernel of odd size >= kernel_len; angle in degrees."""
    if int(kernel_len) != kernel_len or kernel_len < 1:
        raise ValueError(f"kernel_len must be a positive integer, got {kernel_len}")
    size = kernel_len if kernel_len % 2 else kernel_len + 1
    c = (size - 1) / 2.0
    theta = math.radians(angle)
    half = (kernel_len - 1) / 2.0 * np.array([-math.sin(theta), math.cos(theta)])
    center = np.array([[c, c]])
    k = _segment_coverage(size, size, center - half, center + half, 1.0)[0]
    return k / k.sum()


def synthesize_blur(clean: np.ndarray, kernel_len: int, angle: float) -> np.ndarray:
    k = motion_kernel(kernel_len, angle)
    clean = np.asarray(clean)
    if k.shape == (1, 1):
        return clean.copy()
    out = np.stack([ndimage.convolve(ch.astype(np.float64), k, mode="reflect") for ch in clean])
    return out.astype(clean.dtype)


def synthesize_lowlight(clean: np.ndarray, gain: float, gamma: float) -> np.ndarray:
    if not 0.0 < gain <= 1.0:
        raise ValueError(f"gain must be in (0, 1], got {gain}")
    if gamma < 1.0:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    clean = np.asarray(clean)
    if gain == 1.0 and gamma == 1.0:
        return clean.copy()
    return (gain * np.power(clean, gamma)).astype(clean.dtype)


# -- tasks ------------------------------------------------------------------------------

_NOISE = re.compile(r"^noise(\d+)$")
KINDS = ("noise", "derain", "dehaze", "deblur", "lowlight")


def task_kind(task: str) -> str:
    if _NOISE.match(task):
        return "noise"
    if task in KINDS[1:]:
        return task
    raise DataError(f"no degradation generator for task {task!r}")


def sample_params(task: str, rng: Rng) -> dict:
    """Per-image degradation parameters for a task id."""
    kind = task_kind(task)
    if kind == "noise":
        return {"sigma255": float(_NOISE.match(task).group(1))}
    if kind == "derain":
        return {"streak_count": int(rng.integers(18, 36)), "angle": float(rng.uniform(-25.0, 25.0)),
                "intensity": float(rng.uniform(0.35, 0.65))}
    if kind == "dehaze":
        return {"t": float(rng.uniform(0.45, 0.75)), "airlight": float(rng.uniform(0.75, 0.95))}
    if kind == "deblur":
        return {"kernel_len": int(2 * rng.integers(2, 6) + 1), "angle": float(rng.uniform(0.0, 180.0))}
    return {"gain": float(rng.uniform(0.3, 0.6)), "gamma": float(rng.uniform(1.2, 2.0))}


def degrade(clean: np.ndarray, task: str, params: dict, seed: int) -> np.ndarray:
    kind = task_kind(task)
    if kind == "noise":
        return add_gaussian_noise(clean, params["sigma255"], seed)
    if kind == "derain":
        return synthesize_rain(clean, params["streak_count"], params["angle"], params["intensity"], seed)
    if kind == "dehaze":
        return synthesize_haze(clean, params["t"], params["airlight"])
    if kind == "deblur":
        return synthesize_blur(clean, params["kernel_len"], params["angle"])
    return synthesize_lowlight(clean, params["gain"], params["gamma"])


# -- clean patches -----------------------------------------------------------------

def _bilinear_grid(grid: np.ndarray, size: int) -> np.ndarray:
    """Upsample a (c, g, g) lattice to (c, size, size) with bilinear interpolation."""
    g = grid.shape[-1]
    pos = np.linspace(0.0, g - 1.0, size)
    i0 = np.minimum(pos.astype(np.int64), g - 2)
    f = pos - i0
    rows = grid[:, i0, :] * (1 - f)[None, :, None] + grid[:, i0 + 1, :] * f[None, :, None]
    return rows[:, :, i0] * (1 - f) + rows[:, :, i0 + 1] * f


def procedural_texture(size: int, seed: int, index: int = 0) -> np.ndarray:
    """Seeded multi-scale value noise with a few flat shapes for edges; 3 x size x size in [0, 1]."""
    rng = Rng(seed, "texture", index)
    base = np.zeros((3, size, size))
    amp = 1.0
    for cells in (2, 4, 8, 16):
        base += amp * _bilinear_grid(rng.random((3, cells + 1, cells + 1)), size)
        amp *= 0.5
    # correlate the channels so colours look natural rather than independent
    mix = 0.6 * np.eye(3) + 0.4 * rng.random((3, 3))
    img = np.einsum("ij,jhw->ihw", mix / mix.sum(axis=1, keepdims=True), base)
    img = (img - img.min()) / max(img.max() - img.min(), 1e-12)

    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.random(2) * size
        ry, rx = (0.08 + 0.22 * rng.random(2)) * size
        if rng.random() < 0.5:
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        colour = rng.random(3)[:, None, None]
        shade = 0.85 + 0.15 * img.mean(axis=0, keepdims=True)
        img = np.where(inside[None], colour * shade, img)

    lo, hi = 0.2 * rng.random(), 0.8 + 0.2 * rng.random()
    return (lo + (hi - lo) * img).astype(np.float32)


def load_source_images(directory, patch: int) -> list[np.ndarray]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"image directory {d} does not exist")
    images = []
    for p in sorted(d.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            img = read_image(p)
        except ImageFormatError as exc:
            raise DataError(str(exc)) from exc
        if min(img.shape[1:]) >= patch:
            images.append(img)
    if not images:
        raise DataError(f"no usable images (PPM/PGM/PNG at least {patch}x{patch}) in {d}")
    return images


def clean_patch(spec: DatasetSpec, rng: Rng, texture_seed: int) -> np.ndarray:
    if not spec._images:
        return procedural_texture(spec.patch, texture_seed)
    img = spec._images[int(rng.integers(0, len(spec._images)))]
    y = int(rng.integers(0, img.shape[1] - spec.patch + 1))
    x = int(rng.integers(0, img.shape[2] - spec.patch + 1))
    return img[:, y:y + spec.patch, x:x + spec.patch].astype(np.float32)


# -- batches -------------------------------------------------------------------------

def make_sample(spec: DatasetSpec, rng: Rng, task: str | None = None, flips: bool = True) -> ImageSample:
    if task is None:
        task = spec.tasks[int(rng.integers(0, len(spec.tasks)))]
    sub = int(rng.next_u64(1)[0] >> np.uint64(1))
    clean = clean_patch(spec, rng, sub)
    degraded = degrade(clean, task, sample_params(task, rng), sub)
    if flips:
        hflip, vflip = rng.random(2) < 0.5
        if hflip:
            clean, degraded = clean[:, :, ::-1], degraded[:, :, ::-1]
        if vflip:
            clean, degraded = clean[:, ::-1, :], degraded[:, ::-1, :]
    return ImageSample(np.ascontiguousarray(clean), np.ascontiguousarray(degraded), task)


def batch_rng(spec: DatasetSpec, index: int) -> Rng:
    return Rng(spec.seed, "batch", index)


def make_batch(spec: DatasetSpec, rng_state, batch_size: int):
    """(clean B x 3 x p x p, degraded B x 3 x p x p, task ids) for one training step.

    ``rng_state`` is an :class:`Rng` or an integer batch index into the spec's stream.
    """
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    rng = batch_rng(spec, rng_state) if isinstance(rng_state, (int, np.integer)) else rng_state
    samples = [make_sample(spec, rng) for _ in range(batch_size)]
    return (np.stack([s.clean for s in samples]), np.stack([s.degraded for s in samples]),
            [s.task for s in samples])


def iter_batches(spec: DatasetSpec, start: int, stop: int, batch_size: int, workers: int = 0):
    """Batches ``start..stop-1`` in index order; workers each own disjoint index streams."""
    if workers <= 0:
        for i in range(start, stop):
            yield make_batch(spec, i, batch_size)
        return
    with ThreadPoolExecutor(workers) as pool:
        yield from pool.map(lambda i: make_batch(spec, i, batch_size), range(start, stop))


def make_eval_set(spec: DatasetSpec, per_task: int, tasks=None) -> dict[str, list[ImageSample]]:
    """Held-out samples from streams disjoint from every training batch.

    Every task degrades the same clean images, so per-task scores are comparable.
    """
    tasks = spec.tasks if tasks is None else tuple(tasks)
    cleans = []
    for i in range(per_task):
        rng = Rng(spec.seed, "eval", i)
        cleans.append(clean_patch(spec, rng, int(rng.next_u64(1)[0] >> np.uint64(1))))
    out = {}
    for t in tasks:
        task_kind(t)
        samples = []
        for i, clean in enumerate(cleans):
            rng = Rng(spec.seed, "eval:" + t, i)
            sub = int(rng.next_u64(1)[0] >> np.uint64(1))
            samples.append(ImageSample(clean, degrade(clean, t, sample_params(t, rng), sub), t))
        out[t] = samples
    return out
