"""Image quality metrics and the task-cluster separation statistic.

PSNR and SSIM work on float images in [0, 1]; callers clamp predictions first.
"""

from __future__ import annotations

import math
from collections import defaultdict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial.distance import cdist, pdist

PSNR_CAP = 99.0
SEPARATION_CAP = 1e6
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' Gaussian filtering over the last two axes."""
    rows = sliding_window_view(img, g.size, axis=-2) @ g
    return sliding_window_view(rows, g.size, axis=-1) @ g


def ssim_map(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"ssim needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[-2:]}")
    g = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean SSIM; for C x H x W inputs the per-channel means are averaged."""
    m = ssim_map(a, b, peak)
    if m.ndim == 2:
        return float(m.mean())
    per_channel = m.reshape(-1, m.shape[-2] * m.shape[-1]).mean(axis=1)
    return float(per_channel.mean())


def cluster_separation(features) -> float:
    """Mean inter-task pairwise distance over mean intra-task pairwise distance.

    ``features`` is an iterable of ``(task, vector)``. Pairwise sample distances
    are used on both sides so that two tasks drawn from one distribution score
    about 1. Zero intra-task spread returns the cap.
    """
    groups: dict[str, list] = defaultdict(list)
    for task, vec in features:
        groups[task].append(np.asarray(vec, dtype=np.float64).ravel())
    if len(groups) < 2:
        raise ValueError("cluster_separation needs at least 2 tasks")
    for task, vecs in groups.items():
        if len(vecs) < 2:
            raise ValueError(f"task {task!r} has fewer than 2 samples")
    arrays = [np.stack(v) for _, v in sorted(groups.items())]
    intra = float(np.mean([pdist(x).mean() for x in arrays]))
    inter = float(np.mean([cdist(arrays[i], arrays[j]).mean()
                           for i in range(len(arrays)) for j in range(i + 1, len(arrays))]))
    if intra == 0.0:
        return SEPARATION_CAP if inter > 0.0 else 1.0
    return min(SEPARATION_CAP, inter / intra)


def pooled_features(feature_map: np.ndarray) -> np.ndarray:
    """Spatial average pooling: B x C x H x W -> B x C."""
    return np.asarray(feature_map).mean(axis=(-2, -1))
