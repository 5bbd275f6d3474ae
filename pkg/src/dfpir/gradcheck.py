"""Finite-difference verification of every differentiable module, in float64.

Each check builds a small instance of one module, takes the scalar
``sum(output * R)`` for a fixed random ``R``, and compares the reverse-mode
gradient of every parameter and input against central differences. The
error per tensor is ``||analytic - numeric|| / max(||analytic||, ||numeric||)``
over the checked entries. Permutations and masks are frozen for the whole check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .dgpb import CAAPM, DGCPM, DGPB, frozen_selections
from .model import DFPIR, ModelConfig
from .nn import Downsample, Init, Module, SkipFuse, TransformerBlock, Upsample
from .prompts import DGM
from .rng import Rng
from .tensor import Tensor

GROUPS = ("dgcpm", "caapm", "dgm", "dgpb", "transformer_block", "resamplers", "full_model")
TOLERANCE = 1e-4


@dataclass
class GradResult:
    group: str
    name: str
    rel_error: float
    checked: int


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_gradients(group: str, forward: Callable[[], Tensor], targets: list[tuple[str, Tensor]],
                    module: Module | None = None, h: float = 1e-5, max_elems: int | None = None,
                    seed: int = 0) -> list[GradResult]:
    rng = Rng(seed, "gradcheck-" + group)
    holder = module if module is not None else Module()
    results = []
    with frozen_selections(holder):
        out = forward()
        proj = Tensor(rng.normal(out.shape).astype(np.float64))
        for _, t in targets:
            t.grad = None
        T.sum_(T.mul(out, proj)).backward()

        def loss() -> float:
            with T.no_grad():
                return float((forward().data * proj.data).sum())

        for name, t in targets:
            n = t.data.size
            if max_elems is None or n <= max_elems:
                idx = np.arange(n)
            else:
                idx = np.sort(np.argsort(rng.random(n), kind="stable")[:max_elems])
            numeric = T.finite_diff_grad(loss, t, h, idx).reshape(-1)[idx]
            analytic = (np.zeros(n) if t.grad is None else t.grad.reshape(-1))[idx]
            results.append(GradResult(group, name, rel_error(analytic, numeric), len(idx)))
    return results


def _inputs(rng: Rng, *shape) -> Tensor:
    return Tensor(rng.normal(shape), requires_grad=True)


def _params(module: Module, prefix: str = "") -> list[tuple[str, Tensor]]:
    return [(prefix + n, p) for n, p in module.named_parameters()]


def _init(seed: int) -> Init:
    return Init(seed, "gradcheck-init", dtype=np.float64)


def check_dgcpm(seed: int = 0, h: float = 1e-5) -> list[GradResult]:
    rng = Rng(seed, "gc-dgcpm")
    m = DGCPM(_init(seed), 4, 6)
    x = _inputs(rng, 1, 4, 4, 4)
    p = Tensor(rng.normal((1, 6)))
    return check_gradients("dgcpm", lambda: m(x, p), [("F_n", x)] + _params(m), m, h)


def check_caapm(seed: int = 0, h: float = 1e-5) -> list[GradResult]:
    rng = Rng(seed, "gc-caapm")
    results = []
    for mode in ("multiply", "additive"):
        m = CAAPM(_init(seed), 4, gamma=0.5, mask_mode=mode)
        q = _inputs(rng, 1, 4, 4, 4)
        f = _inputs(rng, 1, 4, 4, 4)
        results += check_gradients("caapm", lambda: m(q, f), [(f"{mode}:Q", q), (f"{mode}:F_n", f)]
                                   + _params(m, mode + ":"), m, h)
    return results


def check_dgm(seed: int = 0, h: float = 1e-5) -> list[GradResult]:
    rng = Rng(seed, "gc-dgm")
    m = DGM(_init(seed), 6, 8)
    p = _inputs(rng, 2, 6)
    results = check_gradients("dgm", lambda: m(p), [("P_e", p)] + _params(m), m, h)
    # inside DGCPM the scores reach the output only through the optional modulation gate
    for modulation in (False, True):
        d = DGCPM(_init(seed + 1), 4, 6, score_modulation=modulation)
        x = _inputs(rng, 1, 4, 4, 4)
        pr = Tensor(rng.normal((1, 6)))
        tag = "dgcpm-modulated:" if modulation else "dgcpm-literal:"
        results += check_gradients("dgm", lambda: d(x, pr), _params(d.dgm, tag + "dgm."), d, h)
    return results


def check_dgpb(seed: int = 0, h: float = 1e-5) -> list[GradResult]:
    rng = Rng(seed, "gc-dgpb")
    m = DGPB(_init(seed), 8, 6, gamma=0.5)
    x = _inputs(rng, 1, 8, 4, 4)
    p = Tensor(rng.normal((1, 6)))
    return check_gradients("dgpb", lambda: m(x, p), [("F_n", x)] + _params(m), m, h)


def check_transformer_block(seed: int = 0, h: float = 1e-5) -> list[GradResult]:
    rng = Rng(seed, "gc-block")
    results = []
    for heads in (1, 2):
        m = TransformerBlock(_init(seed), 8, heads=heads)
        x = _inputs(rng, 1, 8, 4, 4)
        results += check_gradients("transformer_block", lambda: m(x),
                                   [(f"h{heads}:x", x)] + _params(m, f"h{heads}:"), m, h)
    return results


def check_resamplers(seed: int = 0, h: float = 1e-5) -> list[GradResult]:
    rng = Rng(seed, "gc-resample")
    init = _init(seed)
    down, up, fuse = Downsample(init, 8), Upsample(init, 8), SkipFuse(init, 4)
    x = _inputs(rng, 2, 8, 4, 4)
    a = _inputs(rng, 1, 4, 4, 4)
    b = _inputs(rng, 1, 4, 4, 4)
    return (check_gradients("resamplers", lambda: down(x), [("down:x", x)] + _params(down, "down."), down, h)
            + check_gradients("resamplers", lambda: up(x), [("up:x", x)] + _params(up, "up."), up, h)
            + check_gradients("resamplers", lambda: fuse(a, b),
                              [("fuse:dec", a), ("fuse:skip", b)] + _params(fuse, "fuse."), fuse, h))


def check_full_model(seed: int = 0, h: float = 1e-5, max_elems: int | None = 24,
                     config: ModelConfig | None = None) -> list[GradResult]:
    config = config or ModelConfig(channels=4, blocks=(1, 1, 1, 1), prompt_dim=16,
                                   tasks=("noise25", "derain", "dehaze"), seed=seed)
    rng = Rng(seed, "gc-model")
    m = DFPIR(config, dtype=np.float64)
    x = Tensor(rng.random((1, 3, 16, 16)), requires_grad=True)
    task = [config.tasks[0]]
    return check_gradients("full_model", lambda: m(x, task), [("image", x)] + _params(m), m, h,
                           max_elems=max_elems)


CHECKS = {
    "dgcpm": check_dgcpm,
    "caapm": check_caapm,
    "dgm": check_dgm,
    "dgpb": check_dgpb,
    "transformer_block": check_transformer_block,
    "resamplers": check_resamplers,
    "full_model": check_full_model,
}


def run_suite(groups=GROUPS, seed: int = 0, h: float = 1e-5, full_model_config: ModelConfig | None = None,
              full_model_max_elems: int | None = 24) -> list[GradResult]:
    results = []
    for g in groups:
        if g == "full_model":
            results += check_full_model(seed, h, full_model_max_elems, full_model_config)
        else:
            results += CHECKS[g](seed, h)
    return results


def worst_by_group(results: list[GradResult]) -> dict[str, GradResult]:
    worst: dict[str, GradResult] = {}
    for r in results:
        if r.group not in worst or r.rel_error > worst[r.group].rel_error:
            worst[r.group] = r
    return worst
