"""Degradation-guided perturbation block.

DGCPM expands channels 2x, reorders them by the descending channel scores
the guidance MLP produces from the task prompt, and halves them back.
CAAPM runs channel-dimension cross-attention (query from the shuffled
features, key/value from the original ones) with a binary top-K mask on
the scaled logits, then a 1x1 projection and a residual FFN.

Discrete selections (the permutation and the mask) carry no gradient.
Inside :func:`frozen_selections` they are computed on the first forward and
reused afterwards, which is what finite-difference checks need.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from . import tensor as T
from .nn import GDFN, Conv1x1, DWConv3x3, Init, LayerNorm2d, Module, _iter_modules
from .prompts import DGM
from .tensor import Tensor

MASK_AXES = ("row", "column")
MASK_MODES = ("multiply", "additive")
COMPONENTS = ("none", "shuffle", "mask", "full")


def channel_scores_to_perm(scores) -> np.ndarray:
    """Full descending argsort of channel scores (stable: ties keep lower index first).

    Accepts a single score vector or a batch of them (one row per sample).
    """
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores)
    return np.argsort(-s, axis=-1, kind="stable")


def attention_keep_count(gamma: float, channels: int) -> int:
    """Entries kept per mask slice: max(1, round(gamma * channels)), halves rounded up."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    return max(1, int(math.floor(gamma * channels + 0.5)))


def build_topk_mask(scores: np.ndarray, gamma: float, axis: str = "row") -> np.ndarray:
    """Binary mask keeping the top-K scores in every row (or column) of the last two axes."""
    if axis not in MASK_AXES:
        raise ValueError(f"mask axis must be one of {MASK_AXES}, got {axis!r}")
    s = np.asarray(scores)
    if axis == "column":
        return np.swapaxes(build_topk_mask(np.swapaxes(s, -1, -2), gamma, "row"), -1, -2)
    k = attention_keep_count(gamma, s.shape[-1])
    mask = np.zeros(s.shape, dtype=s.dtype if s.dtype.kind == "f" else np.float32)
    if k == s.shape[-1]:
        mask[...] = 1
        return mask
    top = np.argsort(-s, axis=-1, kind="stable")[..., :k]
    np.put_along_axis(mask, top, 1, axis=-1)
    return mask


class _Selecting(Module):
    _frozen: dict | None = None

    def _select(self, key: str, compute):
        if self._frozen is None:
            return compute()
        if key not in self._frozen:
            self._frozen[key] = compute()
        return self._frozen[key]


@contextmanager
def frozen_selections(module: Module):
    """Compute permutations and masks once, then reuse them for every forward."""
    mods = [m for _, m in _iter_modules(module) if isinstance(m, _Selecting)]
    for m in mods:
        m._frozen = {}
    try:
        yield
    finally:
        for m in mods:
            m._frozen = None


class DGCPM(_Selecting):
    def __init__(self, init: Init, dim: int, prompt_dim: int, score_modulation: bool = False):
        self.dim = dim
        self.conv_k = Conv1x1(init, dim, 2 * dim)
        self.dgm = DGM(init, prompt_dim, 2 * dim)
        self.conv_h = Conv1x1(init, 2 * dim, dim)
        self.score_modulation = score_modulation
        self.trace: dict = {}

    def permutation(self, prompts: Tensor) -> np.ndarray:
        return channel_scores_to_perm(self.dgm(prompts).data)

    def shuffle(self, f_n: Tensor, prompts: Tensor) -> Tensor:
        """Expanded and reordered features (before the halving conv)."""
        if f_n.shape[1] != self.dim:
            raise T.ShapeError(f"DGCPM built for {self.dim} channels, got {f_n.shape[1]}")
        scores = self.dgm(prompts)
        perm = self._select("perm", lambda: channel_scores_to_perm(scores.data))
        perm = np.broadcast_to(perm, (f_n.shape[0], 2 * self.dim))
        self.trace["perm"] = perm
        shuffled = T.permute_channels(self.conv_k(f_n), perm)
        if self.score_modulation:
            gate = T.sigmoid(T.gather_rows(scores, perm))
            shuffled = T.mul(shuffled, T.reshape(gate, gate.shape + (1, 1)))
        return shuffled

    def forward(self, f_n: Tensor, prompts: Tensor) -> Tensor:
        return self.conv_h(self.shuffle(f_n, prompts))


class CAAPM(_Selecting):
    def __init__(self, init: Init, dim: int, expansion: float = 2.0, gamma: float = 0.9,
                 mask_axis: str = "row", mask_mode: str = "multiply"):
        attention_keep_count(gamma, dim)
        if mask_axis not in MASK_AXES:
            raise ValueError(f"mask axis must be one of {MASK_AXES}")
        if mask_mode not in MASK_MODES:
            raise ValueError(f"mask mode must be one of {MASK_MODES}")
        self.dim = dim
        self.gamma = gamma
        self.mask_axis = mask_axis
        self.mask_mode = mask_mode
        self.norm_q = LayerNorm2d(init, dim)
        self.norm_kv = LayerNorm2d(init, dim)
        self.q_proj = Conv1x1(init, dim, dim)
        self.q_dw = DWConv3x3(init, dim)
        self.kv_proj = Conv1x1(init, dim, 2 * dim)
        self.kv_dw = DWConv3x3(init, 2 * dim)
        self.project_out = Conv1x1(init, dim, dim)
        self.norm_ffn = LayerNorm2d(init, dim)
        self.ffn = GDFN(init, dim, expansion)
        self.trace: dict = {}

    def forward(self, q: Tensor, f_n: Tensor, gamma: float | None = None,
                apply_mask: bool = True) -> Tensor:
        if q.shape != f_n.shape:
            raise T.ShapeError(f"CAAPM inputs differ in shape: {q.shape} vs {f_n.shape}")
        b, c, h, w = q.shape
        if c != self.dim:
            raise T.ShapeError(f"CAAPM built for {self.dim} channels, got {c}")
        gamma = self.gamma if gamma is None else gamma
        attention_keep_count(gamma, c)

        q_star = self.q_dw(self.q_proj(self.norm_q(q)))
        k_star, v_star = T.split(self.kv_dw(self.kv_proj(self.norm_kv(f_n))), [c, c], axis=1)
        qf = T.reshape(q_star, (b, c, h * w))
        kf = T.reshape(k_star, (b, c, h * w))
        vf = T.reshape(v_star, (b, c, h * w))
        # d_k is the length of each channel descriptor
        logits = T.scale(T.matmul(qf, T.transpose_last(kf)), 1.0 / math.sqrt(h * w))
        self.trace["scores"] = logits.data

        if apply_mask:
            mask = self._select("mask", lambda: build_topk_mask(logits.data, gamma, self.mask_axis))
            self.trace["mask"] = mask
            if self.mask_mode == "multiply":
                attn = T.softmax(T.mul(logits, Tensor(mask.astype(logits.dtype))), axis=-1)
            else:
                # column masks can empty a whole row; that row then attends to nothing
                attn = T.masked_softmax(logits, mask, axis=-1, allow_empty=self.mask_axis == "column")
        else:
            self.trace["mask"] = None
            attn = T.softmax(logits, axis=-1)
        self.trace["attention"] = attn.data

        f_a = self.project_out(T.reshape(T.matmul(attn, vf), (b, c, h, w)))
        return T.add(f_a, self.ffn(self.norm_ffn(f_a)))


class DGPB(Module):
    def __init__(self, init: Init, dim: int, prompt_dim: int, expansion: float = 2.0,
                 gamma: float = 0.9, mask_axis: str = "row", mask_mode: str = "multiply",
                 score_modulation: bool = False, components: str = "full"):
        if components not in COMPONENTS:
            raise ValueError(f"components must be one of {COMPONENTS}, got {components!r}")
        self.dim = dim
        self.components = components
        self.dgcpm = DGCPM(init, dim, prompt_dim, score_modulation)
        self.caapm = CAAPM(init, dim, expansion, gamma, mask_axis, mask_mode)

    def forward(self, f_n: Tensor, prompts: Tensor, gamma: float | None = None) -> Tensor:
        if self.components == "full":
            return dgpb_forward(f_n, prompts, self, gamma)
        if self.components == "shuffle":
            return dgcpm_forward(f_n, prompts, self.dgcpm)
        if self.components == "mask":
            return caapm_forward(f_n, f_n, self.caapm, gamma)
        return f_n


def dgcpm_forward(f_n: Tensor, prompts: Tensor, params: DGCPM) -> Tensor:
    return params(f_n, prompts)


def caapm_forward(q: Tensor, f_n: Tensor, params: CAAPM, gamma: float | None = None) -> Tensor:
    return params(q, f_n, gamma)


def dgpb_forward(f_n: Tensor, prompts: Tensor, params: DGPB, gamma: float | None = None) -> Tensor:
    return caapm_forward(dgcpm_forward(f_n, prompts, params.dgcpm), f_n, params.caapm, gamma)
