"""Four-level encoder-decoder with a perturbation block on each skip and the latent."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .dgpb import COMPONENTS, DGPB, MASK_AXES, MASK_MODES, attention_keep_count
from .nn import Conv3x3, Downsample, Init, Module, SkipFuse, TransformerBlock, Upsample
from .prompts import DEFAULT_TASKS, DGM, PromptTable, TaskRegistry
from .tensor import Tensor

LEVELS = 4


@dataclass
class ModelConfig:
    channels: int = 16
    blocks: tuple[int, ...] = (1, 1, 1, 2)
    heads: tuple[int, ...] = (1, 1, 1, 1)
    ffn_expansion: float = 2.0
    prompt_dim: int = 64
    gamma: float = 0.9
    mask_axis: str = "row"
    mask_mode: str = "multiply"
    score_modulation: bool = False
    components: str = "full"
    identity_init: bool = False
    tasks: tuple[str, ...] = field(default_factory=lambda: DEFAULT_TASKS)
    seed: int = 0

    def __post_init__(self):
        self.blocks = tuple(int(b) for b in self.blocks)
        self.heads = tuple(int(h) for h in self.heads)
        self.tasks = tuple(self.tasks)
        self.validate()

    def validate(self) -> None:
        if self.channels < 2 or self.channels % 2:
            raise ValueError(f"model.channels must be even and >= 2, got {self.channels}")
        if len(self.blocks) != LEVELS or min(self.blocks) < 1:
            raise ValueError(f"model.blocks needs {LEVELS} counts >= 1, got {self.blocks}")
        if len(self.heads) != LEVELS or min(self.heads) < 1:
            raise ValueError(f"model.heads needs {LEVELS} counts >= 1, got {self.heads}")
        for lvl, h in enumerate(self.heads):
            if (self.channels << lvl) % h:
                raise ValueError(f"level {lvl + 1} width {self.channels << lvl} not divisible by {h} heads")
        if self.ffn_expansion <= 0:
            raise ValueError("model.ffn_expansion must be positive")
        if self.prompt_dim < 1:
            raise ValueError("model.prompt_dim must be >= 1")
        attention_keep_count(self.gamma, self.channels)
        if self.mask_axis not in MASK_AXES:
            raise ValueError(f"mask axis must be one of {MASK_AXES}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask mode must be one of {MASK_MODES}")
        if self.components not in COMPONENTS:
            raise ValueError(f"components must be one of {COMPONENTS}")
        TaskRegistry(self.tasks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = list(self.blocks)
        d["heads"] = list(self.heads)
        d["tasks"] = list(self.tasks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class DFPIR(Module):
    def __init__(self, config: ModelConfig, prompts: PromptTable | None = None, dtype=np.float32):
        self.config = config
        self.registry = TaskRegistry(config.tasks)
        if prompts is None:
            prompts = PromptTable.seeded(self.registry, config.prompt_dim, config.seed)
        if prompts.dim != config.prompt_dim:
            raise ValueError(f"prompt vectors have length {prompts.dim}, config expects {config.prompt_dim}")
        self.prompts = prompts
        init = Init(config.seed, "init", dtype=dtype)
        c, n, hd, e = config.channels, config.blocks, config.heads, config.ffn_expansion

        def stage(level: int, width: int, count: int):
            return [TransformerBlock(init, width, hd[level], e) for _ in range(count)]

        self.patch_embed = Conv3x3(init, 3, c)
        self.encoder1 = stage(0, c, n[0])
        self.down1 = Downsample(init, c)
        self.encoder2 = stage(1, 2 * c, n[1])
        self.down2 = Downsample(init, 2 * c)
        self.encoder3 = stage(2, 4 * c, n[2])
        self.down3 = Downsample(init, 4 * c)
        self.latent = stage(3, 8 * c, n[3])

        self.dgpb = [
            DGPB(init, c << lvl, config.prompt_dim, e, config.gamma, config.mask_axis,
                 config.mask_mode, config.score_modulation, config.components)
            for lvl in range(LEVELS)
        ]

        self.up3 = Upsample(init, 8 * c)
        self.fuse3 = SkipFuse(init, 4 * c)
        self.decoder3 = stage(2, 4 * c, n[2])
        self.up2 = Upsample(init, 4 * c)
        self.fuse2 = SkipFuse(init, 2 * c)
        self.decoder2 = stage(1, 2 * c, n[1])
        self.up1 = Upsample(init, 2 * c)
        self.decoder1 = stage(0, 2 * c, n[0])
        self.output = Conv3x3(init, 2 * c, 3)
        if config.identity_init:
            self.output.weight.data[...] = 0
        self.trace: dict = {}
        self._ensure_distinct_permutations(dtype)

    # -- construction helpers -------------------------------------------------

    def task_permutations(self, level: int) -> dict[str, np.ndarray]:
        dgcpm = self.dgpb[level].dgcpm
        p = Tensor(self.prompts.batch(self.registry.names, dgcpm.conv_k.weight.dtype))
        perms = dgcpm.permutation(p)
        return {t: perms[i] for i, t in enumerate(self.registry.names)}

    def _ensure_distinct_permutations(self, dtype) -> None:
        for lvl in range(LEVELS):
            attempt = 0
            while len({p.tobytes() for p in self.task_permutations(lvl).values()}) < len(self.registry):
                attempt += 1
                if attempt > 100:
                    raise RuntimeError(f"cannot draw distinct task permutations at level {lvl + 1}")
                retry = Init(self.config.seed, "init-dgm-retry", lvl * 1000 + attempt, dtype)
                dgcpm = self.dgpb[lvl].dgcpm
                dgcpm.dgm = DGM(retry, self.config.prompt_dim, 2 * dgcpm.dim)

    # -- forward pieces ---------------------------------------------------------

    def prompt_batch(self, tasks) -> Tensor:
        dtype = self.patch_embed.weight.dtype
        return Tensor(self.prompts.batch(tasks, dtype))

    def shallow_extract(self, image: Tensor) -> Tensor:
        h, w = image.shape[2:]
        if image.shape[1] != 3:
            raise T.ShapeError(f"expected 3 input channels, got {image.shape[1]}")
        if h % 8 or w % 8:
            raise T.ShapeError(f"input height and width must be divisible by 8, got {h}x{w}")
        return self.patch_embed(image)

    @staticmethod
    def _run(blocks, x: Tensor) -> Tensor:
        for blk in blocks:
            x = blk(x)
        return x

    def encode(self, f0: Tensor):
        f1 = self._run(self.encoder1, f0)
        f2 = self._run(self.encoder2, self.down1(f1))
        f3 = self._run(self.encoder3, self.down2(f2))
        fe = self._run(self.latent, self.down3(f3))
        return f1, f2, f3, fe

    def apply_dgpbs(self, feats, prompts: Tensor):
        out = tuple(blk(f, prompts) for blk, f in zip(self.dgpb, feats))
        self.trace["dgpb_in"] = [f.data for f in feats]
        self.trace["dgpb_out"] = [f.data for f in out]
        return out

    def decode(self, feats) -> Tensor:
        p1, p2, p3, pe = feats
        d3 = self._run(self.decoder3, self.fuse3(self.up3(pe), p3))
        d2 = self._run(self.decoder2, self.fuse2(self.up2(d3), p2))
        # level 1 keeps both halves: F_r has 2C channels
        return self._run(self.decoder1, T.concat([self.up1(d2), p1], axis=1))

    def forward(self, image: Tensor, tasks) -> Tensor:
        if isinstance(tasks, str):
            tasks = [tasks] * image.shape[0]
        if len(tasks) != image.shape[0]:
            raise ValueError(f"{len(tasks)} task ids for a batch of {image.shape[0]}")
        prompts = self.prompt_batch(tasks)
        f0 = self.shallow_extract(image)
        fr = self.decode(self.apply_dgpbs(self.encode(f0), prompts))
        return T.add(image, self.output(fr))


def dfpir_forward(model: DFPIR, image: Tensor, tasks) -> Tensor:
    return model(image, tasks)


def restore(model: DFPIR, image: np.ndarray, tasks) -> np.ndarray:
    """Inference helper: forward without recording a graph, clamp to [0, 1]."""
    x = Tensor(np.asarray(image, dtype=model.patch_embed.weight.dtype))
    with T.no_grad():
        out = model(x, tasks).data
    return np.clip(out, 0.0, 1.0)
