"""Training loop, held-out evaluation and run-directory bookkeeping.

A step's batch is keyed by its index, and the optimizer state and step counter
live in the checkpoint, so a resumed run continues exactly where the
uninterrupted run would be.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DatasetSpec, ImageSample, iter_batches, make_eval_set
from .metrics import pooled_features, psnr, ssim
from .model import DFPIR
from .optim import OptimState, adam_step
from .tensor import Tensor

METRICS_HEADER = ("step", "task", "loss", "psnr", "ssim")
LATEST = "latest.dfpc"
BEST = "best.dfpc"
LOG_EVERY = 100

logger = logging.getLogger("dfpir.train")


@dataclass
class TrainConfig:
    epochs: int = 20
    finetune_epochs: int = 1
    lr: float = 1e-4
    finetune_lr: float = 1e-5
    batch_size: int = 4
    eval_every: int = 500
    eval_per_task: int = 8
    checkpoint_every: int = 500
    workers: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0 or self.finetune_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if self.eval_every < 0 or self.checkpoint_every < 0 or self.eval_per_task < 1:
            raise ValueError("eval_every/checkpoint_every must be >= 0 and eval_per_task >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def steps_per_epoch(self, spec: DatasetSpec) -> int:
        return math.ceil(spec.samples_per_epoch / self.batch_size)

    def total_steps(self, spec: DatasetSpec) -> int:
        return (self.epochs + self.finetune_epochs) * self.steps_per_epoch(spec)

    def lr_at(self, step: int, spec: DatasetSpec) -> float:
        """Learning rate for 1-based ``step``: main phase, then fine-tuning."""
        return self.lr if step <= self.epochs * self.steps_per_epoch(spec) else self.finetune_lr


@dataclass
class TaskScore:
    loss: float
    psnr: float
    ssim: float
    n: int


@dataclass
class TrainResult:
    steps: int
    losses: list[float]
    evals: dict[int, dict[str, TaskScore]]
    best_psnr: float


def fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


class MetricsLog:
    """Single writer for metrics.csv; rows past ``keep_through`` are dropped on resume."""

    def __init__(self, path, keep_through: int | None = None):
        self.path = Path(path)
        rows = []
        if keep_through is not None and self.path.exists():
            with self.path.open(newline="") as fh:
                rows = [r for r in csv.reader(fh)][1:]
            rows = [r for r in rows if int(r[0]) <= keep_through]
        try:
            self.fh = self.path.open("w", newline="")
        except OSError as exc:
            raise OSError(f"cannot write metrics log {self.path}: {exc}") from exc
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(METRICS_HEADER)
        self.writer.writerows(rows)
        self.fh.flush()

    def row(self, step: int, task: str, loss, p, s) -> None:
        self.writer.writerow([step, task, fmt(loss), fmt(p), fmt(s)])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def batch_quality(pred: np.ndarray, clean: np.ndarray) -> tuple[float, float]:
    pred = np.clip(pred, 0.0, 1.0)
    return (float(np.mean([psnr(p, c) for p, c in zip(pred, clean)])),
            float(np.mean([ssim(p, c) for p, c in zip(pred, clean)])))


def evaluate(model: DFPIR, eval_set: dict[str, list[ImageSample]], batch: int = 8,
             features: list | None = None) -> dict[str, TaskScore]:
    """Per-task L1 / PSNR / SSIM of clamped restorations. Latent-block pooled
    features are appended to ``features`` as (task, vector) when given."""
    dtype = model.patch_embed.weight.dtype
    scores = {}
    for task, samples in eval_set.items():
        l1, ps, ss = [], [], []
        for i in range(0, len(samples), batch):
            chunk = samples[i:i + batch]
            x = Tensor(np.stack([s.degraded for s in chunk]).astype(dtype))
            with T.no_grad():
                out = model(x, task).data
            if features is not None:
                features.extend((task, v) for v in pooled_features(model.trace["dgpb_out"][-1]))
            for o, s in zip(out, chunk):
                o = np.clip(o, 0.0, 1.0)
                l1.append(float(np.mean(np.abs(o - s.clean))))
                ps.append(psnr(o, s.clean))
                ss.append(ssim(o, s.clean))
        scores[task] = TaskScore(float(np.mean(l1)), float(np.mean(ps)), float(np.mean(ss)), len(samples))
    return scores


def identity_baseline(eval_set: dict[str, list[ImageSample]]) -> dict[str, TaskScore]:
    """Scores of the degraded inputs themselves (clamped), per task."""
    out = {}
    for task, samples in eval_set.items():
        d = [np.clip(s.degraded, 0.0, 1.0) for s in samples]
        out[task] = TaskScore(float(np.mean([np.mean(np.abs(x - s.clean)) for x, s in zip(d, samples)])),
                              float(np.mean([psnr(x, s.clean) for x, s in zip(d, samples)])),
                              float(np.mean([ssim(x, s.clean) for x, s in zip(d, samples)])),
                              len(samples))
    return out


def write_scores_csv(path, scores: dict[str, TaskScore]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("task", "psnr", "ssim", "n"))
    for task, s in scores.items():
        w.writerow((task, fmt(s.psnr), fmt(s.ssim), s.n))
    Path(path).write_text(buf.getvalue())


def average_psnr(scores: dict[str, TaskScore]) -> float:
    return float(np.mean([s.psnr for s in scores.values()]))


def train_loop(model: DFPIR, spec: DatasetSpec, cfg: TrainConfig, out_dir, optim: OptimState | None = None,
               start_step: int = 0, best_psnr: float = -math.inf, stop_at: int | None = None,
               run_meta: dict | None = None) -> TrainResult:
    """Train from ``start_step`` to the schedule end (or ``stop_at``), writing into ``out_dir``.

    Produces metrics.csv (per-step training rows with task "train", then per-task
    and "average" rows at every evaluation), baseline.csv, and latest/best checkpoints.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create run directory {out}: {exc}") from exc
    params = model.parameters()
    if optim is None:
        optim = OptimState.for_params(params, cfg.lr)
    total = cfg.total_steps(spec)
    end = total if stop_at is None else min(stop_at, total)
    eval_set = make_eval_set(spec, cfg.eval_per_task)
    write_scores_csv(out / "baseline.csv", identity_baseline(eval_set))
    log = MetricsLog(out / "metrics.csv", keep_through=start_step if start_step > 0 else None)
    dtype = model.patch_embed.weight.dtype
    losses: list[float] = []
    evals: dict[int, dict[str, TaskScore]] = {}

    def meta(step):
        return {**(run_meta or {}), "step": step, "best_psnr": best_psnr if math.isfinite(best_psnr) else None}

    def run_eval(step):
        nonlocal best_psnr
        scores = evaluate(model, eval_set)
        evals[step] = scores
        for task, s in scores.items():
            log.row(step, task, s.loss, s.psnr, s.ssim)
        avg = average_psnr(scores)
        log.row(step, "average", float(np.mean([s.loss for s in scores.values()])), avg,
                float(np.mean([s.ssim for s in scores.values()])))
        if avg > best_psnr:
            best_psnr = avg
            save_checkpoint(out / BEST, model, optim, meta(step))

    if total == 0:
        run_eval(0)
    batches = iter_batches(spec, start_step, end, cfg.batch_size, cfg.workers)
    for step in range(start_step + 1, end + 1):
        clean, degraded, tasks = next(batches)
        optim.lr = cfg.lr_at(step, spec)
        pred = model(Tensor(degraded.astype(dtype)), tasks)
        loss = T.l1_loss(pred, Tensor(clean.astype(dtype)))
        model.zero_grad()
        loss.backward()
        adam_step(params, [p.grad for p in params], optim)
        lv = float(loss.data)
        losses.append(lv)
        log.row(step, "train", lv, *batch_quality(pred.data, clean))
        if step % LOG_EVERY == 0:
            logger.info("step %d/%d  loss %.5f  lr %g", step, total, lv, optim.lr)
        if (cfg.eval_every and step % cfg.eval_every == 0) or step == total:
            run_eval(step)
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(out / LATEST, model, optim, meta(step))
    save_checkpoint(out / LATEST, model, optim, meta(end))
    log.close()
    return TrainResult(end, losses, evals, best_psnr)


def resume_training(out_dir, spec: DatasetSpec, cfg: TrainConfig, stop_at: int | None = None,
                    run_meta: dict | None = None) -> tuple[DFPIR, TrainResult]:
    ckpt = Path(out_dir) / LATEST
    model, optim, meta = load_checkpoint(ckpt)
    if optim is None or "step" not in meta:
        raise CheckpointError(f"{ckpt}: no optimizer state to resume from")
    best = meta.get("best_psnr")
    result = train_loop(model, spec, cfg, out_dir, optim, int(meta["step"]),
                        -math.inf if best is None else float(best), stop_at, run_meta)
    return model, result


def spec_to_dict(spec: DatasetSpec) -> dict:
    return {k: v for k, v in asdict(spec).items() if not k.startswith("_")} | {"tasks": list(spec.tasks)}
