"""Command-line entry point: train, eval, infer, inspect, gradcheck, ablate.

Exit codes: 0 success, 2 config or usage error, 3 data or I/O error,
4 checkpoint error, 5 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as G
from .checkpoint import CheckpointError, load_checkpoint
from .config import (ConfigError, build_model, dataset_spec, dump_config, load_config, set_key,
                     train_config)
from .data import DataError, DatasetSpec, make_eval_set, task_kind
from .images import ImageFormatError, minmax_normalize, read_image, write_image, write_pgm
from .metrics import cluster_separation
from .model import DFPIR, LEVELS, ModelConfig, restore
from .prompts import UnknownTaskError
from .train import (TrainConfig, average_psnr, evaluate, fmt, resume_training, spec_to_dict,
                    train_loop)
from . import tensor as T

log = logging.getLogger("dfpir")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT, EXIT_VERIFY = 0, 2, 3, 4, 5
GAMMA_GRID = (0.5, 0.7, 0.8, 0.9, 1.0)
ABLATION_VARIANTS = (("baseline", "none"), ("shuffle-only", "shuffle"), ("mask-only", "mask"),
                     ("full", "full"))


class VerificationError(RuntimeError):
    pass


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _print_table(header, rows) -> None:
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for r in cells:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())


def _ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create directory {p}: {exc}") from exc
    return p


def _tasks_arg(text: str | None, model: DFPIR) -> tuple[str, ...]:
    if not text:
        return model.registry.names
    tasks = tuple(t.strip() for t in text.split(",") if t.strip())
    for t in tasks:
        model.registry.index(t)
    return tasks


def pad_to_multiple(img: np.ndarray, k: int = 8) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = img.shape[1:]
    ph, pw = (-h) % k, (-w) % k
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect" if min(h, w) > 1 else "edge")
    return img, (h, w)


# -- train -------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set, args.seed, args.epochs)
    out = _ensure_dir(args.out)
    spec = dataset_spec(cfg)
    tcfg = train_config(cfg)
    meta = {"data": spec_to_dict(spec), "train": cfg["train"]}
    if args.resume:
        previous = out / "resolved-config.json"
        if previous.exists() and previous.read_text() != dump_config(cfg):
            raise ConfigError(f"resolved config differs from the one in {out}; refusing to resume")
        _, result = resume_training(out, spec, tcfg, args.stop_at, meta)
    else:
        (out / "resolved-config.json").write_text(dump_config(cfg))
        model = build_model(cfg)
        result = train_loop(model, spec, tcfg, out, stop_at=args.stop_at, run_meta=meta)
    print(f"trained to step {result.steps}; run directory {out}")
    if result.evals:
        last = result.evals[max(result.evals)]
        _print_table(("task", "psnr", "ssim"), [(t, f"{s.psnr:.3f}", f"{s.ssim:.4f}") for t, s in last.items()])
    return EXIT_OK


# -- eval --------------------------------------------------------------------------

def cmd_eval(args) -> int:
    model, _, meta = load_checkpoint(args.ckpt)
    tasks = _tasks_arg(args.tasks, model)
    spec = DatasetSpec(tasks=tasks, patch=args.patch, source=args.data, seed=args.seed)
    scores = evaluate(model, make_eval_set(spec, args.per_task))
    rows = [(t, fmt(s.psnr), fmt(s.ssim), s.n) for t, s in scores.items()]
    _print_table(("task", "psnr", "ssim", "n"),
                 [(t, f"{s.psnr:.3f}", f"{s.ssim:.4f}", s.n) for t, s in scores.items()])
    print(f"average psnr {average_psnr(scores):.3f}")
    csv_path = Path(args.csv) if args.csv else Path(args.ckpt).with_name("eval.csv")
    try:
        csv_path.write_text(_csv_text(("task", "psnr", "ssim", "n"), rows))
    except OSError as exc:
        raise OSError(f"cannot write {csv_path}: {exc}") from exc
    return EXIT_OK


# -- infer -------------------------------------------------------------------------

def cmd_infer(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    model.registry.index(args.task)
    img = read_image(args.input)
    padded, (h, w) = pad_to_multiple(img)
    out = restore(model, padded[None], args.task)[0, :, :h, :w]
    try:
        write_image(args.output, out)
    except OSError as exc:
        raise OSError(f"cannot write {args.output}: {exc}") from exc
    print(f"wrote {args.output} ({w}x{h}, task {args.task})")
    return EXIT_OK


# -- inspect -----------------------------------------------------------------------

def feature_mosaic(fmap: np.ndarray) -> np.ndarray:
    """C x H x W -> grid of per-channel min-max normalized maps, 1-pixel gaps."""
    c, h, w = fmap.shape
    cols = math.ceil(math.sqrt(c))
    rows = math.ceil(c / cols)
    grid = np.zeros((rows * (h + 1) - 1, cols * (w + 1) - 1))
    for i in range(c):
        r, q = divmod(i, cols)
        grid[r * (h + 1):r * (h + 1) + h, q * (w + 1):q * (w + 1) + w] = minmax_normalize(fmap[i])
    return grid


def verify_dumps(dump: Path, model: DFPIR) -> list[str]:
    """Re-read the dumped permutation CSVs and check every row is a bijection."""
    problems = []
    for lvl in range(LEVELS):
        path = dump / f"permutation_level{lvl + 1}.csv"
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        n = 2 * (model.config.channels << lvl)
        for row in rows:
            perm = [int(v) for v in row[1:]]
            if sorted(perm) != list(range(n)):
                problems.append(f"{path.name}: row for {row[0]} is not a permutation of 0..{n - 1}")
    return problems


def cmd_inspect(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    tasks = _tasks_arg(args.task, model)
    dump = _ensure_dir(args.dump_dir)
    img, _ = pad_to_multiple(read_image(args.input))
    x = T.Tensor(img[None].astype(model.patch_embed.weight.dtype))
    perms = {lvl: [] for lvl in range(LEVELS)}
    for task in tasks:
        with T.no_grad():
            model(x, task)
        for lvl, block in enumerate(model.dgpb):
            tag = f"level{lvl + 1}_{task}"
            if "perm" in block.dgcpm.trace:
                perms[lvl].append((task, block.dgcpm.trace["perm"][0]))
            mask = block.caapm.trace.get("mask")
            if mask is not None:
                write_pgm(dump / f"mask_{tag}.pgm", mask[0].astype(np.float64))
            if "attention" in block.caapm.trace:
                write_pgm(dump / f"attention_{tag}.pgm", minmax_normalize(block.caapm.trace["attention"][0]))
            write_pgm(dump / f"features_pre_{tag}.pgm", feature_mosaic(model.trace["dgpb_in"][lvl][0]))
            write_pgm(dump / f"features_post_{tag}.pgm", feature_mosaic(model.trace["dgpb_out"][lvl][0]))
    for lvl in range(LEVELS):
        if not perms[lvl]:
            # shuffle disabled in this model; dump what the guidance MLP would choose
            perms[lvl] = [(t, p) for t, p in model.task_permutations(lvl).items() if t in tasks]
        n = perms[lvl][0][1].size
        (dump / f"permutation_level{lvl + 1}.csv").write_text(
            _csv_text(["task"] + [f"p{i}" for i in range(n)], [[t] + p.tolist() for t, p in perms[lvl]]))

    sep_tasks = [t for t in model.registry.names if _has_generator(t)]
    if len(sep_tasks) >= 2 and args.samples_per_task >= 2:
        spec = DatasetSpec(tasks=tuple(sep_tasks), patch=args.patch, source=args.data, seed=args.seed)
        feats: list = []
        evaluate(model, make_eval_set(spec, args.samples_per_task), features=feats)
        value = cluster_separation(feats)
        (dump / "cluster_separation.csv").write_text(
            _csv_text(("statistic", "value", "tasks", "samples_per_task"),
                      [("cluster_separation", fmt(value), " ".join(sep_tasks), args.samples_per_task)]))
        print(f"cluster_separation {value:.4f} over {len(sep_tasks)} tasks")
    print(f"wrote dumps for {len(tasks)} task(s) to {dump}")
    if args.verify:
        problems = verify_dumps(dump, model)
        for p in problems:
            print("VERIFY FAIL", p)
        if problems:
            raise VerificationError(f"{len(problems)} verification problem(s)")
        print("verify: all permutation rows are bijections")
    return EXIT_OK


def _has_generator(task: str) -> bool:
    try:
        task_kind(task)
        return True
    except DataError:
        return False


# -- gradcheck ---------------------------------------------------------------------

def gradcheck_model_config(cfg: dict) -> ModelConfig:
    """Small geometry for the full-model check; attention settings follow the run config."""
    tasks = tuple(cfg["model"]["tasks"])[:3]
    return ModelConfig(channels=4, blocks=(1, 1, 1, 1), heads=(1, 1, 1, 1), prompt_dim=16,
                       gamma=cfg["dgpb"]["gamma"], mask_axis=cfg["dgpb"]["mask_axis"],
                       mask_mode=cfg["dgpb"]["mask_mode"], score_modulation=cfg["dgcpm"]["score_modulation"],
                       tasks=tasks, seed=cfg["seed"])


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    groups = tuple(g.strip() for g in args.groups.split(",")) if args.groups else G.GROUPS
    for g in groups:
        if g not in G.GROUPS:
            raise ConfigError(f"unknown gradcheck group {g!r}; choose from {', '.join(G.GROUPS)}")
    results = G.run_suite(groups, seed=cfg["seed"], h=args.h,
                          full_model_config=gradcheck_model_config(cfg),
                          full_model_max_elems=args.max_elems or None)
    worst = G.worst_by_group(results)
    rows = [(g, f"{worst[g].rel_error:.3e}", worst[g].name,
             "PASS" if worst[g].rel_error < G.TOLERANCE else "FAIL") for g in groups]
    _print_table(("group", "worst_rel_error", "tensor", "status"), rows)
    if args.csv:
        Path(args.csv).write_text(_csv_text(("group", "tensor", "rel_error", "checked"),
                                            [(r.group, r.name, fmt(r.rel_error), r.checked) for r in results]))
    failed = [g for g in groups if not worst[g].rel_error < G.TOLERANCE]
    if failed:
        raise VerificationError(f"gradient check failed for {', '.join(failed)}")
    print(f"all {len(groups)} groups below {G.TOLERANCE:g}")
    return EXIT_OK


# -- ablate ------------------------------------------------------------------------

def ablation_plan(cfg: dict, components, gammas) -> list[tuple[str, str, float]]:
    plan = [(name, comp, cfg["dgpb"]["gamma"]) for name, comp in ABLATION_VARIANTS if comp in components]
    plan += [(f"gamma-{g:g}", "full", g) for g in gammas]
    return plan


def cmd_ablate(args) -> int:
    base = load_config(args.config, args.set, args.seed)
    components = tuple(c.strip() for c in args.components.split(",")) if args.components else \
        tuple(c for _, c in ABLATION_VARIANTS)
    gammas = tuple(float(g) for g in args.gammas.split(",")) if args.gammas else GAMMA_GRID
    out = _ensure_dir(args.out)
    rows = []
    for name, comp, gamma in ablation_plan(base, components, gammas):
        cfg = load_config(args.config, list(args.set) + [f"model.components={comp}", f"dgpb.gamma={gamma}"],
                          args.seed)
        spec = dataset_spec(cfg)
        tcfg = train_config(cfg)
        set_key(cfg, "train.eval_every", 0)
        run_dir = _ensure_dir(out / name)
        (run_dir / "resolved-config.json").write_text(dump_config(cfg))
        model = build_model(cfg)
        steps = args.steps if args.steps is not None else tcfg.total_steps(spec)
        tcfg = TrainConfig(**{**cfg["train"], "epochs": max(tcfg.epochs, math.ceil(steps / tcfg.steps_per_epoch(spec)))})
        train_loop(model, spec, tcfg, run_dir, stop_at=steps)
        scores = evaluate(model, make_eval_set(spec, args.eval_per_task))
        for task, s in scores.items():
            rows.append((name, comp, fmt(gamma), task, fmt(s.psnr), fmt(s.ssim), s.n))
        rows.append((name, comp, fmt(gamma), "average", fmt(average_psnr(scores)),
                     fmt(float(np.mean([s.ssim for s in scores.values()]))), sum(s.n for s in scores.values())))
        log.info("ablation %s: average psnr %.3f", name, average_psnr(scores))
    header = ("variant", "components", "gamma", "task", "psnr", "ssim", "n")
    (out / "ablation.csv").write_text(_csv_text(header, rows))
    _print_table(header, [r for r in rows if r[3] == "average"])
    return EXIT_OK


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfpir", description="Desk-scale all-in-one image restoration.")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        sp.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train a model into a run directory")
    with_config(t)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", action="store_true", help="continue from <out>/latest.dfpc")
    t.add_argument("--stop-at", type=int, help="stop after this step (checkpoint written)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-task PSNR/SSIM on a held-out set")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", help="directory of clean images (default: procedural textures)")
    e.add_argument("--tasks", help="comma-separated task ids (default: all registered)")
    e.add_argument("--per-task", type=int, default=32)
    e.add_argument("--patch", type=int, default=64)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--csv", help="output CSV (default: eval.csv next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="restore one image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--task", required=True)
    i.add_argument("--output", required=True)
    i.set_defaults(func=cmd_infer)

    s = sub.add_parser("inspect", help="dump permutations, masks and feature maps")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--task", help="comma-separated task ids (default: all registered)")
    s.add_argument("--dump-dir", required=True)
    s.add_argument("--verify", action="store_true", help="check the dumped permutations")
    s.add_argument("--data", help="clean image directory for the separation sample set")
    s.add_argument("--samples-per-task", type=int, default=32)
    s.add_argument("--patch", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_inspect)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite in float64")
    with_config(g)
    g.add_argument("--groups", help=f"comma-separated subset of {', '.join(G.GROUPS)}")
    g.add_argument("--h", type=float, default=1e-5)
    g.add_argument("--max-elems", type=int, default=24, help="entries sampled per full-model tensor; 0 checks every entry")
    g.add_argument("--csv", help="per-tensor results CSV")
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="component and gamma ablations")
    with_config(a)
    a.add_argument("--out", required=True)
    a.add_argument("--steps", type=int, help="training steps per variant (default: full schedule)")
    a.add_argument("--components", help="comma-separated subset of none,shuffle,mask,full")
    a.add_argument("--gammas", help="comma-separated gamma grid (default 0.5,0.7,0.8,0.9,1.0)")
    a.add_argument("--eval-per-task", type=int, default=16)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UnknownTaskError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DataError, ImageFormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
