"""Run configuration: a JSON file of documented sections plus ``--set key=value`` overrides.

Keys (defaults in brackets)::

    seed                      [0]      seeds model init, prompt table and data streams
    model.channels            [16]     level-1 width C
    model.blocks              [[1,1,1,2]]
    model.heads               [[1,1,1,1]]
    model.ffn_expansion       [2.0]
    model.prompt_dim          [64]
    model.tasks               [["noise25","derain","dehaze"]]  task registry
    model.components          ["full"]  none | shuffle | mask | full
    model.identity_init       [false]  zero the output conv so the model starts as the identity
    dgpb.gamma                [0.9]
    dgpb.mask_axis            ["row"]   row | column
    dgpb.mask_mode            ["multiply"]  multiply | additive
    dgcpm.score_modulation    [false]
    prompts.source            ["seeded"]  or a path to a prompt embedding file
    data.tasks                [null]   tasks to train on; null = model.tasks
    data.patch                [64]
    data.source               [null]   image directory; null = procedural textures
    data.samples_per_epoch    [400]
    train.*                   see :class:`dfpir.train.TrainConfig`
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

from .data import DatasetSpec
from .model import DFPIR, ModelConfig
from .prompts import PromptTable, TaskRegistry
from .train import TrainConfig


class ConfigError(ValueError):
    pass


DESK_TASKS = ["noise25", "derain", "dehaze"]


def default_config() -> dict:
    return {
        "seed": 0,
        "model": {"channels": 16, "blocks": [1, 1, 1, 2], "heads": [1, 1, 1, 1], "ffn_expansion": 2.0,
                  "prompt_dim": 64, "tasks": list(DESK_TASKS), "components": "full",
                  "identity_init": False},
        "dgpb": {"gamma": 0.9, "mask_axis": "row", "mask_mode": "multiply"},
        "dgcpm": {"score_modulation": False},
        "prompts": {"source": "seeded"},
        "data": {"tasks": None, "patch": 64, "source": None, "samples_per_epoch": 400},
        "train": asdict(TrainConfig()),
    }


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a section")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def set_key(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for i, p in enumerate(parts):
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key {'.'.join(parts[:i + 1])!r}")
        if i == len(parts) - 1:
            if isinstance(node[p], dict):
                raise ConfigError(f"config key {dotted!r} is a section")
            node[p] = value
        else:
            node = node[p]


def load_config(path=None, overrides=(), seed: int | None = None, epochs: int | None = None) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _merge(cfg, user)
    for item in overrides:
        set_key(cfg, *parse_override(item))
    if seed is not None:
        cfg["seed"] = seed
    if epochs is not None:
        cfg["train"]["epochs"] = epochs
    validate(cfg)
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(channels=m["channels"], blocks=tuple(m["blocks"]), heads=tuple(m["heads"]),
                       ffn_expansion=m["ffn_expansion"], prompt_dim=m["prompt_dim"],
                       gamma=cfg["dgpb"]["gamma"], mask_axis=cfg["dgpb"]["mask_axis"],
                       mask_mode=cfg["dgpb"]["mask_mode"],
                       score_modulation=cfg["dgcpm"]["score_modulation"],
                       components=m["components"], tasks=tuple(m["tasks"]),
                       identity_init=m["identity_init"], seed=cfg["seed"])


def dataset_spec(cfg: dict) -> DatasetSpec:
    d = cfg["data"]
    tasks = d["tasks"] if d["tasks"] is not None else cfg["model"]["tasks"]
    return DatasetSpec(tasks=tuple(tasks), patch=d["patch"], source=d["source"],
                       samples_per_epoch=d["samples_per_epoch"], seed=cfg["seed"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"])


def validate(cfg: dict) -> None:
    """Type-check every section by building it; raise ConfigError on any problem."""
    try:
        mc = model_config(cfg)
        d = cfg["data"]
        tasks = d["tasks"] if d["tasks"] is not None else mc.tasks
        missing = [t for t in tasks if t not in mc.tasks]
        if missing:
            raise ConfigError(f"data.tasks {missing} are not in model.tasks {list(mc.tasks)}")
        DatasetSpec(tasks=tuple(tasks), patch=d["patch"], source=None,
                    samples_per_epoch=d["samples_per_epoch"], seed=cfg["seed"])
        train_config(cfg)
        if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def build_prompts(cfg: dict, registry: TaskRegistry) -> PromptTable:
    source = cfg["prompts"]["source"]
    if source == "seeded":
        return PromptTable.seeded(registry, cfg["model"]["prompt_dim"], cfg["seed"])
    try:
        return PromptTable.from_file(source, registry)
    except OSError as exc:
        raise ConfigError(f"cannot read prompt file {source}: {exc}") from exc
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def build_model(cfg: dict) -> DFPIR:
    mc = model_config(cfg)
    try:
        return DFPIR(mc, build_prompts(cfg, TaskRegistry(mc.tasks)))
    except RuntimeError as exc:  # e.g. identical prompt vectors give identical permutations
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
