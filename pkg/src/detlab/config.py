"""INI experiment configuration: typed parsing, unknown-key rejection,
default dumping, and run manifests."""

from __future__ import annotations

import configparser
import io
import json
import time
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

from .detsim import DatasetConfig
from .trainer import TrainConfig

MANIFEST_FORMAT = "detlab-manifest"
MANIFEST_VERSION = 1


class ConfigError(ValueError):
    """Malformed or unknown configuration content."""


@dataclass
class EvalConfig:
    score_threshold: float = 0.05
    nms_iou: float = 0.5


@dataclass
class RunConfig:
    """Fully resolved experiment configuration."""

    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    pretrain_iterations: int = 2000


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_optional_float(raw: str) -> float | None:
    return None if raw.strip() == "" else float(raw)


def _parse_pairs(raw: str) -> list[tuple[int, int, float]]:
    """Comma-separated a:b:angle triplets, e.g. '0:12:15, 1:13:15'."""
    pairs: list[tuple[int, int, float]] = []
    raw = raw.strip()
    if not raw:
        return pairs
    for chunk in raw.split(","):
        parts = chunk.strip().split(":")
        if len(parts) != 3:
            raise ValueError(f"expected class:class:angle, got {chunk.strip()!r}")
        pairs.append((int(parts[0]), int(parts[1]), float(parts[2])))
    return pairs


def _format_pairs(pairs: list[tuple[int, int, float]]) -> str:
    return ", ".join(f"{a}:{b}:{angle:g}" for a, b, angle in pairs)


# section -> key -> (parser, formatter); the dataclass field name matches the key
_DATASET_KEYS = {
    "num_base": (int, str),
    "num_novel": (int, str),
    "embed_dim": (int, str),
    "confusable_pairs": (_parse_pairs, _format_pairs),
    "noise_sigma": (float, repr),
    "mix_max": (float, repr),
    "proposals_per_gt": (int, str),
    "background_per_scene": (int, str),
    "fg_iou_threshold": (float, repr),
    "base_train_scenes": (int, str),
    "pool_scenes_per_class": (int, str),
    "test_scenes_per_class": (int, str),
    "seed": (int, str),
}

_TRAIN_KEYS = {
    "lr": (float, repr),
    "momentum": (float, repr),
    "weight_decay": (float, repr),
    "batch_scenes": (int, str),
    "pretrain_iterations": (int, str),       # mapped to RunConfig.pretrain_iterations
    "finetune_iterations": (int, str),       # mapped to TrainConfig.total_iterations
    "kshot": (int, str),
    "balance": (float, repr),
    "temperature": (float, repr),
    "iou_floor": (float, repr),
    "group_iou_threshold": (float, repr),
    "rep_threshold": (int, str),
    "milestone": (float, repr),
    "mine_start_fraction": (_parse_optional_float, lambda v: "" if v is None else repr(v)),
    "group_refresh": (_parse_bool, lambda v: str(v).lower()),
    "contrastive_mode": (str.strip, str),
    "include_background": (_parse_bool, lambda v: str(v).lower()),
    "hidden_dim": (int, str),
    "con_dim": (int, str),
    "seed": (int, str),
}

_EVAL_KEYS = {
    "score_threshold": (float, repr),
    "nms_iou": (float, repr),
}

_SECTIONS = {"dataset": _DATASET_KEYS, "train": _TRAIN_KEYS, "eval": _EVAL_KEYS}


def parse_config(path: str | Path) -> RunConfig:
    """Read an INI config; reject unknown sections and keys."""
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep keys case-sensitive
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, dict[str, object]] = {"dataset": {}, "train": {}, "eval": {}}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(
                f"unknown section [{section}]; expected one of {sorted(_SECTIONS)}"
            )
        keys = _SECTIONS[section]
        for key, raw in parser.items(section):
            if key not in keys:
                raise ConfigError(
                    f"unknown key '{key}' in section [{section}]; "
                    f"valid keys: {sorted(keys)}"
                )
            parse_fn = keys[key][0]
            try:
                values[section][key] = parse_fn(raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
    try:
        dataset = DatasetConfig(**values["dataset"])
    except ValueError as exc:
        raise ConfigError(f"[dataset] {exc}") from exc
    train_kwargs = dict(values["train"])
    pretrain_iterations = train_kwargs.pop("pretrain_iterations", RunConfig().pretrain_iterations)
    finetune = train_kwargs.pop("finetune_iterations", None)
    if finetune is not None:
        train_kwargs["total_iterations"] = finetune
    try:
        train = TrainConfig(**train_kwargs)
    except ValueError as exc:
        raise ConfigError(f"[train] {exc}") from exc
    return RunConfig(
        dataset=dataset,
        train=train,
        eval=EvalConfig(**values["eval"]),
        pretrain_iterations=pretrain_iterations,
    )


def format_config(config: RunConfig | None = None) -> str:
    """Render a RunConfig (defaults when omitted) back to INI text."""
    config = config if config is not None else RunConfig()
    parser = configparser.ConfigParser()
    parser.optionxform = str
    sources = {
        "dataset": asdict(config.dataset),
        "train": {
            **asdict(config.train),
            "pretrain_iterations": config.pretrain_iterations,
            "finetune_iterations": config.train.total_iterations,
        },
        "eval": asdict(config.eval),
    }
    sources["train"].pop("total_iterations")
    for section, keys in _SECTIONS.items():
        parser[section] = {}
        for key, (_, fmt) in keys.items():
            parser[section][key] = fmt(sources[section][key])
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def resolved_config_dict(config: RunConfig) -> dict:
    """JSON-ready dump of every resolved field (nothing left implicit)."""
    return {
        "dataset": asdict(config.dataset),
        "train": asdict(config.train),
        "eval": asdict(config.eval),
        "pretrain_iterations": config.pretrain_iterations,
    }


def with_seed(config: RunConfig, seed: int | None) -> RunConfig:
    """Override the training seed (CLI --seed flag)."""
    if seed is None:
        return config
    return replace(config, train=replace(config.train, seed=seed))


def write_manifest(
    path: str | Path,
    command: str,
    config: RunConfig,
    artifacts: dict[str, str],
    extra: dict | None = None,
) -> None:
    payload = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "command": command,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "seed": config.train.seed,
        "config": resolved_config_dict(config),
        "artifacts": artifacts,
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
