"""Experiment configuration, named profiles and ``key=value`` overrides."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .dataset import DatasetConfig
from .encoder import ModelConfig
from .errors import ConfigError
from .local_training import TrainConfig

METHODS = ("plan", "avg_baseline")
ABLATIONS = ("disable_kl", "disable_zsi", "avg_text_agg", "avg_vis_agg")


@dataclass(frozen=True)
class Ablations:
    disable_kl: bool = False
    disable_zsi: bool = False
    avg_text_agg: bool = False
    avg_vis_agg: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetConfig = field(default_factory=DatasetConfig)
    rounds: int = 20
    held_out: int = 0
    method: str = "plan"
    ablations: Ablations = field(default_factory=Ablations)
    seed: int = 0
    backbone_seed: int = 0
    agg_ratio: float = 0.125
    prompt_init_std: float = 0.02
    warmup_check: bool = True
    dump_features: bool = False

    @property
    def n_clients(self) -> int:
        return self.data.n_domains - 1

    def problems(self) -> list[str]:
        out = [f"data.{p}" for p in self.data.problems()]
        if self.rounds < 1:
            out.append("rounds: must be >= 1")
        if not 0 <= self.held_out < self.data.n_domains:
            out.append(f"held_out: must index one of the {self.data.n_domains} domains")
        if self.method not in METHODS:
            out.append(f"method: must be one of {METHODS}, got {self.method!r}")
        if not 0 < self.agg_ratio <= 1:
            out.append("agg_ratio: must lie in (0, 1]")
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        raw = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(raw).hexdigest()[:12]


PROFILES: dict[str, dict[str, Any]] = {
    # Full-size settings (ViT-B/16-sized prompts, 12 blocks).  Not runnable at desk scale.
    "full": {
        "model": {"depth": 12, "d_text": 512, "d_vis": 768, "d_proj": 512, "n_heads": 8,
                  "m_text": 8, "m_vis": 8, "n_classes": 7, "image_size": 224, "patch_size": 16},
        "train": {"alpha": 1.0, "lr": 0.0015, "batch_size": 32, "local_epochs": 1},
        "rounds": 20,
    },
    # Desk-scale default used by the acceptance suite.
    "toy": {
        "model": {"init_std": 0.1},
        "train": {"alpha": 1.0, "lr": 0.02, "agg_lr": 0.02, "batch_size": 32, "local_epochs": 1},
        "data": {"warmup_domains": 24, "warmup_samples_per_class": 20, "warmup_steps": 500,
                 "warmup_lr": 1e-3},
        "rounds": 10,
    },
    # Seconds-scale smoke profile for unit tests.
    "tiny": {
        "model": {"depth": 2, "d_text": 8, "d_vis": 12, "d_proj": 8, "n_heads": 2, "m_text": 2,
                  "m_vis": 2, "n_classes": 3, "image_size": 8, "patch_size": 4, "init_std": 0.1},
        "train": {"alpha": 1.0, "lr": 0.05, "batch_size": 16, "local_epochs": 1},
        "data": {"n_domains": 3, "samples_per_class": 10, "warmup_steps": 0},
        "rounds": 2,
        "warmup_check": False,
    },
}
PROFILES["plan_toy"] = PROFILES["toy"]

_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DatasetConfig, "ablations": Ablations}


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else copy.deepcopy(v)
    return out


def _set_dotted(tree: dict, key: str, value) -> None:
    parts = key.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key}: {p} is not a section")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def build_config(tree: dict) -> ExperimentConfig:
    """Build and validate; every problem is reported with its dotted field name."""
    problems: list[str] = []
    kwargs: dict[str, Any] = {}
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key, value in tree.items():
        if key == "profile":
            continue
        if key not in known:
            problems.append(f"{key}: unknown field")
            continue
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            if not isinstance(value, dict):
                problems.append(f"{key}: expected a mapping")
                continue
            names = {f.name for f in dataclasses.fields(cls)}
            for sub in value:
                if sub not in names:
                    problems.append(f"{key}.{sub}: unknown field")
            try:
                kwargs[key] = cls(**{k: v for k, v in value.items() if k in names})
            except (ConfigError, TypeError) as exc:
                problems.append(f"{key}: {exc}")
        else:
            kwargs[key] = value
    if problems:
        raise ConfigError("; ".join(problems))
    try:
        cfg = ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    problems = cfg.problems()
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def load_config(source: str | None = None, overrides: list[str] | None = None, **fields) -> ExperimentConfig:
    """``source`` is a profile name or a YAML/JSON path (which may name a ``profile``)."""
    tree: dict = {}
    if source:
        if source in PROFILES:
            tree = _merge({}, PROFILES[source])
        else:
            path = Path(source)
            if not path.exists():
                raise ConfigError(f"config: no profile or file named {source!r}")
            try:
                loaded = yaml.safe_load(path.read_text()) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"config: cannot parse {source}: {exc}") from exc
            if not isinstance(loaded, dict):
                raise ConfigError("config: top level must be a mapping")
            base = PROFILES.get(loaded.get("profile", ""), {})
            tree = _merge(_merge({}, base), loaded)
    for key, value in fields.items():
        _set_dotted(tree, key, value)
    for item in overrides or []:
        key, value = parse_override(item)
        _set_dotted(tree, key, value)
    return build_config(tree)


def config_from_dict(d: dict) -> ExperimentConfig:
    return build_config(d)
