"""Run configuration: one YAML file, strictly parsed.

Unknown keys are rejected with their line number, so a typo never silently
falls back to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .model import ModelConfig
from .synthgen import GenConfig
from .training import TrainConfig

CONFIG_VERSION = "1"


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = ""
        if key is not None:
            where += f" key '{key}'"
        if line is not None:
            where += f" (line {line})"
        super().__init__(f"{message}{':' if where else ''}{where}")
        self.key, self.line = key, line


@dataclass
class EvalConfig:
    protocol: str = "intra"
    held_out: str | None = None
    repeats: int = 3
    train_fraction: float = 0.7
    split_seed: int = 0


@dataclass
class ExportConfig:
    clip_id: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_json(self) -> dict:
        return {
            "format_version": CONFIG_VERSION,
            "seed": self.seed,
            "out": self.out,
            "gen": self.gen.to_json(),
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
            "eval": dataclasses.asdict(self.eval),
        }


SECTIONS = {"gen": GenConfig, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}
# section fields that inherit the top-level seed unless set explicitly
SEED_FIELDS = {"gen": "seed", "train": "seed", "eval": "split_seed"}


def _lines(node: yaml.MappingNode) -> dict[str, int]:
    return {k.value: k.start_mark.line + 1 for k, _ in node.value}


def _build(cls, data: dict, lines: dict[str, int], section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key in [{section}]", f"{section}.{key}", lines.get(key))
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in [{section}]: {exc}", section, None) from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"{source}: YAML syntax error", None, mark.line + 1 if mark else None) from None
    if data is None:
        return RunConfig()
    if not isinstance(data, dict) or not isinstance(root, yaml.MappingNode):
        raise ConfigError(f"{source}: top level must be a mapping")
    top_lines = _lines(root)
    version = str(data.pop("format_version", CONFIG_VERSION))
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config format_version {version!r}", "format_version",
                          top_lines.get("format_version"))
    kwargs: dict[str, Any] = {}
    nodes = {k.value: v for k, v in root.value}
    for key, value in data.items():
        if key in SECTIONS:
            if value is None:
                value = {}
            if not isinstance(value, dict):
                raise ConfigError("section must be a mapping", key, top_lines.get(key))
            kwargs[key] = _build(SECTIONS[key], value, _lines(nodes[key]) if value else {}, key)
        elif key in ("seed", "out"):
            kwargs[key] = value
        else:
            raise ConfigError("unknown top-level key", key, top_lines.get(key))
    cfg = RunConfig(**kwargs)
    if "seed" in data:
        if not isinstance(cfg.seed, int):
            raise ConfigError("seed must be an integer", "seed", top_lines.get("seed"))
        for section, name in SEED_FIELDS.items():
            if name not in (data.get(section) or {}):
                setattr(getattr(cfg, section), name, cfg.seed)
    return cfg


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Override the master seed and every section seed."""
    cfg.seed = seed
    for section, name in SEED_FIELDS.items():
        setattr(getattr(cfg, section), name, seed)
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, str(p))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_json(), sort_keys=False)
