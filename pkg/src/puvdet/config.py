"""Declarative run configuration: one YAML file drives the whole pipeline.

Absent keys fall back to the published protocol defaults (30% labeling,
k = 30% of positives, t_ratio 0.3, five progressive epochs, batch 32).
Unknown keys are rejected by name so typos never silently change a run.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .encoder import TrainConfig
from .errors import ConfigError, ValidationError
from .losses import MrlConfig
from .selection import ProgressiveConfig, PrototypeConfig


@dataclass(frozen=True)
class EmbeddingSourceConfig:
    source: str = "hash"        # "hash" builds vectors; "file" imports them
    path: str | None = None
    dim: int = 256
    ngram: int = 2
    normalize: bool = True

    def __post_init__(self):
        if self.source not in ("hash", "file"):
            raise ValidationError(f"embedding source must be hash or file, got {self.source!r}")
        if self.source == "file" and not self.path:
            raise ValidationError("embedding source 'file' needs a path")


@dataclass(frozen=True)
class ScarSettings:
    label_frequency: float = 0.3
    mode: str = "exact"

    def __post_init__(self):
        if not 0.0 <= self.label_frequency <= 1.0:
            raise ValidationError(
                f"label_frequency must be in [0,1], got {self.label_frequency}"
            )
        if self.mode not in ("exact", "bernoulli"):
            raise ValidationError(f"unknown scar mode {self.mode!r}")


@dataclass(frozen=True)
class EncoderSettings:
    hidden: int = 256
    proj_dim: int = 64

    def __post_init__(self):
        if self.hidden < 1 or self.proj_dim < 1:
            raise ValidationError("hidden and proj_dim must be positive")


@dataclass(frozen=True)
class EvalSettings:
    n_repeats: int = 3
    validation: str = "pseudo"   # "pseudo": agreement with anchor pseudo-labels
    mrl_stage: bool = True

    def __post_init__(self):
        if self.n_repeats < 1:
            raise ValidationError("n_repeats must be >= 1")
        if self.validation not in ("pseudo", "truth"):
            raise ValidationError(f"validation must be pseudo or truth, got {self.validation!r}")


@dataclass(frozen=True)
class SweepSettings:
    parameter: str = "ratio"     # ratio | k | t_ratio
    values: tuple = (0.1, 0.3, 0.5, 0.7, 1.0)

    def __post_init__(self):
        if self.parameter not in ("ratio", "k", "t_ratio"):
            raise ValidationError(f"sweep parameter must be ratio, k or t_ratio, got {self.parameter!r}")
        if not self.values:
            raise ValidationError("sweep needs at least one value")
        object.__setattr__(self, "values", tuple(self.values))


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "corpus.jsonl"
    output_dir: str = "run"
    split_seed: int = 7
    seeds: tuple = (1, 2, 3)
    embedding: EmbeddingSourceConfig = field(default_factory=EmbeddingSourceConfig)
    scar: ScarSettings = field(default_factory=ScarSettings)
    selection: PrototypeConfig = field(default_factory=PrototypeConfig)
    progressive: ProgressiveConfig = field(default_factory=ProgressiveConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    mrl: MrlConfig = field(default_factory=MrlConfig)
    evaluation: EvalSettings = field(default_factory=EvalSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)

    def __post_init__(self):
        if not self.seeds:
            raise ValidationError("at least one seed is required")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


_SECTIONS = {
    "embedding": EmbeddingSourceConfig,
    "scar": ScarSettings,
    "selection": PrototypeConfig,
    "progressive": ProgressiveConfig,
    "train": TrainConfig,
    "encoder": EncoderSettings,
    "mrl": MrlConfig,
    "evaluation": EvalSettings,
    "sweep": SweepSettings,
}

_TOP_KEYS = {"dataset", "output_dir", "split_seed", "seeds"} | set(_SECTIONS)

# config key -> dataclass field, where the YAML name differs
_ALIASES = {
    "progressive": {"max_epochs": "max_progressive_epochs"},
}


def _section_from(name: str, cls, mapping) -> object:
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    aliases = _ALIASES.get(name, {})
    reverse = {v: k for k, v in aliases.items()}
    allowed = {reverse.get(f.name, f.name) for f in fields(cls)}
    kwargs = {}
    for key, value in mapping.items():
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in section {name!r}")
        kwargs[aliases.get(key, key)] = value
    try:
        return cls(**kwargs)
    except (ValidationError, TypeError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


def config_from_mapping(mapping) -> RunConfig:
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError("run config must be a mapping")
    for key in mapping:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown key {key!r} in run config")
    kwargs = {}
    for key in ("dataset", "output_dir", "split_seed", "seeds"):
        if key in mapping:
            kwargs[key] = mapping[key]
    for name, cls in _SECTIONS.items():
        if name in mapping:
            kwargs[name] = _section_from(name, cls, mapping[name])
    try:
        return RunConfig(**kwargs)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            mapping = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return config_from_mapping(mapping)


def config_to_mapping(cfg: RunConfig) -> dict:
    out = {
        "dataset": cfg.dataset,
        "output_dir": cfg.output_dir,
        "split_seed": cfg.split_seed,
        "seeds": list(cfg.seeds),
    }
    for name in _SECTIONS:
        section = asdict(getattr(cfg, name))
        aliases = _ALIASES.get(name, {})
        reverse = {v: k for k, v in aliases.items()}
        out[name] = {reverse.get(k, k): (list(v) if isinstance(v, tuple) else v)
                     for k, v in section.items()}
    return out


def serialize_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_mapping(cfg), sort_keys=True)


def write_config(path, cfg: RunConfig) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(serialize_config(cfg), encoding="utf-8")
