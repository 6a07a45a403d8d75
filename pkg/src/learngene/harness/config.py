"""Flat-section INI run configuration with strict key checking.

Every knob an experiment consumes lives here; unknown sections or keys are
errors so that a typo cannot silently fall back to a default.  Seeds for
stages are derived from the single run seed at execution time.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace

from learngene.condense import CondenseConfig
from learngene.inherit import FinetuneConfig


class ConfigError(ValueError):
    """Malformed run configuration."""


@dataclass(frozen=True)
class DataConfig:
    source: str = "textured-shapes"
    classes: int = 25
    per_class: int = 40
    shape: tuple = (1, 12, 12)
    separation: float = 1.0
    noise: float = 1.0
    path: str = ""

    def validate(self):
        if self.source not in ("gaussian-blobs", "textured-shapes", "image-folder"):
            raise ConfigError(f"unknown data source {self.source!r}")
        if self.source == "image-folder" and not self.path:
            raise ConfigError("image-folder source needs a path")
        if self.classes < 5:
            raise ConfigError("need at least 5 classes for a three-way class split")
        if self.per_class < 4:
            raise ConfigError("need at least 4 examples per class")


@dataclass(frozen=True)
class SplitConfig:
    ancestry: float = 0.64
    condense: float = 0.16
    descendant: float = 0.20
    meta_fraction: float = 1 / 6

    def validate(self):
        for name in ("ancestry", "condense", "descendant"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"split ratio {name} must be positive")
        total = self.ancestry + self.condense + self.descendant
        if abs(total - 1.0) > 1e-6:
            raise ConfigError(
                f"split ratios must sum to 1 (got {total:.4f}); "
                "overlapping or short splits break class disjointness")
        if not 0 < self.meta_fraction < 1:
            raise ConfigError("meta_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class ArchConfig:
    family: str = "tiny-cnn"
    depth: int = 5
    width: int = 6
    constant_width: bool = False
    heads: int = 2
    patch: int = 4

    def validate(self):
        if self.family not in ("tiny-cnn", "tiny-resnet", "tiny-transformer"):
            raise ConfigError(f"unknown family {self.family!r}")
        if self.depth < 1 or self.width < 1:
            raise ConfigError("depth and width must be positive")


@dataclass(frozen=True)
class AncestryTrainConfig:
    epochs: int = 12
    lr: float = 0.05
    weight_decay: float = 0.0
    batch_size: int = 16

    def validate(self):
        if self.epochs < 0 or self.lr < 0 or self.batch_size < 1:
            raise ConfigError("invalid ancestry training settings")


@dataclass(frozen=True)
class EpisodeConfig:
    n_way: int = 5
    k_shot: int = 10
    q_queries: int = 10
    episodes: int = 1

    def validate(self):
        if self.n_way < 2 or self.k_shot < 1 or self.q_queries < 1:
            raise ConfigError("invalid episode settings")
        if self.episodes < 1:
            raise ConfigError("need at least one episode")


@dataclass(frozen=True)
class NoiseConfig:
    ratio: float = 0.0

    def validate(self):
        if not 0 <= self.ratio <= 1:
            raise ConfigError("noise ratio must lie in [0, 1]")


@dataclass(frozen=True)
class RunConfig:
    run_id: str = "run"
    seed: int = 0
    out: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    splits: SplitConfig = field(default_factory=SplitConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    ancestry: AncestryTrainConfig = field(default_factory=AncestryTrainConfig)
    condense: CondenseConfig = field(default_factory=CondenseConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def validate(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if not self.run_id:
            raise ConfigError("run_id must be nonempty")
        for section in (self.data, self.splits, self.arch, self.ancestry,
                        self.episode, self.noise):
            section.validate()
        # CondenseConfig / FinetuneConfig validate in their constructors
        return self


def _parse_shape(text):
    try:
        dims = tuple(int(p) for p in text.lower().split("x"))
    except ValueError as e:
        raise ConfigError(f"bad shape {text!r}: use CxHxW") from e
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ConfigError(f"bad shape {text!r}: use CxHxW")
    return dims


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"bad boolean {text!r}")


_SECTION_TYPES = {
    "run": None,  # handled inline
    "data": DataConfig,
    "splits": SplitConfig,
    "architecture": ArchConfig,
    "ancestry": AncestryTrainConfig,
    "condense": CondenseConfig,
    "finetune": FinetuneConfig,
    "episode": EpisodeConfig,
    "noise": NoiseConfig,
}

_SECTION_ATTR = {
    "data": "data", "splits": "splits", "architecture": "arch",
    "ancestry": "ancestry", "condense": "condense", "finetune": "finetune",
    "episode": "episode", "noise": "noise",
}

_RUN_KEYS = {"run_id": str, "seed": int, "out": str}


def _coerce(value, py_type, key):
    try:
        if py_type is bool:
            return _parse_bool(value)
        if py_type is int:
            return int(value)
        if py_type is float:
            return float(value)
        if py_type is tuple:
            return _parse_shape(value)
        return value
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {value!r}") from e


def _section_kwargs(cls, section_name, items):
    defaults = cls()
    resolved = {f.name: type(getattr(defaults, f.name)) for f in fields(cls)}
    kwargs = {}
    for key, value in items:
        if key not in resolved:
            raise ConfigError(f"unknown key {key!r} in section [{section_name}]")
        kwargs[key] = _coerce(value, resolved[key], f"[{section_name}] {key}")
    return kwargs


def load_config(path):
    """Parse and validate an INI run configuration."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        read = parser.read(path)
    except configparser.Error as e:
        raise ConfigError(f"malformed config file {path}: {e}") from e
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    if parser.defaults():
        raise ConfigError("top-level keys are not allowed; use sections")

    run_kwargs = {}
    section_kwargs = {}
    for section in parser.sections():
        if section not in _SECTION_TYPES:
            raise ConfigError(f"unknown section [{section}]")
        items = parser.items(section)
        if section == "run":
            for key, value in items:
                if key not in _RUN_KEYS:
                    raise ConfigError(f"unknown key {key!r} in section [run]")
                run_kwargs[key] = _coerce(value, _RUN_KEYS[key], f"[run] {key}")
        else:
            cls = _SECTION_TYPES[section]
            section_kwargs[_SECTION_ATTR[section]] = _section_kwargs(
                cls, section, items)

    kwargs = dict(run_kwargs)
    for attr, kw in section_kwargs.items():
        base = getattr(RunConfig(), attr)
        try:
            kwargs[attr] = replace(base, **kw)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"invalid [{attr}] settings: {e}") from e
    try:
        config = RunConfig(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e
    return config.validate()


def save_config(config, path):
    """Write the resolved configuration back out (documents a run)."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {"run_id": config.run_id, "seed": str(config.seed),
                     "out": config.out}
    for section, attr in _SECTION_ATTR.items():
        obj = getattr(config, attr)
        rendered = {}
        for f in fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                rendered[f.name] = "x".join(str(v) for v in value)
            else:
                rendered[f.name] = str(value)
        parser[section] = rendered
    with open(path, "w") as fh:
        parser.write(fh)
