"""Run configuration: nested dataclasses, INI round-tripping and dotted overrides."""

from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration."""


@dataclass
class DataConfig:
    resolution: int = 64
    source_dir: Optional[str] = None
    target_dir: Optional[str] = None
    synthetic_count: int = 8
    motif: str = "circles_to_squares"
    seed: int = 7


@dataclass
class StyleConfig:
    n: int = 32
    patch_size: int = 8
    embed_dim: int = 128
    token_hidden: int = 256
    channel_hidden: int = 256
    depth: int = 1
    readout: str = "mean"
    sigma_floor: float = 1e-4


@dataclass
class GeneratorConfig:
    depth: int = 3
    base_channels: int = 64
    max_channels: int = 256


@dataclass
class GanConfig:
    base_channels: int = 64
    num_layers: int = 3
    g_mode: str = "non_saturating"


@dataclass
class GlobalConfig:
    lambda_l: float = 1.0
    lambda_r: float = 1.0
    likelihood_mode: str = "nll"
    regularization_mode: str = "standard"


@dataclass
class LocalConfig:
    provider: str = "saliency_stub"
    provider_weights: Optional[str] = None
    extractor: str = "random"
    extractor_weights: Optional[str] = None
    extractor_seed: int = 0
    num_queries: int = 256
    patch_radius: int = 4
    layer_reduction: str = "mean"
    recompute_attention: bool = False


@dataclass
class TrainerConfig:
    lambda_global: float = 1.0
    lambda_local: float = 10.0
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 1
    epochs: int = 20
    max_steps: Optional[int] = None
    seed: int = 0
    use_adain_new: bool = True
    use_global: bool = True
    use_local: bool = True
    running_momentum: float = 0.99
    sample_every: int = 100


@dataclass
class MetricsConfig:
    extractor: str = "random"
    extractor_weights: Optional[str] = None
    seed: int = 0
    k: int = 5
    kid_degree: int = 3


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    style: StyleConfig = field(default_factory=StyleConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    global_: GlobalConfig = field(default_factory=GlobalConfig)
    local: LocalConfig = field(default_factory=LocalConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def validate(self) -> "RunConfig":
        t = self.trainer
        for name in ("lambda_global", "lambda_local"):
            if getattr(t, name) < 0:
                raise ConfigError(f"trainer.{name} must be >= 0")
        if self.global_.lambda_l < 0 or self.global_.lambda_r < 0:
            raise ConfigError("global.lambda_l and global.lambda_r must be >= 0")
        if self.style.n < 1:
            raise ConfigError("style.n must be >= 1")
        if t.batch_size < 1:
            raise ConfigError("trainer.batch_size must be >= 1")
        res = self.data.resolution
        if res % self.style.patch_size:
            raise ConfigError(
                f"data.resolution {res} not divisible by style.patch_size {self.style.patch_size}"
            )
        if res % (2 ** self.generator.depth):
            raise ConfigError(
                f"data.resolution {res} not divisible by 2**generator.depth"
            )
        if self.style.readout not in ("mean", "class"):
            raise ConfigError(f"unknown style.readout {self.style.readout!r}")
        if self.gan.g_mode not in ("saturating", "non_saturating"):
            raise ConfigError(f"unknown gan.g_mode {self.gan.g_mode!r}")
        if self.global_.likelihood_mode not in ("paper_literal", "nll"):
            raise ConfigError(f"unknown global.likelihood_mode {self.global_.likelihood_mode!r}")
        if self.global_.regularization_mode not in ("paper_literal", "standard"):
            raise ConfigError(
                f"unknown global.regularization_mode {self.global_.regularization_mode!r}"
            )
        if self.local.layer_reduction not in ("mean", "sum"):
            raise ConfigError(f"unknown local.layer_reduction {self.local.layer_reduction!r}")
        return self


# "global" is a keyword, so the attribute carries a trailing underscore.
_SECTION_ATTR = {
    "data": "data",
    "style": "style",
    "generator": "generator",
    "gan": "gan",
    "global": "global_",
    "local": "local",
    "trainer": "trainer",
    "metrics": "metrics",
}


def _field_type(section_obj: Any, key: str) -> Any:
    hints = typing.get_type_hints(type(section_obj))
    return hints[key]


def _parse_value(raw: str, tp: Any, where: str) -> Any:
    raw = raw.strip()
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.lower() in ("", "none", "null"):
            return None
        tp = args[0]
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None


def set_value(cfg: RunConfig, dotted: str, raw: str) -> None:
    """Apply one ``section.key=value`` style assignment, rejecting unknown keys."""
    if "." not in dotted:
        raise ConfigError(f"override key {dotted!r} must look like section.key")
    section, key = dotted.split(".", 1)
    if section not in _SECTION_ATTR:
        raise ConfigError(f"unknown config section {section!r}")
    obj = getattr(cfg, _SECTION_ATTR[section])
    if key not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {dotted!r}")
    setattr(obj, key, _parse_value(raw, _field_type(obj, key), dotted))


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must be key=value")
        key, value = item.split("=", 1)
        set_value(cfg, key.strip(), value)
    return cfg


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep key case
        if not parser.read(path):
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            for key, value in parser.items(section):
                set_value(cfg, f"{section}.{key}", value)
    apply_overrides(cfg, overrides or [])
    return cfg.validate()


def to_dict(cfg: RunConfig) -> dict[str, dict[str, Any]]:
    return {name: dataclasses.asdict(getattr(cfg, attr)) for name, attr in _SECTION_ATTR.items()}


def from_dict(d: dict[str, dict[str, Any]]) -> RunConfig:
    cfg = RunConfig()
    for section, values in d.items():
        obj = getattr(cfg, _SECTION_ATTR[section])
        for key, value in values.items():
            setattr(obj, key, value)
    return cfg.validate()


def dumps(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, values in to_dict(cfg).items():
        parser[section] = {k: ("none" if v is None else str(v)) for k, v in values.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))
