"""Run configuration as INI files: one section per component config.

[encoder], [train], [loss], [propagation] and [synth] map onto the dataclass
fields of the same names. Missing sections or keys keep their defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .correspondence import LossWeights
from .encoder import EncoderConfig
from .errors import ConfigError
from .propagation import PropagationConfig
from .synth import SynthConfig
from .trainer import TrainConfig

SECTIONS = {
    "encoder": EncoderConfig,
    "train": TrainConfig,
    "loss": LossWeights,
    "propagation": PropagationConfig,
    "synth": SynthConfig,
}


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    propagation: PropagationConfig = field(default_factory=PropagationConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    @classmethod
    def desk(cls) -> "RunConfig":
        """64x64 synthetic-data preset; the stride-4 stage keeps a 16x16 embedding grid."""
        return cls(encoder=EncoderConfig(embed_stage=1), train=TrainConfig.desk())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, default, section: str, key: str):
    try:
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[text.strip().lower()]
        if isinstance(default, list):
            return [int(v) for v in text.split(",") if v.strip()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"[{section}] {key} = {text!r}: expected {type(default).__name__}") from exc
    return text


def to_ini(cfg: RunConfig) -> str:
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        lines += [f"{k} = {_format(v)}" for k, v in dataclasses.asdict(getattr(cfg, name)).items()]
        lines.append("")
    return "\n".join(lines)


def from_ini(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    base = base or RunConfig.desk()
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    parts = {}
    for name, cls in SECTIONS.items():
        current = dataclasses.asdict(getattr(base, name))
        if parser.has_section(name):
            for key, text in parser[name].items():
                if key not in current:
                    raise ConfigError(f"unknown key {key!r} in [{name}]")
                current[key] = _parse(text, current[key], name, key)
        parts[name] = cls(**current)
    return RunConfig(**parts)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return from_ini(path.read_text())


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(to_ini(cfg))
