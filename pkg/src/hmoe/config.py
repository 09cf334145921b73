"""Line-oriented experiment config files: sections of ``key = value`` pairs.

Unknown sections or keys are hard errors carrying the line number; types
come from the dataclass field they fill.  ``emit_config`` produces the
canonical text form, and parse(emit(cfg)) round-trips exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

from .errors import ConfigurationError
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class RunConfig:
    corpus: str = ""
    steps: int = -1
    out_dir: str = "runs/hmoe"
    export_telemetry: bool = True


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self, check_paths: bool = True) -> None:
        self.model.validate()
        if not self.run.corpus:
            raise ConfigurationError("config must set 'corpus' in section [run]")
        if self.run.steps < 0:
            raise ConfigurationError("config must set 'steps' (>= 0) in section [run]")
        if check_paths and not os.path.exists(self.run.corpus):
            raise ConfigurationError(f"corpus path does not exist: {self.run.corpus!r}")


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "run": RunConfig}


def _parse_value(raw: str, target_type, key: str, lineno: int):
    raw = raw.strip()
    if raw.startswith(('"', "'")) and raw.endswith(raw[0]) and len(raw) >= 2:
        raw = raw[1:-1]
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if target_type is str:
            return raw
        # The only structured field type: optional list of ints.
        if raw.lower() in ("", "none"):
            return None
        return [int(part) for part in raw.split(",")]
    except ValueError:
        raise ConfigurationError(
            f"line {lineno}: cannot parse value {raw!r} for key {key!r} as {getattr(target_type, '__name__', target_type)}"
        ) from None


_FIELD_TYPES = {
    name: {
        f.name: (int if f.type == "int" else float if f.type == "float" else bool if f.type == "bool" else str if f.type == "str" else list)
        for f in fields(cls)
    }
    for name, cls in _SECTIONS.items()
}


def parse_config_text(text: str, *, check_paths: bool = True) -> ExperimentConfig:
    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    section: str | None = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigurationError(
                    f"line {lineno}: unknown section [{section}]; expected one of {sorted(_SECTIONS)}"
                )
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw_line!r}")
        if section is None:
            raise ConfigurationError(f"line {lineno}: key outside any [section]")
        key, _, raw_value = line.partition("=")
        key = key.strip()
        type_map = _FIELD_TYPES[section]
        if key not in type_map:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r} in section [{section}]")
        values[section][key] = _parse_value(raw_value, type_map[key], key, lineno)

    try:
        cfg = ExperimentConfig(
            model=ModelConfig(**values["model"]),
            train=TrainConfig(**values["train"]),
            run=RunConfig(**values["run"]),
        )
    except ConfigurationError as exc:
        raise ConfigurationError(f"invalid configuration: {exc}") from exc
    cfg.validate(check_paths=check_paths)
    return cfg


def parse_config(path: str, *, check_paths: bool = True) -> ExperimentConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path!r}: {exc}") from exc
    return parse_config_text(text, check_paths=check_paths)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return str(value)


def emit_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; re-parsing it reproduces ``cfg`` exactly."""
    lines: list[str] = []
    for section, obj in (("model", cfg.model), ("train", cfg.train), ("run", cfg.run)):
        lines.append(f"[{section}]")
        for f in fields(obj):
            value = getattr(obj, f.name)
            if value is None:
                continue
            lines.append(f"{f.name} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)


def config_as_dict(cfg: ExperimentConfig) -> dict:
    return {
        "model": cfg.model.to_dict(),
        "train": cfg.train.to_dict(),
        "run": {f.name: getattr(cfg.run, f.name) for f in fields(cfg.run)},
    }
