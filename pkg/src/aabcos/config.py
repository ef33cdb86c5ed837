"""Plain-text ``key=value`` run configuration merging every component's settings."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .layers import ModelConfig
from .metrics import EpgConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Malformed configuration; the message names the offending key or line."""


@dataclass
class DataConfig:
    n: int = 400
    size: int = 32
    classes: int = 2
    prevalence: float = 0.3
    multiclass: bool = True
    seed: int = 0
    folds: int = 5
    fold: int = 0
    oversample: bool = False


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    epg: EpgConfig = field(default_factory=EpgConfig)
    data: DataConfig = field(default_factory=DataConfig)

    SECTIONS = ("model", "train", "augment", "epg", "data")

    def to_text(self) -> str:
        lines = []
        for section in self.SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                lines.append(f"{section}.{f.name}={_render(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())


def _render(value) -> str:
    if hasattr(value, "value"):  # enums
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(text: str, default):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        item = default[0] if default else 0.0
        return tuple(_coerce(t.strip(), item) for t in text.split(",") if t.strip())
    return text


def parse_config(text: str, source: str = "<config>", base: RunConfig | None = None) -> RunConfig:
    """Parse ``section.key=value`` lines on top of ``base`` (defaults if omitted).

    Blank lines and ``#`` comments are ignored; unknown keys are rejected.
    """
    base = base or RunConfig()
    updates: dict[str, dict] = {s: {} for s in RunConfig.SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, _, value = (p.strip() for p in line.partition("="))
        section, _, name = key.partition(".")
        if section not in updates:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        obj = getattr(base, section)
        names = {f.name for f in dataclasses.fields(obj)}
        if name not in names:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            updates[section][name] = _coerce(value, getattr(obj, name))
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    sections = {}
    for section in RunConfig.SECTIONS:
        obj = getattr(base, section)
        try:
            sections[section] = dataclasses.replace(obj, **updates[section])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}: invalid {section} settings: {exc}") from None
    return RunConfig(**sections)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text(), str(path))


def desk_config() -> RunConfig:
    """Settings of the desk-scale synthetic experiment (from-scratch training).

    The ``TrainConfig`` defaults (lr 1e-5) target fine-tuning of pretrained
    backbones; a randomly initialised tiny network needs a larger step and a
    fixed logit scale so softmax outputs can saturate.
    """
    return parse_config("\n".join([
        "model.logit_scale=30.0",
        "train.lr=0.001",
        "train.epochs=30",
        "train.seed=0",
        "data.n=400",
        "data.size=32",
        "data.classes=2",
        "data.multiclass=true",
        "data.prevalence=0.3",
    ]), "<desk>")
