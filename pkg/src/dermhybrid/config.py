"""Run configuration: ``key = value`` lines under ``[section]`` headers.

Lines starting with ``#`` or ``;`` are comments. Unknown sections or keys are
rejected with their line number. Lists and intervals are comma separated.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import AugmentationConfig
from .errors import ConfigError
from .models import ModelConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    data_root: str = "."
    manifest: str = ""
    split_dir: str = ""
    image_size: int = 224


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    base_dir: Path = field(default_factory=Path.cwd)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig, "augment": AugmentationConfig}


def _coerce(raw: str, tp, where: str):
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if origin in (list, tuple):
            (inner, *_) = typing.get_args(tp)
            items = [_coerce(part.strip(), inner, where) for part in raw.split(",") if part.strip()]
            if origin is tuple:
                expected = len(typing.get_args(tp))
                if len(items) != expected:
                    raise ValueError(f"expected {expected} comma-separated values")
                return tuple(items)
            return items
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)} ({exc})") from None
    raise ConfigError(f"{where}: unsupported field type {tp}")


def parse_config(text: str, source: str = "<config>", base_dir: Path | None = None) -> RunConfig:
    values: dict[str, dict[str, object]] = {name: {} for name in SECTIONS}
    hints = {name: typing.get_type_hints(cls) for name, cls in SECTIONS.items()}
    section = None
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        where = f"{source} line {line_no}"
        if not stripped or stripped[0] in "#;":
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {stripped!r}")
            section = stripped[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'key = value', got {stripped!r}")
        if section is None:
            raise ConfigError(f"{where}: key outside of any section")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        fields = {f.name for f in dataclasses.fields(SECTIONS[section])}
        if key not in fields or (section == "model" and key == "image_size"):
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        if key in values[section]:
            raise ConfigError(f"{where}: duplicate key {key!r} in [{section}]")
        values[section][key] = _coerce(raw, hints[section][key], where)

    cfg = RunConfig(
        data=DataConfig(**values["data"]),
        train=TrainConfig(**values["train"]),
        augment=AugmentationConfig(**values["augment"]),
        base_dir=base_dir or Path.cwd(),
    )
    if "output_size" not in values["augment"]:
        cfg.augment.output_size = cfg.data.image_size
    elif cfg.augment.output_size != cfg.data.image_size:
        raise ConfigError(
            f"{source}: [augment] output_size {cfg.augment.output_size} differs from [data] image_size {cfg.data.image_size}"
        )
    cfg.model = ModelConfig(image_size=cfg.data.image_size, **values["model"])
    cfg.model.validate()
    cfg.train.validate()
    cfg.augment.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_config(text, source=str(path), base_dir=path.parent.resolve())
