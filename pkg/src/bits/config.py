"""Flat ``key = value`` run configuration.

One key per line, ``#`` starts a comment, no sections. Every training,
model and augmentation field is a top-level key; tuple fields take
comma-separated values. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import AugmentPolicy
from .model import ModelConfig
from .trainer import TrainConfig

PATH_KEYS = {
    "dataset": None,
    "out_dir": "runs/default",
    "checkpoint": None,
    "eval_dataset": None,
}
OWNERS = (("train", TrainConfig), ("model", ModelConfig), ("augment", AugmentPolicy))


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=lambda: dict(PATH_KEYS))

    def echo(self) -> str:
        """Effective configuration in the input format, every key present."""
        lines = ["# paths"]
        lines += [f"{k} = {_fmt(v)}" for k, v in self.paths.items()]
        for group, obj in (("train", self.train), ("model", self.train.model), ("augment", self.train.augment)):
            lines.append(f"# {group}")
            for f in dataclasses.fields(obj):
                if f.name in ("model", "augment"):
                    continue
                lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def write_echo(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "config.echo"
        path.write_text(self.echo(), encoding="utf-8")
        return path


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def _key_table() -> dict[str, tuple[str, dataclasses.Field]]:
    table = {}
    for owner, cls in OWNERS:
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            if f.name in ("model", "augment"):
                continue
            if f.name in table or f.name in PATH_KEYS:
                raise AssertionError(f"config key {f.name} is ambiguous")
            table[f.name] = (owner, hints[f.name])
    return table


KEYS = _key_table()


def _scalar(text: str, tp, key: str):
    t = text.strip()
    if tp is bool:
        if t.lower() in ("true", "1", "yes"):
            return True
        if t.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        return tp(t)
    except ValueError:
        raise ConfigError(f"{key}: expected {tp.__name__}, got {text!r}") from None


def _convert(text: str, tp, key: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if text.strip().lower() == "none":
            return None
        return _convert(text, args[0], key)
    if origin is tuple:
        args = typing.get_args(tp)
        parts = [p for p in text.split(",") if p.strip()]
        if args and args[-1] is Ellipsis:
            return tuple(_scalar(p, args[0], key) for p in parts)
        if len(parts) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_scalar(p, a, key) for p, a in zip(parts, args))
    return _scalar(text, tp, key)


def parse_lines(lines) -> dict[str, str]:
    out = {}
    for no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS and key not in PATH_KEYS:
            raise ConfigError(f"line {no}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"line {no}: duplicate key {key!r}")
        out[key] = value
    return out


def build(raw: dict[str, str]) -> RunConfig:
    groups: dict[str, dict] = {"train": {}, "model": {}, "augment": {}}
    paths = dict(PATH_KEYS)
    for key, value in raw.items():
        if key in PATH_KEYS:
            paths[key] = None if value.lower() == "none" else value
            continue
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        owner, tp = KEYS[key]
        groups[owner][key] = _convert(value, tp, key)
    try:
        model = ModelConfig(**groups["model"])
        augment = AugmentPolicy(**groups["augment"])
        train = TrainConfig(model=model, augment=augment, **groups["train"])
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return RunConfig(train, paths)


def load_config(path, overrides: dict[str, str] | None = None) -> RunConfig:
    """Parse a config file; ``overrides`` (already split key/value strings) win over it."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    raw = parse_lines(text.splitlines())
    for k, v in (overrides or {}).items():
        if k not in KEYS and k not in PATH_KEYS:
            raise ConfigError(f"unknown config key {k!r}")
        raw[k] = v
    return build(raw)
