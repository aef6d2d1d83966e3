"""Flat ``key = value`` config files with dotted section keys.

Example::

    # comments start with '#'
    model.window_size = 8
    model.image_size = 256x256
    loss.w3 = 2.0
    train.lr = 5e-4
    data.train_dir = /data/uieb/train

Sections are ``model``, ``loss``, ``train`` and ``data``. Unknown keys are
errors. ``--set key=value`` overrides use the same syntax and win over file values.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ConfigError
from .losses import LossWeights
from .model import ModelConfig
from .trainer import TrainConfig

_DATA_KEYS = ("train_dir", "test_dir", "shuffle", "hflip")
_TRAIN_SKIP = ("model", "loss") + _DATA_KEYS


def _fields(cls, skip=()) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}


SECTIONS = {
    "model": _fields(ModelConfig),
    "loss": _fields(LossWeights),
    "train": _fields(TrainConfig, _TRAIN_SKIP),
    "data": {k: f for k, f in _fields(TrainConfig).items() if k in _DATA_KEYS},
}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(key: str, text: str, default):
    try:
        if key == "model.image_size":
            parts = text.lower().replace(",", "x").split("x")
            if len(parts) == 1:
                parts = parts * 2
            if len(parts) != 2:
                raise ValueError(text)
            return (int(parts[0]), int(parts[1]))
        if key == "train.betas":
            a, b = (float(p) for p in text.split(","))
            return (a, b)
        if key == "model.attn_scale":
            try:
                return float(text)
            except ValueError:
                return text
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse value {text!r}") from None


def parse_lines(lines, source: str = "<config>") -> dict[str, str]:
    """Return raw ``{dotted_key: text}`` entries; later duplicates win."""
    out: dict[str, str] = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        check_key(key, f"{source}:{n}")
        out[key] = value
    return out


def check_key(key: str, where: str = "") -> None:
    section, _, name = key.partition(".")
    if section not in SECTIONS or name not in SECTIONS[section]:
        prefix = f"{where}: " if where else ""
        raise ConfigError(f"{prefix}unknown config key {key!r}")


def parse_overrides(items) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        check_key(key, "--set")
        out[key] = value
    return out


def build_config(entries: dict[str, str]) -> TrainConfig:
    groups: dict[str, dict] = {s: {} for s in SECTIONS}
    for key, text in entries.items():
        section, _, name = key.partition(".")
        default = SECTIONS[section][name].default
        if default is dataclasses.MISSING:
            default = None
        groups[section][name] = _parse_value(key, text, default)
    try:
        model = ModelConfig(**groups["model"])
        loss = LossWeights(**groups["loss"])
        return TrainConfig(model=model, loss=loss, **groups["train"], **groups["data"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None, overrides=None, seed_env: str | None = None) -> TrainConfig:
    """Read a config file (or defaults when ``path`` is None) and apply overrides.

    ``seed_env`` is used for ``train.seed`` and ``model.seed`` only when neither
    the file nor the overrides set them.
    """
    entries: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
        entries.update(parse_lines(text.splitlines(), str(path)))
    entries.update(parse_overrides(overrides))
    if seed_env is not None:
        for key in ("train.seed", "model.seed"):
            entries.setdefault(key, seed_env)
    return build_config(entries)


def _fmt(value) -> str:
    if isinstance(value, tuple) and len(value) == 2 and all(isinstance(v, int) for v in value):
        return f"{value[0]}x{value[1]}"
    if isinstance(value, (tuple, list)):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def effective_items(cfg: TrainConfig) -> list[tuple[str, str]]:
    objs = {"model": cfg.model, "loss": cfg.loss, "train": cfg, "data": cfg}
    return [(f"{s}.{k}", _fmt(getattr(objs[s], k))) for s, fields in SECTIONS.items() for k in fields]


def dump_config(cfg: TrainConfig) -> str:
    """Render every effective setting in the file format (parseable by load_config)."""
    return "".join(f"{k} = {v}\n" for k, v in effective_items(cfg))
