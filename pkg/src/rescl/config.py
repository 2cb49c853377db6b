"""Experiment configuration: a flat ``key=value`` text format with typed parsing."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from typing import Any, Iterable, Mapping

from .losses import LossConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "A-to-C"
    seeds: tuple[int, ...] = (0, 1, 2)
    widths: tuple[int, ...] = (8, 16)
    image_size: int = 8
    lwf_base: float = 1.0
    rescl_base: float = 1e-4
    imm_base: float = 1.0
    imm_lwf_mult: float = 1.0  # LwF model that mean-IMM mixes with
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def for_seed(self, seed: int) -> TrainConfig:
        return replace(self.train, seed=seed)

    def to_text(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in flat_items(self))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


# keys owned by the nested configs; the per-run seed comes from ``seeds``
_NESTED = {"train": TrainConfig, "loss": LossConfig}
_HIDDEN = {("train", "seed")}


def flat_items(cfg: ExperimentConfig) -> list[tuple[str, Any]]:
    out = []
    for f in fields(cfg):
        if f.name in _NESTED:
            sub = getattr(cfg, f.name)
            out += [(g.name, getattr(sub, g.name)) for g in fields(sub) if (f.name, g.name) not in _HIDDEN]
        else:
            out.append((f.name, getattr(cfg, f.name)))
    return out


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else int
            return tuple(kind(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


def _owner(key: str) -> str | None:
    """Name of the nested config holding ``key``, or None for top-level keys."""
    top = {f.name for f in fields(ExperimentConfig)} - set(_NESTED)
    if key in top:
        return None
    for name, cls in _NESTED.items():
        if key in {f.name for f in fields(cls)} and (name, key) not in _HIDDEN:
            return name
    raise ConfigError(f"unknown config key {key!r}")


def apply_overrides(cfg: ExperimentConfig, values: Mapping[str, str]) -> ExperimentConfig:
    top: dict[str, Any] = {}
    nested: dict[str, dict[str, Any]] = {name: {} for name in _NESTED}
    for key, raw in values.items():
        owner = _owner(key)
        if owner is None:
            top[key] = _parse(raw, getattr(cfg, key), key)
        else:
            nested[owner][key] = _parse(raw, getattr(getattr(cfg, owner), key), key)
    try:
        for name, kv in nested.items():
            if kv:
                top[name] = replace(getattr(cfg, name), **kv)
        return replace(cfg, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def parse_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path=None, overrides: Iterable[str] | Mapping[str, str] = ()) -> ExperimentConfig:
    """Defaults, then the file at ``path`` (if any), then ``key=value`` overrides."""
    cfg = ExperimentConfig()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = apply_overrides(cfg, parse_text(fh.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(overrides, Mapping):
        overrides = parse_text("\n".join(overrides))
    return apply_overrides(cfg, overrides)


def config_from_text(text: str) -> ExperimentConfig:
    return apply_overrides(ExperimentConfig(), parse_text(text))

