"""Run configuration files (TOML) and the shipped presets.

A config file has three tables::

    [model]   # ModelConfig fields
    [loss]    # beta, gamma1..gamma5
    [train]   # TrainConfig fields

TOML has no null, so the gamma lists only cover levels where the term
exists: ``gamma2`` has one entry per level, the others one per level except
the last.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .losses import LossWeights
from .network import ModelConfig
from .trainer import TrainConfig

PRESETS = ("desk", "full")
_FULL_LENGTH = ("gamma2",)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    loss: LossWeights
    train: TrainConfig

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "loss": self.loss.to_dict(), "train": self.train.to_dict()}


def _loss_from_table(table: dict, levels: int) -> LossWeights:
    d = dict(table)
    for name in ("gamma1", "gamma2", "gamma3", "gamma4", "gamma5"):
        if name not in d:
            continue
        vals = list(d[name])
        want = levels if name in _FULL_LENGTH else levels - 1
        if len(vals) != want:
            extra = "" if name in _FULL_LENGTH else " (the term does not exist at the last level)"
            raise ConfigError(f"[loss] {name} needs {want} entries for {levels} levels, got {len(vals)}{extra}")
        d[name] = vals + ([] if name in _FULL_LENGTH else [None])
    try:
        return LossWeights.from_dict(d).validate(levels)
    except TypeError as exc:
        raise ConfigError(f"[loss] {exc}") from exc


def parse_config(data: dict) -> RunConfig:
    unknown = set(data) - {"model", "loss", "train"}
    if unknown:
        raise ConfigError(f"unknown config tables: {sorted(unknown)}")
    try:
        model = ModelConfig.from_dict(dict(data.get("model", {})))
        train = TrainConfig.from_dict(dict(data.get("train", {})))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    loss = _loss_from_table(data.get("loss", {}), model.levels)
    return RunConfig(model, loss, train)


def load_config(path_or_preset: str | Path) -> RunConfig:
    """Load a TOML config file, or one of the shipped presets by name."""
    name = str(path_or_preset)
    if name in PRESETS:
        text = resources.files("m3ae.presets").joinpath(f"{name}.toml").read_text()
        source = f"preset {name}"
    else:
        try:
            text = Path(name).read_text()
        except OSError as exc:
            raise ConfigError(f"{name}: {exc.strerror or exc}") from exc
        source = name
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return parse_config(data)


def schema() -> list[tuple[str, object]]:
    """Every configurable field as (``table.key``, default)."""
    rows = []
    for table, cls in (("model", ModelConfig), ("loss", LossWeights), ("train", TrainConfig)):
        for f in dataclasses.fields(cls):
            rows.append((f"{table}.{f.name}", f.default))
    return rows
