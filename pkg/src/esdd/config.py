"""Run configuration: one JSON document with per-section overrides."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .dsu import DsuConfig
from .mhfa import MhfaConfig
from .seeding import derive_seed
from .synth import SynthConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    """MHFA settings; L and D come from the data."""

    H: int = 32
    D_cmp: int = 128
    E: int = 256
    dsu_enabled: bool = False
    dsu_p: float = 0.5
    dsu_eps: float = 1e-6
    adapter_enabled: bool = True

    def build(self, L: int, D: int) -> MhfaConfig:
        return MhfaConfig(
            L=L, D=D, H=self.H, D_cmp=self.D_cmp, E=self.E,
            dsu_enabled=self.dsu_enabled, dsu=DsuConfig(self.dsu_p, self.dsu_eps),
            adapter_enabled=self.adapter_enabled,
        )


@dataclass
class FusionSection:
    weights: list[float] = field(default_factory=list)
    normalize: str = "none"


@dataclass
class RunConfig:
    seed: int = 0
    workdir: str = "run"
    manifest: str | None = None
    checkpoint: str | None = None
    synth: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    fusion: dict = field(default_factory=dict)

    SECTIONS = ("synth", "model", "train", "fusion")

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def override(self, dotted: str, raw: str) -> None:
        """Apply ``section.key=value``; the value is parsed as JSON when possible."""
        value = _parse_value(raw)
        if "." not in dotted:
            if dotted not in {f.name for f in fields(self)} or dotted in self.SECTIONS:
                raise ConfigError(f"unknown setting {dotted!r}")
            setattr(self, dotted, value)
            return
        section, key = dotted.split(".", 1)
        if section not in self.SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        getattr(self, section)[key] = value

    # Sub-seeds default to hash(top seed, section) unless set explicitly.
    def synth_config(self) -> SynthConfig:
        opts = {"seed": derive_seed(self.seed, "synth") % 2**31, **self.synth}
        return _build(SynthConfig, opts, "synth")

    def model_section(self) -> ModelSection:
        return _build(ModelSection, self.model, "model")

    def train_config(self) -> TrainConfig:
        opts = {"seed": derive_seed(self.seed, "train") % 2**31, **self.train}
        return _build(TrainConfig, opts, "train")

    def fusion_section(self) -> FusionSection:
        return _build(FusionSection, self.fusion, "fusion")

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _build(cls, opts: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = set(opts) - names
    if unknown:
        raise ConfigError(f"unknown {section} settings: {sorted(unknown)}")
    try:
        return cls(**opts)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} settings: {exc}") from exc
