"""Run configuration: dataclass defaults, INI-style files, CLI overrides.

Config files are flat ``key = value`` pairs under ``[data]``, ``[model]``,
``[train]``, and ``[thresholds]`` sections.  Unknown keys are rejected so
typos fail loudly.  Threshold keys pair organ and domain as
``<organ>.<domain>`` (e.g. ``lung-like.hpa-like = 0.15``).

Training defaults mirror the reference recipe (lr 5e-5, batches 4/8,
plateau factor 0.5 with patience 5); the epoch count and tile sizes default
to the toy scale so a full run stays in CPU-minutes territory.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .model import EncoderConfig
from .schedule import Regime


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.replace(" ", "").split(",") if tok)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    # [data]
    samples_per_organ: int = 16
    image_size: int = 64
    seed: int = 42
    # [model]
    stage_channels: tuple[int, ...] = (16, 32, 64, 96)
    stage_strides: tuple[int, ...] = (4, 2, 2, 2)
    blocks_per_stage: int = 1
    block_type: str = "attention"
    decoder_width: int = 16
    # [train]
    regime: str = "switched:2:1:0.5"
    total_epochs: int = 24
    lr: float = 5e-5
    batch_train: int = 4
    batch_val: int = 8
    aux_weight: float = 1.0
    fold: int = 0
    k_folds: int = 5
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    plateau_min_delta: float = 1e-4
    plateau_min_lr: float = 1e-7
    grad_clip: float = 0.0
    zero_main_loss: bool = False
    # [thresholds] -- (organ value, domain value) -> cutoff
    threshold_overrides: dict[tuple[str, str], float] = field(default_factory=dict)

    _SECTIONS = {
        "data": ("samples_per_organ", "image_size", "seed"),
        "model": ("stage_channels", "stage_strides", "blocks_per_stage",
                  "block_type", "decoder_width"),
        "train": ("regime", "total_epochs", "lr", "batch_train", "batch_val",
                  "aux_weight", "fold", "k_folds", "plateau_factor",
                  "plateau_patience", "plateau_min_delta", "plateau_min_lr",
                  "grad_clip", "zero_main_loss"),
    }

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            stage_channels=self.stage_channels,
            stage_strides=self.stage_strides,
            blocks_per_stage=self.blocks_per_stage,
            block_type=self.block_type,
        )

    def regime_plan(self) -> Regime:
        return Regime.parse(self.regime)

    def validate(self) -> "RunConfig":
        cfg = self.encoder_config()  # raises on bad model fields
        if self.image_size % cfg.total_stride:
            raise ValueError(
                f"image_size {self.image_size} not divisible by total stride {cfg.total_stride}"
            )
        self.regime_plan()  # raises on bad regime strings
        if self.samples_per_organ < 1:
            raise ValueError("samples_per_organ must be >= 1")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if self.batch_train < 1 or self.batch_val < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.k_folds < 2:
            raise ValueError("k_folds must be >= 2")
        if not 0 <= self.fold < self.k_folds:
            raise ValueError(f"fold {self.fold} outside [0, {self.k_folds})")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.aux_weight < 0:
            raise ValueError("aux_weight must be >= 0")
        return self

    # -- file round trip -----------------------------------------------------

    @classmethod
    def from_ini(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise FileNotFoundError(f"config file not found: {path}")
        known_sections = set(cls._SECTIONS) | {"thresholds"}
        values: dict = {}
        for section in parser.sections():
            if section not in known_sections:
                raise ValueError(f"unknown config section [{section}]")
        for section, keys in cls._SECTIONS.items():
            if not parser.has_section(section):
                continue
            for key in parser[section]:
                if key not in keys:
                    raise ValueError(f"unknown key {key!r} in section [{section}]")
                values[key] = parser[section][key]
        overrides: dict[tuple[str, str], float] = {}
        if parser.has_section("thresholds"):
            for key, raw in parser["thresholds"].items():
                organ, dot, domain = key.partition(".")
                if not dot:
                    raise ValueError(
                        f"threshold keys look like <organ>.<domain>, got {key!r}"
                    )
                overrides[(organ, domain)] = float(raw)
        config = cls(threshold_overrides=overrides)
        return replace(config, **cls._coerce(values)).validate()

    @classmethod
    def _coerce(cls, raw: dict[str, str]) -> dict:
        coerced: dict = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, text in raw.items():
            kind = types[key]
            if key in ("stage_channels", "stage_strides"):
                coerced[key] = _parse_int_tuple(text)
            elif kind == "int":
                coerced[key] = int(text)
            elif kind == "float":
                coerced[key] = float(text)
            elif kind == "bool":
                coerced[key] = _parse_bool(text)
            else:
                coerced[key] = text.strip()
        return coerced

    def write_ini(self, path) -> None:
        parser = configparser.ConfigParser()
        for section, keys in self._SECTIONS.items():
            parser[section] = {}
            for key in keys:
                value = getattr(self, key)
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                parser[section][key] = str(value)
        if self.threshold_overrides:
            parser["thresholds"] = {
                f"{organ}.{domain}": str(cutoff)
                for (organ, domain), cutoff in self.threshold_overrides.items()
            }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            parser.write(fh)


def load_config(path=None, **cli_overrides) -> RunConfig:
    """Config from defaults, optionally a file, then non-None CLI overrides."""
    config = RunConfig.from_ini(path) if path else RunConfig()
    applied = {k: v for k, v in cli_overrides.items() if v is not None}
    if applied:
        config = replace(config, **applied)
    return config.validate()
