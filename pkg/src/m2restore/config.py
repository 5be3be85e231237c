"""Model, degradation and run configuration.

Run configurations live in flat ``key = value`` text files. Every key belongs
to exactly one of :class:`ModelConfig`, :class:`DegradeParams` or
:class:`TrainSettings`; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError

DEGRADATION_CLASSES = ("rain", "snow", "haze", "raindrop", "unknown")
DEGRADATION_TYPES = DEGRADATION_CLASSES[:4]
VARIANTS = ("full", "no_dgf", "no_dder", "dder_only")


def class_index(name: str) -> int:
    """Class id of a degradation name; anything unrecognised maps to ``unknown``."""
    try:
        return DEGRADATION_CLASSES.index(name)
    except ValueError:
        return DEGRADATION_CLASSES.index("unknown")


@dataclass
class ModelConfig:
    channels: tuple = (16, 32, 64)
    blocks: tuple = (1, 2, 2)
    heads: tuple = (1, 2, 4)
    decoder_blocks: tuple = (1, 1)
    expansion: float = 2.0
    n_experts: int = 4
    top_k: int = 2
    expert_expansion: float = 2.0
    prompts: int = 8
    prompt_dim: int = 16
    classes: int = len(DEGRADATION_CLASSES)
    prior_dim: int = 64
    ssm_state: int = 8
    balance_weight: float = 0.01
    eps_stab: float = 1e-10
    variant: str = "full"
    aflb: bool = False
    prior: str = "oracle"
    prior_seed: int = 1234
    init_seed: int = 0

    @property
    def levels(self) -> int:
        return len(self.channels)

    def validate(self) -> "ModelConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: unknown variant {self.variant!r}; choose from {VARIANTS}")
        if not (len(self.channels) == len(self.blocks) == len(self.heads)):
            raise ConfigError("channels/blocks/heads must have one entry per level")
        if len(self.decoder_blocks) != self.levels - 1:
            raise ConfigError("decoder_blocks needs levels-1 entries")
        for a, b in zip(self.channels, self.channels[1:]):
            if b != 2 * a:
                raise ConfigError("channels must double from one level to the next")
        for c, h in zip(self.channels, self.heads):
            if c % h:
                raise ConfigError(f"heads: {h} does not divide {c} channels")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k: need 1 <= K <= N, got K={self.top_k}, N={self.n_experts}")
        if self.prompts < 2:
            raise ConfigError("prompts: need at least 2 base prompts")
        if self.balance_weight < 0:
            raise ConfigError("balance_weight: lambda must be >= 0")
        if self.eps_stab <= 0:
            raise ConfigError("eps_stab must be positive")
        if self.prior not in ("oracle", "learned"):
            raise ConfigError(f"prior: expected 'oracle' or 'learned', got {self.prior!r}")
        return self


@dataclass
class DegradeParams:
    """Sampling ranges ``(lo, hi)`` for each synthetic degrader."""

    rain_count: tuple = (30, 70)
    rain_length: tuple = (6.0, 18.0)
    rain_angle: tuple = (-25.0, 25.0)
    rain_intensity: tuple = (0.35, 0.7)
    rain_width: tuple = (0.5, 0.9)
    snow_count: tuple = (40, 110)
    snow_radius: tuple = (0.7, 2.2)
    snow_opacity: tuple = (0.6, 0.95)
    haze_t: tuple = (0.35, 0.65)
    haze_airlight: tuple = (0.75, 0.95)
    raindrop_count: tuple = (4, 9)
    raindrop_radius: tuple = (4.0, 9.0)
    raindrop_blur: tuple = (1.5, 3.0)
    raindrop_lift: tuple = (0.05, 0.15)

    def validate(self) -> "DegradeParams":
        for f in fields(self):
            lo, hi = getattr(self, f.name)
            if lo > hi:
                raise ConfigError(f"{f.name}: range low {lo} exceeds high {hi}")
            if lo < 0 and f.name != "rain_angle":
                raise ConfigError(f"{f.name}: negative values are not allowed")
        for key in ("haze_t", "haze_airlight", "snow_opacity", "rain_intensity"):
            lo, hi = getattr(self, key)
            if hi > 1:
                raise ConfigError(f"{key}: values must lie in [0, 1]")
        return self


@dataclass
class TrainSettings:
    types: tuple = ("rain", "snow", "haze")
    train_per_type: int = 200
    val_per_type: int = 40
    image_size: int = 64
    corpus_seed: int = 2024
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 2
    accum_steps: int = 4
    steps: int = 2000
    checkpoint_every: int = 500
    log_every: int = 10
    seed: int = 0
    flip_augment: bool = True
    prior_steps: int = 300
    prior_lr: float = 2e-3

    def validate(self) -> "TrainSettings":
        if not self.types:
            raise ConfigError("types: at least one degradation type is required")
        for t in self.types:
            if t not in DEGRADATION_TYPES:
                raise ConfigError(f"types: unknown degradation type {t!r}; choose from {DEGRADATION_TYPES}")
        if self.image_size < 16:
            raise ConfigError("image_size: must be >= 16")
        if self.batch_size < 1 or self.accum_steps < 1:
            raise ConfigError("batch_size and accum_steps must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr: must be >= 0")
        if self.train_per_type < 0 or self.val_per_type < 0:
            raise ConfigError("per-type sample counts must be >= 0")
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    degrade: DegradeParams = field(default_factory=DegradeParams)
    train: TrainSettings = field(default_factory=TrainSettings)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.degrade.validate()
        self.train.validate()
        return self

    def to_text(self) -> str:
        lines = []
        for section in (self.model, self.degrade, self.train):
            lines.append(f"# {type(section).__name__}")
            for f in fields(section):
                lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        owners = _key_owners(cfg)
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in owners:
                raise ConfigError(f"{key}: unknown configuration key (line {lineno})")
            section = owners[key]
            default = getattr(section, key)
            try:
                setattr(section, key, _parse(value, default))
            except ValueError as exc:
                raise ConfigError(f"{key}: cannot parse {value!r} ({exc})") from None
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def replace(self, **overrides: Any) -> "RunConfig":
        """Copy with individual keys overridden (keys as in the text format)."""
        new = RunConfig(dataclasses.replace(self.model), dataclasses.replace(self.degrade),
                        dataclasses.replace(self.train))
        owners = _key_owners(new)
        for key, value in overrides.items():
            if key not in owners:
                raise ConfigError(f"{key}: unknown configuration key")
            setattr(owners[key], key, value)
        return new.validate()


def _key_owners(cfg: RunConfig) -> dict:
    owners = {}
    for section in (cfg.model, cfg.degrade, cfg.train):
        for f in fields(section):
            owners[f.name] = section
    return owners


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(text: str, default):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError("expected a boolean")
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        proto = default[0] if default else ""
        return tuple(_parse(p, proto) for p in parts)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text
