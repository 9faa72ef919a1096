"""Flat ``key = value`` run configuration.

One document carries dataset, model, schedule, training and evaluation
settings.  Lines starting with ``#`` are comments.  Values are parsed by the
type of the matching field; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .dataset import TEMPLATES
from .denoiser import DenoiserConfig
from .schedule import Schedule, build_schedule
from .trainer import TrainConfig


class ConfigError(ValueError):
    def __init__(self, key: str | None, message: str):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    # dataset
    num_classes: int = 8
    per_class: int = 256
    source_size: int = 16
    dataset_seed: int = 0
    # denoiser
    image_size: int = 16
    channels: int = 3
    base_width: int = 32
    depth: int = 2
    embed_dim: int = 64
    # schedule
    timesteps: int = 200
    beta_start: float = 5e-4
    beta_end: float = 0.1
    # training
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    ema_alpha: float = 0.995
    p_uncond: float = 0.1
    seed: int = 0
    # sampling / evaluation
    guidance_scale: float = 3.0
    eval_per_class: int = 16
    feature_dim: int = 64

    def __post_init__(self):
        if self.channels != 3:
            raise ConfigError("channels", "only RGB (3 channels) is supported")
        if not 1 <= self.num_classes <= len(TEMPLATES):
            raise ConfigError("num_classes", f"must lie in [1, {len(TEMPLATES)}]")
        if self.per_class < 1:
            raise ConfigError("per_class", "must be positive")
        if self.source_size < 8:
            raise ConfigError("source_size", "must be at least 8")
        if not self.guidance_scale >= 0:
            raise ConfigError("guidance_scale", "must be >= 0")
        if self.eval_per_class < 1:
            raise ConfigError("eval_per_class", "must be positive")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim", "must be positive")
        if self.timesteps < 1:
            raise ConfigError("timesteps", "must be at least 1")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError("beta_start", "need 0 < beta_start <= beta_end < 1")
        for build in (self.denoiser_config, self.train_config):
            try:
                build()
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(_guess_key(str(exc)), str(exc)) from None

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            image_size=self.image_size,
            channels=self.channels,
            base_width=self.base_width,
            depth=self.depth,
            embed_dim=self.embed_dim,
            num_classes=self.num_classes + 1,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_epsilon=self.adam_epsilon,
            ema_alpha=self.ema_alpha,
            p_uncond=self.p_uncond,
            seed=self.seed,
        )

    def schedule(self) -> Schedule:
        return build_schedule(self.timesteps, self.beta_start, self.beta_end)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls(**parse_document(text, {f.name: f.type for f in fields(cls)}))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _guess_key(message: str) -> str | None:
    """Longest config key named in a validation message from a sub-config."""
    names = sorted((f.name for f in fields(RunConfig)), key=len, reverse=True)
    return next((name for name in names if name in message), None)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return str(value)


def _parse_value(key: str, raw: str, typ: str):
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "bool":
            if raw.lower() in ("true", "false"):
                return raw.lower() == "true"
            raise ValueError(raw)
        if typ == "str":
            if len(raw) >= 2 and raw[0] == raw[-1] == '"':
                return raw[1:-1].replace('\\"', '"').replace("\\\\", "\\")
            return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {typ}") from None
    raise ConfigError(key, f"unsupported type {typ}")


def parse_document(text: str, types: dict[str, str]) -> dict:
    """Parse ``key = value`` lines; ``types`` maps each allowed key to a type name."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(None, f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(key, "unknown key")
        if key in values:
            raise ConfigError(key, "duplicate key")
        values[key] = _parse_value(key, raw, types[key])
    return values
