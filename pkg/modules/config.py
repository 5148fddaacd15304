"""
Configuration files and run manifests.

Config and task manifest files are line-oriented `key = value` text. `#` starts a
comment, blank lines are skipped and every key must be known to the reader:
a misspelt key is a `ConfigError`, never a silent default.

- `TrainConfig` holds the optimisation recipe (lr 0.1, x0.99 per epoch, /5 on a dev
  drop, stop below 1e-5, batches of 128) plus model sizes and task declarations.
- `RunManifest` is written as JSON next to every command's outputs and carries
  enough to replay the command.
"""

import json
import os
from dataclasses import MISSING, asdict, dataclass, field, fields
from datetime import datetime, timezone


class ConfigError(ValueError):
    """Bad or unknown configuration key, or a missing config file."""


FRAMEWORKS = ("FS", "SP", "ASP")
POOLINGS = ("max", "biatt")
ADVERSARIAL_MODES = ("reversal", "alternating")
OOV_POLICIES = ("zeros", "uniform")


def read_key_value_file(path: str, allowed_keys) -> dict[str, str]:
    """Parses `key = value` lines, rejecting unknown and duplicate keys."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as handle:
        for line_number, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_number}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in allowed_keys:
                raise ConfigError(f"{path}:{line_number}: unknown key '{key}'")
            if key in values:
                raise ConfigError(f"{path}:{line_number}: duplicate key '{key}'")
            values[key] = value
    return values


def split_list(value: str) -> list[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def _parse_bool(key: str, value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {value!r}")


@dataclass
class TrainConfig:
    framework: str = "FS"
    pooling: str = "max"
    initial_lr: float = 0.1
    lr_decay: float = 0.99
    dev_drop_divisor: float = 5.0
    stop_threshold: float = 1e-5
    batch_size: int = 128
    max_epochs: int = 50
    seed: int = 1
    beta: float = 0.0
    gamma: float = 0.0
    reversal_strength: float = 1.0
    adversarial_mode: str = "reversal"
    diff_normalize: bool = True
    hidden_dim: int = 64
    private_hidden_dim: int = 0  # 0 means same as hidden_dim
    embed_dim: int = 50
    mlp_dim: int = 128
    min_count: int = 1
    embeddings: str = ""
    oov_policy: str = "zeros"
    task_manifests: list = field(default_factory=list)
    synthetic_tasks: list = field(default_factory=list)
    synthetic_train_size: int = 2000
    synthetic_dev_size: int = 500

    def __post_init__(self):
        self.validate()

    @property
    def private_dim(self) -> int:
        return self.private_hidden_dim or self.hidden_dim

    def validate(self) -> None:
        if self.framework not in FRAMEWORKS:
            raise ConfigError(f"framework must be one of {FRAMEWORKS}, got {self.framework!r}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.pooling == "biatt" and self.framework == "FS":
            raise ConfigError("biatt pooling needs shared and private encoders (SP or ASP)")
        if self.adversarial_mode not in ADVERSARIAL_MODES:
            raise ConfigError(f"adversarial_mode must be one of {ADVERSARIAL_MODES}")
        if self.oov_policy not in OOV_POLICIES:
            raise ConfigError(f"oov_policy must be one of {OOV_POLICIES}")
        for name in ("initial_lr", "lr_decay", "stop_threshold"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.dev_drop_divisor <= 1:
            raise ConfigError("dev_drop_divisor must be greater than 1")
        if self.beta < 0 or self.gamma < 0:
            raise ConfigError("beta and gamma must be non-negative")
        if self.framework == "SP" and (self.beta or self.gamma):
            raise ConfigError("SP uses beta = gamma = 0; use ASP for adversarial training")
        if self.framework == "FS" and (self.beta or self.gamma):
            raise ConfigError("FS has no discriminator or private encoders; beta and gamma must be 0")
        for name in ("batch_size", "max_epochs", "hidden_dim", "embed_dim", "mlp_dim", "min_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown key '{key}'")
            kwargs[key] = _coerce(key, known[key], raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str) -> "TrainConfig":
        allowed = {f.name for f in fields(cls)}
        values = read_key_value_file(path, allowed)
        config = cls.from_dict(values)
        base = os.path.dirname(os.path.abspath(path))
        config.task_manifests = [p if os.path.isabs(p) else os.path.join(base, p) for p in config.task_manifests]
        if config.embeddings and not os.path.isabs(config.embeddings):
            config.embeddings = os.path.join(base, config.embeddings)
        return config

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(key: str, spec, raw):
    if not isinstance(raw, str):
        return raw
    default = spec.default if spec.default_factory is MISSING else spec.default_factory()
    try:
        if isinstance(default, bool):
            return _parse_bool(key, raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return split_list(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw


# --- Run manifest ---
@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict
    outputs: dict
    seed: int
    started_at: str = ""

    def write(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        if not self.started_at:
            self.started_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(asdict(self), handle, indent=2, sort_keys=True)
        return path

    @classmethod
    def read(cls, path: str) -> "RunManifest":
        if not os.path.exists(path):
            raise ConfigError(f"manifest not found: {path}")
        try:
            with open(path, encoding="utf-8") as handle:
                data = json.load(handle)
            return cls(**data)
        except (json.JSONDecodeError, TypeError) as e:
            raise ConfigError(f"invalid manifest {path}: {e}") from None
