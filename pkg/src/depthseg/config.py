"""Run configuration: a flat ``key = value`` file with dotted namespaces.

Namespaces map onto dataclasses: ``model.*`` -> NetConfig, ``train.*`` ->
TrainConfig, ``loss.*`` -> LossWeights, ``aug.*`` -> AugConfig. Unknown keys are
errors. A written snapshot lists every key, so it reproduces the run on its own.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from depthseg.augment import AugConfig
from depthseg.losses import LossWeights
from depthseg.model import NetConfig

CRITIC_MODES = ("none", "one", "two")
DEPTH_SPACES = ("log", "linear")
TASKS = ("both", "depth", "seg")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 8
    base_lr: float = 5e-4
    weight_decay: float = 5e-2
    poly_power: float = 0.9
    critic: str = "one"
    critic_steps: int = 5
    critic_batch_size: int = 4
    critic_lr: float = 1e-4
    critic_weight_decay: float = 0.0
    depth_space: str = "log"
    tasks: str = "both"
    augment: bool = True
    seed: int = 0
    checkpoint_interval: int = 500
    eval_interval: int = 500
    eval_batch_size: int = 20
    deterministic: bool = True
    center_crop: tuple[int, ...] = ()  # H,W window taken from every frame; empty uses full frames

    def __post_init__(self):
        if self.total_steps < 0:
            raise ConfigError(f"train.total_steps must be >= 0, got {self.total_steps}")
        for name in ("base_lr", "critic_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"train.{name} must be > 0")
        for name in ("batch_size", "critic_batch_size", "critic_steps", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1")
        if self.critic not in CRITIC_MODES:
            raise ConfigError(f"train.critic must be one of {CRITIC_MODES}, got {self.critic!r}")
        if self.depth_space not in DEPTH_SPACES:
            raise ConfigError(f"train.depth_space must be one of {DEPTH_SPACES}, got {self.depth_space!r}")
        if self.tasks not in TASKS:
            raise ConfigError(f"train.tasks must be one of {TASKS}, got {self.tasks!r}")
        if self.center_crop and (len(self.center_crop) != 2 or min(self.center_crop) < 1):
            raise ConfigError(f"train.center_crop must be empty or H,W, got {self.center_crop}")


SECTIONS = {"model": NetConfig, "train": TrainConfig, "loss": LossWeights, "aug": AugConfig}


@dataclass(frozen=True)
class RunConfig:
    model: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    aug: AugConfig = field(default_factory=AugConfig)

    def effective_weights(self) -> LossWeights:
        """Loss weights after ablation switches: single-task zeroes the other
        task's weight, critic "none" zeroes the adversarial weight."""
        w = self.loss
        if self.train.tasks == "depth":
            w = replace(w, alpha_mix=1.0)
        elif self.train.tasks == "seg":
            w = replace(w, alpha_mix=0.0)
        if self.train.critic == "none":
            w = replace(w, beta_adv=0.0)
        return w

    def to_flat(self) -> dict[str, Any]:
        out = {}
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                out[f"{section}.{f.name}"] = getattr(obj, f.name)
        return out

    @classmethod
    def from_flat(cls, values: Mapping[str, Any], base: "RunConfig | None" = None) -> "RunConfig":
        base = base or cls()
        unknown = []
        per_section: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
        for key, raw in values.items():
            section, _, name = key.partition(".")
            if section not in SECTIONS or name not in _field_types(SECTIONS[section]):
                unknown.append(key)
                continue
            per_section[section][name] = _coerce(key, raw, _field_types(SECTIONS[section])[name])
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            parts = {s: replace(getattr(base, s), **kv) for s, kv in per_section.items()}
            cfg = cls(**parts)
            cfg.model.validate()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    def with_overrides(self, values: Mapping[str, Any]) -> "RunConfig":
        return RunConfig.from_flat(values, base=self)

    def dumps(self) -> str:
        lines = [f"{k} = {_format(v)}" for k, v in sorted(self.to_flat().items())]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


def _field_types(cls) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, raw: Any, typ: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    s = raw.strip()
    try:
        if typ is bool:
            if s.lower() in ("true", "1", "yes", "on"):
                return True
            if s.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(s)
        if typ is int:
            return int(s)
        if typ is float:
            return float(s)
        if typ is str:
            return s
        if typing.get_origin(typ) is tuple:
            return tuple(int(x) for x in s.replace("x", ",").split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{key}: unsupported type {typ}")


def parse_flat(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key}")
        out[key] = value
    return out


def load_config(path=None, overrides: Mapping[str, str] | None = None) -> tuple[RunConfig, set[str]]:
    """Returns the config and the set of keys that were set explicitly."""
    values: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_flat(p.read_text(), str(p)))
    values.update(overrides or {})
    return RunConfig.from_flat(values), set(values)
