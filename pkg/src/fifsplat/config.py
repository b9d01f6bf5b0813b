"""Training configuration: nested dataclasses, YAML files and dotted overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .core import SurrogateConfig
from .density import DensityControlConfig
from .losses import LossWeights


class ConfigError(ValueError):
    pass


@dataclass
class LearningRates:
    means: float = 1.6e-4
    means_final: float = 1.6e-6  # end of the exponential decay
    scales: float = 5e-3
    quats: float = 1e-3
    opacity: float = 5e-2
    colors: float = 2.5e-3
    local_threshold: float = 1e-3
    global_threshold: float = 1e-3

    def __post_init__(self):
        for k, v in dataclasses.asdict(self).items():
            if v < 0:
                raise ValueError(f"learning rate {k} must be >= 0")


@dataclass
class TrainConfig:
    iterations: int = 2000
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    lr: LearningRates = field(default_factory=LearningRates)
    loss: LossWeights = field(default_factory=LossWeights)
    density: DensityControlConfig = field(default_factory=DensityControlConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    use_global_fif: bool = True
    use_local_fif: bool = True
    threshold_warmup: int = 500
    geometry_warmup: float = 0.3  # fraction of iterations before L_d / L_N switch on
    init_opacity: float = 0.1
    init_global_threshold: float = 0.005
    init_local_threshold: float = 0.01
    n_random: int = 2000  # used only when the dataset carries no points
    checkpoint_every: int = 0  # 0 -> only the final checkpoint
    log_every: int = 100
    backend: str | None = None

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be > 0")
        if not 0 <= self.geometry_warmup <= 1:
            raise ValueError("geometry_warmup is a fraction in [0, 1]")
        if not 0 < self.init_opacity < 1:
            raise ValueError("init_opacity must lie in (0, 1)")
        self.background = tuple(float(x) for x in self.background)
        if len(self.background) != 3:
            raise ValueError("background must be an RGB triple")

    @property
    def densify_until(self):
        d = self.density.densify_until
        return self.iterations // 2 if d is None else d

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["background"] = list(self.background)
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        nested = {"lr": LearningRates, "loss": LossWeights, "density": DensityControlConfig,
                  "surrogate": SurrogateConfig}
        kw = {}
        names = {f.name for f in dataclasses.fields(cls)}
        for key, value in d.items():
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
            if key in nested:
                sub = nested[key]
                sub_names = {f.name for f in dataclasses.fields(sub)}
                value = dict(value or {})
                bad = set(value) - sub_names
                if bad:
                    raise ConfigError(f"unknown key(s) {sorted(bad)} in section {key!r}")
                try:
                    value = sub(**value)
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"section {key!r}: {e}") from e
            kw[key] = value
        try:
            return cls(**kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e


def parse_override(text):
    """``a.b.c=value`` -> (["a", "b", "c"], parsed value). Values are YAML scalars."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"override {text!r}: cannot parse value ({e})") from e
    return key.split("."), value


def apply_overrides(d, overrides):
    d = dict(d)
    for text in overrides or ():
        path, value = parse_override(text)
        node = d
        for part in path[:-1]:
            child = node.get(part)
            child = dict(child) if isinstance(child, dict) else {}
            node[part] = child
            node = child
        node[path[-1]] = value
    return d


def load_config(path=None, overrides=()):
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{p}: malformed YAML ({e})") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        # a run manifest nests the effective config under "config"
        if "config" in raw and isinstance(raw["config"], dict):
            raw = raw["config"]
    return TrainConfig.from_dict(apply_overrides(raw, overrides))


def dump_config(cfg: TrainConfig):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
