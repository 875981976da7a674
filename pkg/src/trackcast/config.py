"""Run configuration: flat ``section.key = value`` text files.

Example::

    # experiment 3
    model.D = 32
    train.epochs = 12
    track.threshold = 0.5
    data.scenario = crossing
"""
from __future__ import annotations

import configparser
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    D: int = 32
    D_msg: int = 32
    L: int = 2
    H: int = 5
    radius: float = 30.0
    Z: int = 16
    K: int = 10
    T: int = 30
    hidden_aff: int = 32
    hidden_cvae: int = 64
    hidden_sampler: int = 64
    sigma_d: float = 2.0
    rho: float = 1.0
    R: float | None = None


@dataclass
class TrainConfig:
    epochs: int = 10
    sampler_epochs: int = 10
    lr: float = 2e-3
    sampler_lr: float = 2e-3
    lr_decay: str = "cosine"       # or "none"
    lr_floor: float = 0.1          # final fraction of the initial rate under cosine decay
    beta: float = 0.1
    w_a: float = 1.0
    w_f: float = 1.0
    w_div: float = 1.0
    w_anchor: float = 1.0
    seed: int = 0
    log: str = "train_log.txt"


@dataclass
class TrackConfig:
    min_hits: int = 3
    max_age: int = 2
    threshold: float = 0.5
    forecast: bool = True
    mode: str = "learned_sampler"
    workers: int = 4


@dataclass
class EvalConfig:
    iou_min: float = 0.25
    recall_levels: int = 40
    horizons: str = "1.0,3.0"      # seconds


@dataclass
class DataConfig:
    path: str | None = None        # directory with label_02/ and detections/
    scenario: str = "crossing"     # used when no path is given
    sequences: int = 2
    seed: int = 0
    noise: bool = True


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "track": TrackConfig, "eval": EvalConfig, "data": DataConfig}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    track: TrackConfig = field(default_factory=TrackConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def set(self, key: str, value: str) -> None:
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown configuration key {key!r}")
        obj = getattr(self, section)
        hints = typing.get_type_hints(type(obj))
        if name not in hints:
            raise ConfigError(f"unknown configuration key {key!r}")
        setattr(obj, name, _convert(key, value, hints[name]))

    def validate(self) -> None:
        m = self.model
        for name in ("D", "D_msg", "L", "H", "Z", "K", "T", "hidden_aff", "hidden_cvae", "hidden_sampler"):
            if getattr(m, name) < 1:
                raise ConfigError(f"model.{name} must be positive")
        if m.radius <= 0 or m.sigma_d <= 0 or m.rho < 0:
            raise ConfigError("model.radius and model.sigma_d must be positive, model.rho non-negative")
        if self.train.lr < 0 or self.train.sampler_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.train.lr_decay not in ("cosine", "none") or not 0 <= self.train.lr_floor <= 1:
            raise ConfigError("train.lr_decay must be cosine or none, train.lr_floor in [0, 1]")
        if not 0 < self.track.threshold < 1:
            raise ConfigError("track.threshold must lie in (0, 1)")
        if self.track.mode not in ("iid", "learned_sampler", "greedy_map_over_iid"):
            raise ConfigError(f"unknown track.mode {self.track.mode!r}")
        if self.eval.recall_levels < 1 or not 0 < self.eval.iou_min <= 1:
            raise ConfigError("invalid evaluation settings")
        if self.data.path is not None and not Path(self.data.path).is_dir():
            raise ConfigError(f"data.path {self.data.path!r} does not exist")
        if self.data.path is None and self.data.scenario not in ("crossing", "intersection"):
            raise ConfigError(f"unknown data.scenario {self.data.scenario!r}")

    def horizons(self) -> list[float]:
        return [float(h) for h in self.eval.horizons.split(",") if h.strip()]

    def to_text(self) -> str:
        lines = []
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                v = getattr(obj, f.name)
                if v is not None:
                    lines.append(f"{section}.{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


def _convert(key: str, raw: str, hint):
    raw = raw.strip()
    args = typing.get_args(hint)
    if type(None) in args:
        if raw.lower() in ("", "none"):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return hint(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot interpret {raw!r} as {getattr(hint, '__name__', hint)}") from None


def parse_config(text: str, overrides: dict[str, str] | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from None
    cfg = RunConfig()
    for key, value in parser["run"].items():
        cfg.set(key, value)
    for key, value in (overrides or {}).items():
        cfg.set(key, value)
    return cfg


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    text = Path(path).read_text() if path is not None else ""
    return parse_config(text, overrides)
