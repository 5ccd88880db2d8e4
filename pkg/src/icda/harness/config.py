"""Experiment configuration: INI-style sections plus ``section.key=value`` overrides."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..engine import METHODS
from ..losses import IcdaConfig
from ..model import SgdConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    kind: str = "mixture"  # mixture | spurious
    num_classes: int = 10
    dim: int = 16
    separation: float = 3.0
    scale: float = 1.0
    n_per_class: int = 500
    n_test_per_class: int = 200
    imbalance_ratio: float = 1.0
    noise_kind: str = "uniform"
    noise_rate: float = 0.0
    meta_per_class: int = 0
    # spurious problem
    d_signal: int = 2
    d_spur: int = 2
    n_train: int = 4000
    n_test: int = 4000
    train_group_ratio: float = 0.8
    test_group_ratio: float = 0.1
    label_flip: float = 0.25
    signal_strength: float = 1.0
    spur_strength: float = 1.0


@dataclass
class ModelSpec:
    widths: tuple = (32, 16)
    relu_features: bool = False


@dataclass
class LossSpec:
    method: str = "icda"
    lambda0: float = 0.5
    beta: float = 0.1
    tau: float = 0.9
    diagonal: bool = False
    noise_mode: bool = False
    alpha_r: float = 0.5
    beta_r: float = 0.5
    confusion_decay: float = 0.1
    fixed_alpha: float | None = None

    def icda(self) -> IcdaConfig:
        return IcdaConfig(self.lambda0, self.beta, self.tau, self.diagonal, self.noise_mode)


@dataclass
class SgdSpec:
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = ""  # "1000:0.1,1500:0.1"

    def build(self) -> SgdConfig:
        sched = []
        for part in filter(None, (p.strip() for p in self.schedule.split(","))):
            it, mult = part.split(":")
            sched.append((int(it), float(mult)))
        return SgdConfig(self.learning_rate, self.momentum, self.weight_decay, tuple(sched))


@dataclass
class MetaSpec:
    eta2: float = 0.01
    meta_batch_size: int = 32
    omega_init: str = "uniform"  # uniform | zero
    hidden: int = 100


@dataclass
class RunSpec:
    iterations: int = 2000
    batch_size: int = 128
    seeds: tuple = (0,)
    eval_every: int = 0  # 0: once per epoch
    out: str = ""


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    loss: LossSpec = field(default_factory=LossSpec)
    sgd: SgdSpec = field(default_factory=SgdSpec)
    meta: MetaSpec = field(default_factory=MetaSpec)
    run: RunSpec = field(default_factory=RunSpec)

    def validate(self) -> "ExperimentConfig":
        m = self.loss.method
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; expected one of {', '.join(METHODS)}")
        if self.dataset.kind not in ("mixture", "spurious"):
            raise ConfigError(f"unknown dataset kind {self.dataset.kind!r}")
        if m == "meta_icda" and self.dataset.meta_per_class <= 0:
            raise ConfigError("meta_icda needs dataset.meta_per_class > 0 (a metadata split)")
        if self.dataset.kind == "spurious" and self.dataset.imbalance_ratio != 1.0:
            raise ConfigError("imbalance is only supported for the mixture dataset")
        if self.run.iterations < 0 or self.run.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        if not self.run.seeds:
            raise ConfigError("at least one seed is required")
        try:
            self.sgd.build()
            self.loss.icda()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_ini(self) -> str:
        lines = []
        for sec in dataclasses.fields(self):
            lines.append(f"[{sec.name}]")
            for f in dataclasses.fields(getattr(self, sec.name)):
                v = getattr(getattr(self, sec.name), f.name)
                lines.append(f"{f.name} = {_fmt(v)}")
            lines.append("")
        return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def _parse(value: str, current, name: str):
    value = value.strip()
    if isinstance(current, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    if isinstance(current, tuple):
        parts = [p for p in value.replace(" ", "").split(",") if p]
        return tuple(int(p) for p in parts)
    try:
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if current is None:
            return None if value.lower() == "none" else float(value)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {value!r}") from exc
    return value


def set_value(cfg: ExperimentConfig, key: str, value: str) -> None:
    """Apply ``section.key`` (or an unambiguous bare ``key``) override."""
    if "." in key:
        sec, name = key.split(".", 1)
        candidates = [(sec, name)]
    else:
        candidates = [(s.name, key) for s in dataclasses.fields(cfg)
                      if key in {f.name for f in dataclasses.fields(getattr(cfg, s.name))}]
        if len(candidates) != 1:
            raise ConfigError(f"override key {key!r} is unknown or ambiguous")
    sec, name = candidates[0]
    if not hasattr(cfg, sec) or name not in {f.name for f in dataclasses.fields(getattr(cfg, sec))}:
        raise ConfigError(f"unknown config key {key!r}")
    obj = getattr(cfg, sec)
    setattr(obj, name, _parse(value, getattr(obj, name), key))


def load_config(path=None, overrides=()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        text = Path(path).read_text()
        parser.read_string(text)
        for sec in parser.sections():
            for key, value in parser.items(sec):
                set_value(cfg, f"{sec}.{key}", value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        k, v = item.split("=", 1)
        set_value(cfg, k.strip(), v)
    return cfg
