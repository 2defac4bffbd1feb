"""Experiment configuration and its flat ``key = value`` file format.

A config file has up to five sections; every key is optional and unknown
keys are rejected::

    [experiment]
    seed = 7
    folds = 5
    ensemble_size = 5
    mc_samples = 50
    bootstrap = 1000
    cost_matrix = custom        # custom | linear | path to an n x n CSV table

    [generator]
    bags_per_class = 100
    ambiguity = 0.35

    [arch]
    dropout_rate = 0.5

    [train]
    epochs = 100
    loss = sosr                 # sosr | cross_entropy

    [rater]
    boundary_confusion = 0.6

Command-line overrides use ``section.key=value`` and win over file values.
The master ``experiment.seed`` drives every other seed.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Optional

from .losses import CostMatrix, LossConfig, builtin_cost_matrix, load_cost_matrix
from .model import ArchitectureConfig, TrainConfig
from .numerics import ContractError
from .synthdata import GeneratorConfig, RaterConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainSettings:
    """File-level view of :class:`TrainConfig`; the loss is named, not built."""

    epochs: int = 100
    learning_rate: float = 1e-4
    rmsprop_momentum: float = 0.5
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-7
    early_stopping_patience: int = 10
    loss: str = "sosr"

    def build(self, seed: int, cost_matrix: Optional[CostMatrix], loss: Optional[str] = None) -> TrainConfig:
        kind = loss or self.loss
        return TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            rmsprop_momentum=self.rmsprop_momentum,
            rmsprop_decay=self.rmsprop_decay,
            rmsprop_epsilon=self.rmsprop_epsilon,
            early_stopping_patience=self.early_stopping_patience,
            loss=LossConfig(kind, cost_matrix if kind == "sosr" else None),
            seed=seed,
        )


@dataclass
class ExperimentSettings:
    seed: int = 0
    folds: int = 5
    ensemble_size: int = 5
    mc_samples: int = 50
    bootstrap: int = 1000
    cost_matrix: str = "custom"
    test_fraction: float = 0.15
    curve_step: int = 1
    random_trials: int = 100
    confidence_reduce: str = "mean"
    compare_cross_entropy: bool = True
    compare_linear: bool = False
    jobs: int = 1


@dataclass
class ExperimentConfig:
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    arch: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    rater: RaterConfig = field(default_factory=RaterConfig)

    def __post_init__(self) -> None:
        e = self.experiment
        if e.folds < 2 or e.ensemble_size < 2 or e.mc_samples < 2:
            raise ConfigError("folds, ensemble_size and mc_samples must all be >= 2")
        if e.bootstrap < 100:
            raise ConfigError("bootstrap must be >= 100")
        if e.curve_step < 1 or e.random_trials < 1 or e.jobs < 1:
            raise ConfigError("curve_step, random_trials and jobs must be >= 1")
        if self.train.loss not in ("sosr", "cross_entropy"):
            raise ConfigError(f"unknown loss {self.train.loss!r}")
        # the master seed drives the data and rater streams
        self.generator.seed = e.seed
        self.rater.seed = e.seed
        if self.arch.input_dim != self.generator.feature_dim or self.arch.n_classes != self.generator.n_classes:
            self.arch = dataclasses.replace(
                self.arch, input_dim=self.generator.feature_dim, n_classes=self.generator.n_classes
            )

    @property
    def seed(self) -> int:
        return self.experiment.seed

    def cost_matrix(self, kind: Optional[str] = None) -> CostMatrix:
        spec = kind or self.experiment.cost_matrix
        if spec in ("custom", "linear"):
            return builtin_cost_matrix(spec, self.generator.n_classes)
        return load_cost_matrix(spec)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = {
    "experiment": ExperimentSettings,
    "generator": GeneratorConfig,
    "arch": ArchitectureConfig,
    "train": TrainSettings,
    "rater": RaterConfig,
}
# seeds follow experiment.seed; arch sizes follow the generator
DERIVED_KEYS = {("generator", "seed"), ("rater", "seed"), ("arch", "input_dim"), ("arch", "n_classes")}


def _parse_value(raw: str, default: Any, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _format_value(v: Any) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _apply(values: dict[str, dict[str, Any]], section: str, key: str, raw: str, where: str) -> None:
    if section not in SECTIONS:
        raise ConfigError(f"{where}: unknown section [{section}]")
    defaults = {f.name: f.default for f in fields(SECTIONS[section])}
    if key not in defaults or (section, key) in DERIVED_KEYS:
        raise ConfigError(f"{where}: unknown key {section}.{key}")
    values.setdefault(section, {})[key] = _parse_value(raw, defaults[key], where)


def build_config(
    path: Optional[str | Path] = None, overrides: Iterable[str] = (), seed: Optional[int] = None
) -> ExperimentConfig:
    """Read an optional config file, then apply ``section.key=value`` overrides."""
    values: dict[str, dict[str, Any]] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
        parser.optionxform = str
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(values, section, key, raw, str(path))
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        _apply(values, section, key, raw, "override")
    if seed is not None:
        values.setdefault("experiment", {})["seed"] = int(seed)
    try:
        parts = {name: cls(**values.get(name, {})) for name, cls in SECTIONS.items()}
        return ExperimentConfig(**parts)
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: ExperimentConfig) -> str:
    """Render a config back into the file format (round-trips through :func:`build_config`)."""
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        section = getattr(cfg, name)
        for f in fields(section):
            if (name, f.name) in DERIVED_KEYS:
                continue
            lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)
