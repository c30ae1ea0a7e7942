# config.py
"""Run configuration: typed sections loaded from an INI file.

Precedence is built-in defaults, then the config file, then the
`RANKCAV_OUT` environment variable for the output root, then CLI flags
(applied by the CLI with `dataclasses.replace`).
"""

from __future__ import annotations

import configparser
import os
from collections.abc import Mapping
from dataclasses import dataclass, field, fields, replace
from enum import StrEnum
from pathlib import Path
from typing import Any

from rankcav.cav import CavConfig, CavLoss
from rankcav.exceptions import ConfigError
from rankcav.synth import (
    DEFAULT_WEIGHTS,
    MIN_CONCEPT_SCENES,
    MIN_GRID_SIZE,
    MIN_TASK_SCENES,
    Concept,
    GroundTruthModel,
    Split,
)
from rankcav.tcav import IgConfig, Method
from rankcav.training import TrainConfig

ENV_OUT = "RANKCAV_OUT"
DEFAULT_OUT = Path("runs")


@dataclass(frozen=True, slots=True)
class DatasetConfig:
    n: int = 2000
    grid_size: int = 8
    concept_share: float = 0.5
    noise_std: float = 0.05
    nonlinear: bool = False
    weights: tuple[float, ...] = DEFAULT_WEIGHTS
    quantile_count: int = 5
    split_fractions: tuple[float, ...] = (0.64, 0.16, 0.20)

    def __post_init__(self) -> None:
        if self.n < MIN_TASK_SCENES:
            raise ConfigError(
                "Task dataset too small for stratified splitting",
                context={"n": self.n, "minimum": MIN_TASK_SCENES},
            )
        if self.grid_size < MIN_GRID_SIZE:
            raise ConfigError("grid_size below the minimum", context={"grid_size": self.grid_size})
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError(
                "split_fractions must be three values summing to 1",
                context={"split_fractions": self.split_fractions},
            )
        _ = self.model

    @property
    def model(self) -> GroundTruthModel:
        return GroundTruthModel(self.weights, self.noise_std, self.nonlinear)


@dataclass(frozen=True, slots=True)
class ConceptConfig:
    n_per_concept: int = 200
    n_negatives: int = 500
    holdout_fraction: float = 0.2
    regularization: float = 1e-3
    steps: int = 2000
    learning_rate: float = 1.0
    loss: CavLoss = CavLoss.HINGE
    concepts: tuple[Concept, ...] = tuple(Concept)

    def __post_init__(self) -> None:
        object.__setattr__(self, "concepts", tuple(Concept(c) for c in self.concepts))
        if self.n_per_concept < MIN_CONCEPT_SCENES:
            raise ConfigError("n_per_concept below the minimum", context={"n_per_concept": self.n_per_concept})
        if len(self.concepts) < 2:
            raise ConfigError("At least two concepts are needed", context={"concepts": self.concepts})
        _ = self.cav

    @property
    def cav(self) -> CavConfig:
        return CavConfig(
            n_negatives=self.n_negatives,
            holdout_fraction=self.holdout_fraction,
            regularization=self.regularization,
            steps=self.steps,
            learning_rate=self.learning_rate,
            loss=self.loss,
        )


@dataclass(frozen=True, slots=True)
class TcavConfig:
    layers: tuple[int, ...] | None = None  # None means every encoder layer
    methods: tuple[Method, ...] = (Method.PLAIN, Method.IG)
    ig_steps: int = 50
    bins: int = 5
    split: Split = Split.TEST
    cav_seeds: int = 1  # CAV retrainings per concept and layer behind the score mean and std

    def __post_init__(self) -> None:
        object.__setattr__(self, "methods", tuple(Method(m) for m in self.methods))
        object.__setattr__(self, "split", Split(self.split))
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(int(layer) for layer in self.layers))
            if not self.layers:
                raise ConfigError("An explicit layer list cannot be empty")
        if not self.methods:
            raise ConfigError("At least one sensitivity method is needed")
        if self.bins < 2:
            raise ConfigError("bins must be >= 2", context={"bins": self.bins})
        if self.cav_seeds < 1:
            raise ConfigError("cav_seeds must be >= 1", context={"cav_seeds": self.cav_seeds})
        _ = self.ig

    @property
    def ig(self) -> IgConfig:
        return IgConfig(steps=self.ig_steps)

    def resolve_layers(self, depth: int) -> tuple[int, ...]:
        layers = tuple(range(depth)) if self.layers is None else self.layers
        if bad := [layer for layer in layers if not 0 <= layer < depth]:
            raise ConfigError("Layer index out of range", context={"layers": bad, "depth": depth})
        return layers


@dataclass(frozen=True, slots=True)
class RunConfig:
    seed: int = 0
    out: Path = DEFAULT_OUT
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    concepts: ConceptConfig = field(default_factory=ConceptConfig)
    tcav: TcavConfig = field(default_factory=TcavConfig)

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ConfigError("seed must be non-negative", context={"seed": self.seed})
        object.__setattr__(self, "out", Path(self.out))
        object.__setattr__(self, "train", replace(self.train, seed=self.seed))

    def with_overrides(self, **overrides: Any) -> RunConfig:
        """Replace top-level fields, skipping overrides that are None."""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


_SECTIONS: dict[str, type] = {
    "dataset": DatasetConfig,
    "train": TrainConfig,
    "concepts": ConceptConfig,
    "tcav": TcavConfig,
}
_RUN_KEYS = {"seed": 0, "out": DEFAULT_OUT}


def _boolean(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
        raise ValueError(f"not a boolean: {text!r}")
    return configparser.ConfigParser.BOOLEAN_STATES[lowered]


def _convert(text: str, default: Any) -> Any:
    match default:
        case bool():
            return _boolean(text)
        case StrEnum():
            return type(default)(text.strip())
        case int():
            return int(text)
        case float():
            return float(text)
        case Path():
            return Path(text.strip())
        case tuple() if default:
            return tuple(_convert(item, default[0]) for item in text.split(",") if item.strip())
        case tuple() | None:
            return tuple(int(item) for item in text.split(",") if item.strip())
    return text.strip()


def _section_values(name: str, section: Mapping[str, str], cls: type) -> dict[str, Any]:
    known = {f.name: f for f in fields(cls) if not (cls is TrainConfig and f.name == "seed")}
    values = {}
    for key, text in section.items():
        if key not in known:
            raise ConfigError(f"Unknown key in [{name}]", context={"key": key, "known": sorted(known)})
        default = getattr(cls(), key)
        if key == "layers" and text.strip().lower() == "all":
            values[key] = None
            continue
        try:
            values[key] = _convert(text, default)
        except ValueError as exc:
            raise ConfigError(f"Bad value in [{name}]", context={"key": key, "value": text}) from exc
    return values


def parse_config(text: str, environ: Mapping[str, str] | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("Unreadable config file", context={"error": str(exc)}) from exc

    if unknown := [s for s in parser.sections() if s != "run" and s not in _SECTIONS]:
        raise ConfigError("Unknown config sections", context={"sections": unknown})
    run: dict[str, Any] = {}
    if parser.has_section("run"):
        for key, text_value in parser["run"].items():
            if key not in _RUN_KEYS:
                raise ConfigError("Unknown key in [run]", context={"key": key, "known": sorted(_RUN_KEYS)})
            try:
                run[key] = _convert(text_value, _RUN_KEYS[key])
            except ValueError as exc:
                raise ConfigError("Bad value in [run]", context={"key": key, "value": text_value}) from exc
    environ = os.environ if environ is None else environ
    if env_out := environ.get(ENV_OUT):
        run["out"] = Path(env_out)
    sections = {
        name: cls(**_section_values(name, parser[name], cls)) if parser.has_section(name) else cls()
        for name, cls in _SECTIONS.items()
    }
    return RunConfig(**run, **sections)


def load_config(path: Path | str | None = None, environ: Mapping[str, str] | None = None) -> RunConfig:
    if path is None:
        return parse_config("", environ)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("Cannot read config file", context={"path": str(path)}) from exc
    return parse_config(text, environ)
