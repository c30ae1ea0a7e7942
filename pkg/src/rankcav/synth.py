# synth.py
"""Synthetic land-cover scenes with a known composition -> score ground truth.

A scene is an H x W grid of cells; every cell belongs to one land-cover class
and carries an RGB triple drawn around that class's mean colour. Concept sets
mirror the land-cover composition table used for concept datasets: pure
classes at 90-100 %, and residential mixes of buildings with vegetation or
agriculture.
"""

from __future__ import annotations

import hashlib
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from enum import IntEnum, StrEnum
from typing import NamedTuple

import numpy as np

from rankcav.exceptions import ConfigError, InfeasibleSpecError
from rankcav.helpers import derive_rng, largest_remainder

logger = logging.getLogger(__name__)

MIN_GRID_SIZE = 4
MIN_TASK_SCENES = 100
MIN_CONCEPT_SCENES = 10
COLOR_STD = 0.05


class LandCoverClass(IntEnum):
    WATER = 0
    VEGETATION = 1
    AGRICULTURE = 2
    IMPERVIOUS_SURFACE = 3
    BUILDINGS = 4
    OTHER = 5

    @property
    def label(self) -> str:
        return _CLASS_LABELS[self]


_CLASS_LABELS = {
    LandCoverClass.WATER: "Water",
    LandCoverClass.VEGETATION: "Vegetation",
    LandCoverClass.AGRICULTURE: "Agriculture",
    LandCoverClass.IMPERVIOUS_SURFACE: "ImperviousSurface",
    LandCoverClass.BUILDINGS: "Buildings",
    LandCoverClass.OTHER: "Other",
}

N_CLASSES = len(LandCoverClass)

# Mean RGB per class. Every pair differs by >= 0.2 in at least one channel;
# the green channel is an affine image of the default ground-truth weights.
CLASS_COLORS = np.array(
    [
        [0.10, 0.65, 0.90],  # water
        [0.15, 0.85, 0.20],  # vegetation
        [0.75, 0.53, 0.25],  # agriculture
        [0.55, 0.13, 0.55],  # impervious surface
        [0.95, 0.33, 0.50],  # buildings
        [0.40, 0.45, 0.10],  # other
    ]
)


class Split(StrEnum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"
    UNASSIGNED = "unassigned"


class Concept(StrEnum):
    WATER = "Water"
    VEGETATION = "Vegetation"
    AGRICULTURE = "Agriculture"
    IMPERVIOUS_SURFACE = "ImperviousSurface"
    SPARSE_RESIDENTIAL = "SparseResidential"
    MEDIUM_RESIDENTIAL = "MediumResidential"
    DENSE_RESIDENTIAL = "DenseResidential"


@dataclass(frozen=True, eq=False, slots=True)
class CompositionProfile:
    fractions: np.ndarray  # indexed by LandCoverClass

    def __post_init__(self) -> None:
        fractions = np.asarray(self.fractions, dtype=np.float64)
        if fractions.shape != (N_CLASSES,):
            raise ConfigError(
                "A composition needs one fraction per land-cover class",
                context={"shape": fractions.shape},
            )
        if not np.all(np.isfinite(fractions)) or np.any(fractions < -1e-12) or np.any(fractions > 1 + 1e-12):
            raise ConfigError("Fractions must lie in [0, 1]", context={"fractions": fractions.tolist()})
        if abs(fractions.sum() - 1.0) > 1e-9:
            raise ConfigError("Fractions must sum to 1", context={"sum": float(fractions.sum())})
        object.__setattr__(self, "fractions", np.clip(fractions, 0.0, 1.0))

    def __getitem__(self, cls: LandCoverClass) -> float:
        return float(self.fractions[cls])

    @classmethod
    def from_mapping(cls, mapping: dict[LandCoverClass, float]) -> CompositionProfile:
        fractions = np.zeros(N_CLASSES)
        for land_cover, value in mapping.items():
            fractions[land_cover] = value
        return cls(fractions)

    def as_dict(self) -> dict[str, float]:
        return {c.label: float(self.fractions[c]) for c in LandCoverClass}


class ClassRange(NamedTuple):
    classes: tuple[LandCoverClass, ...]
    lo: float
    hi: float


@dataclass(frozen=True, slots=True)
class ConceptSpec:
    name: Concept
    ranges: tuple[ClassRange, ...]

    def __post_init__(self) -> None:
        seen: set[LandCoverClass] = set()
        for class_range in self.ranges:
            if not 0.0 <= class_range.lo <= class_range.hi <= 1.0:
                raise InfeasibleSpecError(
                    "Range bounds must satisfy 0 <= lo <= hi <= 1",
                    context={"concept": self.name, "range": class_range},
                )
            if seen & set(class_range.classes) or not class_range.classes:
                raise InfeasibleSpecError(
                    "Ranges must cover disjoint, non-empty class groups",
                    context={"concept": self.name},
                )
            seen |= set(class_range.classes)
        total_lo = sum(r.lo for r in self.ranges)
        total_hi = sum(r.hi for r in self.ranges)
        if total_lo > 1.0 + 1e-12 or (not self.free_classes and total_hi < 1.0 - 1e-12):
            raise InfeasibleSpecError(
                "Composition ranges admit no profile summing to 1",
                context={"concept": self.name, "sum_lo": total_lo, "sum_hi": total_hi},
            )

    @property
    def free_classes(self) -> tuple[LandCoverClass, ...]:
        bound = {c for r in self.ranges for c in r.classes}
        return tuple(c for c in LandCoverClass if c not in bound)

    def admits(self, profile: CompositionProfile, tol: float = 1e-9) -> bool:
        """True when every range's summed fraction lies inside its bounds."""
        return all(
            r.lo - tol <= sum(profile[c] for c in r.classes) <= r.hi + tol for r in self.ranges
        )


_GREEN = (LandCoverClass.VEGETATION, LandCoverClass.AGRICULTURE)


def _pure(concept: Concept, land_cover: LandCoverClass) -> ConceptSpec:
    return ConceptSpec(concept, (ClassRange((land_cover,), 0.90, 1.00),))


CONCEPT_SPECS: dict[Concept, ConceptSpec] = {
    Concept.WATER: _pure(Concept.WATER, LandCoverClass.WATER),
    Concept.VEGETATION: _pure(Concept.VEGETATION, LandCoverClass.VEGETATION),
    Concept.AGRICULTURE: _pure(Concept.AGRICULTURE, LandCoverClass.AGRICULTURE),
    Concept.IMPERVIOUS_SURFACE: _pure(Concept.IMPERVIOUS_SURFACE, LandCoverClass.IMPERVIOUS_SURFACE),
    Concept.SPARSE_RESIDENTIAL: ConceptSpec(
        Concept.SPARSE_RESIDENTIAL,
        (ClassRange((LandCoverClass.BUILDINGS,), 0.10, 0.30), ClassRange(_GREEN, 0.70, 0.90)),
    ),
    Concept.MEDIUM_RESIDENTIAL: ConceptSpec(
        Concept.MEDIUM_RESIDENTIAL,
        (ClassRange((LandCoverClass.BUILDINGS,), 0.40, 0.60), ClassRange(_GREEN, 0.40, 0.60)),
    ),
    Concept.DENSE_RESIDENTIAL: _pure(Concept.DENSE_RESIDENTIAL, LandCoverClass.BUILDINGS),
}

DEFAULT_WEIGHTS = (0.5, 1.0, 0.2, -0.8, -0.3, 0.0)
NONLINEAR_SCALE = 0.5
NONLINEAR_SHARPNESS = 4.0


@dataclass(frozen=True, slots=True)
class GroundTruthModel:
    weights: tuple[float, ...] = DEFAULT_WEIGHTS
    noise_std: float = 0.05
    nonlinear: bool = False

    def __post_init__(self) -> None:
        weights = tuple(float(w) for w in self.weights)
        if len(weights) != N_CLASSES or not all(math.isfinite(w) for w in weights):
            raise ConfigError("Ground truth needs one finite weight per class", context={"weights": weights})
        if not self.noise_std >= 0:
            raise ConfigError("noise_std must be >= 0", context={"noise_std": self.noise_std})
        object.__setattr__(self, "weights", weights)

    @property
    def directions(self) -> dict[LandCoverClass, int]:
        """Sign of each class weight: the oracle for concept-direction tests."""
        return {c: int(np.sign(self.weights[c])) for c in LandCoverClass}


@dataclass(frozen=True, eq=False, slots=True)
class Scene:
    id: str
    grid: np.ndarray  # (H*W, 3), row-major cells, values in [0, 1]
    cells: np.ndarray  # (H*W,) land-cover class per cell
    shape: tuple[int, int]
    composition: CompositionProfile
    target: float | None = None
    split: Split = field(default=Split.UNASSIGNED)

    @property
    def features(self) -> np.ndarray:
        return self.grid.ravel()


def _generator(seed: int | np.random.Generator) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _split_mass(total: float, parts: int, rng: np.random.Generator) -> np.ndarray:
    if parts == 1:
        return np.array([total])
    return total * rng.dirichlet(np.ones(parts))


def _split_cells(total: int, parts: int, rng: np.random.Generator) -> np.ndarray:
    if parts == 1:
        return np.array([total])
    return rng.multinomial(total, rng.dirichlet(np.ones(parts)))


def sample_profile(
    spec: ConceptSpec, seed: int | np.random.Generator, *, cells: int | None = None
) -> CompositionProfile:
    """Draw a composition inside the concept's ranges.

    Range totals are drawn one after the other with bounds tightened so the
    remaining ranges stay satisfiable; mass inside a multi-class range and the
    leftover mass over unbound classes is split with a flat Dirichlet. With
    `cells` given the draw happens in whole cells, so a grid of that many
    cells realises the profile exactly.
    """
    rng = _generator(seed)
    free = spec.free_classes
    if cells is None:
        lows = [r.lo for r in spec.ranges]
        highs = [r.hi for r in spec.ranges]
        remaining: float = 1.0
    else:
        lows = [math.ceil(r.lo * cells - 1e-9) for r in spec.ranges]
        highs = [math.floor(r.hi * cells + 1e-9) for r in spec.ranges]
        remaining = cells

    totals = []
    for index in range(len(spec.ranges)):
        upper = min(highs[index], remaining - sum(lows[index + 1 :]))
        lower = lows[index] if free else max(lows[index], remaining - sum(highs[index + 1 :]))
        if lower > upper + 1e-12:
            raise InfeasibleSpecError(
                "Concept ranges cannot be realised" + (" on this grid" if cells else ""),
                context={"concept": spec.name, "cells": cells, "range": index},
            )
        if cells is None:
            total = rng.uniform(lower, upper) if upper > lower else lower
        else:
            total = int(rng.integers(lower, upper + 1)) if upper > lower else int(lower)
        totals.append(total)
        remaining -= total

    amounts = np.zeros(N_CLASSES)
    split = _split_mass if cells is None else _split_cells
    for class_range, total in zip(spec.ranges, totals):
        amounts[list(class_range.classes)] += split(total, len(class_range.classes), rng)
    if free and remaining > 0:
        amounts[list(free)] += split(remaining, len(free), rng)

    if cells is not None:
        return CompositionProfile(amounts / cells)
    return CompositionProfile(amounts / amounts.sum())


def render_scene(
    profile: CompositionProfile,
    seed: int | np.random.Generator,
    grid_size: int = 8,
    *,
    scene_id: str = "scene",
) -> Scene:
    """Assign cells to classes (largest-remainder rounding), colour them, min-max normalise."""
    if grid_size < MIN_GRID_SIZE:
        raise InfeasibleSpecError(
            "Grid too small to realise a composition",
            context={"grid_size": grid_size, "minimum": MIN_GRID_SIZE},
        )
    rng = _generator(seed)
    n_cells = grid_size * grid_size
    counts = largest_remainder(profile.fractions, n_cells)
    cells = rng.permutation(np.repeat(np.arange(N_CLASSES), counts))
    colors = CLASS_COLORS[cells] + rng.normal(0.0, COLOR_STD, size=(n_cells, 3))
    low, high = colors.min(), colors.max()
    grid = (colors - low) / (high - low) if high > low else np.zeros_like(colors)
    return Scene(
        id=scene_id,
        grid=grid,
        cells=cells,
        shape=(grid_size, grid_size),
        composition=CompositionProfile(counts / n_cells),
    )


def ground_truth_score(
    model: GroundTruthModel, profile: CompositionProfile, seed: int | np.random.Generator
) -> float:
    value = float(np.dot(model.weights, profile.fractions))
    if model.nonlinear:
        veg = profile[LandCoverClass.VEGETATION]
        value += NONLINEAR_SCALE * math.tanh(NONLINEAR_SHARPNESS * (veg - 0.5))
    if model.noise_std > 0:
        value += float(_generator(seed).normal(0.0, model.noise_std))
    return value


def _random_profile(rng: np.random.Generator) -> CompositionProfile:
    return CompositionProfile(rng.dirichlet(np.ones(N_CLASSES)))


def build_task_dataset(
    n: int,
    model: GroundTruthModel,
    seed: int,
    *,
    grid_size: int = 8,
    concept_share: float = 0.5,
) -> list[Scene]:
    """n scenes drawn from a mixture of the concept specs and flat-Dirichlet profiles.

    Each scene uses its own stream derived from (seed, index); targets are
    scored on the realised cell composition.
    """
    if n < MIN_TASK_SCENES:
        raise ConfigError(
            "Task dataset too small for stratified splitting",
            context={"n": n, "minimum": MIN_TASK_SCENES},
        )
    if not 0.0 <= concept_share <= 1.0:
        raise ConfigError("concept_share must lie in [0, 1]", context={"concept_share": concept_share})
    concepts = list(Concept)
    n_cells = grid_size * grid_size
    scenes = []
    for index in range(n):
        rng = derive_rng(seed, "task", index)
        if rng.random() < concept_share:
            spec = CONCEPT_SPECS[concepts[int(rng.integers(len(concepts)))]]
            profile = sample_profile(spec, rng, cells=n_cells)
        else:
            profile = _random_profile(rng)
        scene = render_scene(profile, rng, grid_size, scene_id=f"scene-{index:05d}")
        scenes.append(replace(scene, target=ground_truth_score(model, scene.composition, rng)))
    logger.info("Generated %d task scenes (seed=%d, grid=%dx%d)", n, seed, grid_size, grid_size)
    return scenes


def stratified_split(
    dataset: Sequence[Scene],
    quantile_count: int = 5,
    fractions: tuple[float, float, float] = (0.64, 0.16, 0.20),
    seed: int = 0,
) -> list[Scene]:
    """Tag scenes train/val/test independently inside each target-quantile bin.

    Bins are equal-count slices of the target ranking (stable on ties); bin
    shares are rounded by largest remainder.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(
            "Split fractions must be three non-negative values summing to 1", context={"fractions": fractions}
        )
    if quantile_count < 1:
        raise ConfigError("quantile_count must be positive", context={"quantile_count": quantile_count})
    if len(dataset) < quantile_count * 5:
        raise ConfigError(
            "Dataset too small for the requested quantile count",
            context={"n": len(dataset), "quantile_count": quantile_count},
        )
    if any(scene.target is None for scene in dataset):
        raise ConfigError("Every scene needs a target before splitting")

    targets = np.array([scene.target for scene in dataset])
    rng = np.random.default_rng(seed)
    tags = [Split.UNASSIGNED] * len(dataset)
    for members in np.array_split(np.argsort(targets, kind="stable"), quantile_count):
        members = rng.permutation(members)
        sizes = largest_remainder(fractions, len(members))
        for split, chunk in zip((Split.TRAIN, Split.VAL, Split.TEST), np.split(members, np.cumsum(sizes)[:-1])):
            for index in chunk:
                tags[index] = split
    return [replace(scene, split=tag) for scene, tag in zip(dataset, tags)]


def build_concept_set(
    spec: ConceptSpec, n: int, seed: int, *, grid_size: int = 8
) -> list[Scene]:
    """n untargeted scenes whose cell compositions lie inside the concept's ranges."""
    if n < MIN_CONCEPT_SCENES:
        raise ConfigError(
            "Concept sets need at least 10 scenes",
            context={"concept": spec.name, "n": n},
        )
    n_cells = grid_size * grid_size
    scenes = []
    for index in range(n):
        rng = derive_rng(seed, "concept", spec.name.value, index)
        profile = sample_profile(spec, rng, cells=n_cells)
        scenes.append(render_scene(profile, rng, grid_size, scene_id=f"{spec.name.value}-{index:04d}"))
    return scenes


def build_concept_sets(
    n: int, seed: int, *, grid_size: int = 8, concepts: Iterable[Concept] = tuple(Concept)
) -> dict[Concept, list[Scene]]:
    sets = {c: build_concept_set(CONCEPT_SPECS[c], n, seed, grid_size=grid_size) for c in concepts}
    logger.info("Generated %d concept sets of %d scenes", len(sets), n)
    return sets


def in_split(dataset: Iterable[Scene], split: Split | str) -> list[Scene]:
    split = Split(split)
    return [scene for scene in dataset if scene.split == split]


def feature_matrix(scenes: Sequence[Scene]) -> np.ndarray:
    if not scenes:
        return np.zeros((0, 0))
    return np.stack([scene.features for scene in scenes])


def targets_of(scenes: Sequence[Scene]) -> np.ndarray:
    if any(scene.target is None for scene in scenes):
        raise ConfigError("Scenes without targets", context={"ids": [s.id for s in scenes if s.target is None][:5]})
    return np.array([scene.target for scene in scenes], dtype=np.float64)


def dataset_digest(scenes: Iterable[Scene]) -> str:
    digest = hashlib.sha256()
    for scene in scenes:
        digest.update(scene.id.encode())
        digest.update(str(scene.split).encode())
        digest.update(repr(scene.target).encode())
        digest.update(np.ascontiguousarray(scene.grid, dtype="<f8").tobytes())
    return digest.hexdigest()
