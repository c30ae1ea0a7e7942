# cav.py
"""Concept activation vectors: unit normals of linear concept-vs-rest classifiers."""

from __future__ import annotations

import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from enum import StrEnum
from typing import NamedTuple

import numpy as np

from rankcav.exceptions import ConfigError, ShapeError, TrainingError
from rankcav.helpers import as_matrix, derive_rng
from rankcav.nn import MlpEncoder, forward
from rankcav.synth import Scene, feature_matrix

logger = logging.getLogger(__name__)

MIN_CLASS_ROWS = 10
CONVERGENCE_TOL = 1e-10


class CavLoss(StrEnum):
    HINGE = "hinge"
    LOGISTIC = "logistic"


@dataclass(frozen=True, slots=True)
class CavConfig:
    n_negatives: int = 500
    holdout_fraction: float = 0.2
    regularization: float = 1e-3
    steps: int = 2000
    learning_rate: float = 1.0
    loss: CavLoss = CavLoss.HINGE

    def __post_init__(self) -> None:
        object.__setattr__(self, "loss", CavLoss(self.loss))
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError(
                "holdout_fraction must lie in (0, 1)", context={"holdout_fraction": self.holdout_fraction}
            )
        if self.n_negatives < 1 or self.steps < 1 or self.learning_rate <= 0 or self.regularization <= 0:
            raise ConfigError("Invalid CAV classifier settings", context={"config": self})


@dataclass(frozen=True, eq=False, slots=True)
class ConceptActivations:
    concept: str
    layer: int
    activations: np.ndarray  # (n, layer width)
    scene_ids: tuple[str, ...]
    shortfall: int = 0

    def __post_init__(self) -> None:
        activations = as_matrix(self.activations, "activations")
        if activations.shape[0] != len(self.scene_ids):
            raise ShapeError(
                "One scene id per activation row",
                context={"rows": activations.shape[0], "ids": len(self.scene_ids)},
            )
        object.__setattr__(self, "activations", activations)
        object.__setattr__(self, "scene_ids", tuple(self.scene_ids))

    def __len__(self) -> int:
        return len(self.scene_ids)


@dataclass(frozen=True, eq=False, slots=True)
class Cav:
    concept: str
    layer: int
    direction: np.ndarray  # unit norm, points towards the concept
    bias: float
    holdout_accuracy: float
    seed: int = 0
    shortfall: int = 0
    train_ids: tuple[str, ...] = ()
    holdout_ids: tuple[str, ...] = ()

    def decision(self, activations: np.ndarray) -> np.ndarray:
        return np.asarray(activations) @ self.direction + self.bias


class AccuracyRow(NamedTuple):
    concept: str
    layer: int
    accuracy: float


def collect_activations(
    encoder: MlpEncoder, scenes: Sequence[Scene], layer: int, concept: str = ""
) -> ConceptActivations:
    encoder.check_layer(layer)
    if not scenes:
        raise ShapeError("No scenes to collect activations from", context={"concept": concept})
    trace = forward(encoder, feature_matrix(scenes))
    return ConceptActivations(concept, layer, trace.activations[layer], tuple(s.id for s in scenes))


def sample_negatives(
    all_concepts: Mapping[str, ConceptActivations], target_concept: str, n: int = 500, seed: int = 0
) -> ConceptActivations:
    """Uniform draw without replacement from every other concept's activations."""
    others = [acts for name, acts in all_concepts.items() if name != target_concept]
    if not others or not sum(len(acts) for acts in others):
        raise TrainingError("Empty negative pool", context={"target": target_concept})
    layers = {acts.layer for acts in others}
    if len(layers) != 1:
        raise ShapeError("Negative pool mixes layers", context={"layers": sorted(layers)})
    pool = np.vstack([acts.activations for acts in others])
    ids = [scene_id for acts in others for scene_id in acts.scene_ids]
    if len(ids) <= n:
        chosen = np.arange(len(ids))
        shortfall = n - len(ids)
        if shortfall:
            logger.warning("negative pool for %s holds %d rows, %d short", target_concept, len(ids), shortfall)
    else:
        rng = derive_rng(seed, "negatives", target_concept)
        chosen = np.sort(rng.choice(len(ids), size=n, replace=False))
        shortfall = 0
    return ConceptActivations(
        f"not-{target_concept}",
        layers.pop(),
        pool[chosen],
        tuple(ids[i] for i in chosen),
        shortfall,
    )


def _holdout(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(train, holdout) row indices; depends only on (seed, n) so roles can swap."""
    order = derive_rng(seed, "cav-holdout", n).permutation(n)
    cut = int(round(fraction * n))
    return np.sort(order[cut:]), np.sort(order[:cut])


def _sample_weights(labels: np.ndarray) -> np.ndarray:
    """Each class carries half of the total weight."""
    positive = labels > 0
    return np.where(positive, 0.5 / positive.sum(), 0.5 / (~positive).sum())


def _objective(
    weights: np.ndarray, inputs: np.ndarray, labels: np.ndarray, sample_weights: np.ndarray, config: CavConfig
) -> tuple[float, np.ndarray]:
    """Regularised weighted loss and the per-row loss derivative w.r.t. the score."""
    margins = labels * (inputs @ weights)
    match config.loss:
        case CavLoss.HINGE:
            loss = float(sample_weights @ np.maximum(0.0, 1.0 - margins))
            coefficients = -labels * sample_weights * (margins < 1.0)
        case CavLoss.LOGISTIC:
            loss = float(sample_weights @ np.logaddexp(0.0, -margins))
            coefficients = -labels * sample_weights * np.exp(-np.logaddexp(0.0, margins))
    return loss + 0.5 * config.regularization * float(weights @ weights), coefficients


def _fit_linear(inputs: np.ndarray, labels: np.ndarray, config: CavConfig) -> tuple[np.ndarray, float]:
    """Full-batch Pegasos: step lr / (lambda t), projection onto the optimum's ball, best iterate kept.

    The bias is the weight of a constant input column and is regularised with the rest.
    """
    augmented = np.hstack([inputs, np.ones((inputs.shape[0], 1))])
    sample_weights = _sample_weights(labels)
    lam = config.regularization
    loss_at_zero = 1.0 if config.loss is CavLoss.HINGE else float(np.log(2.0))
    radius = np.sqrt(2.0 * loss_at_zero / lam)

    weights = np.zeros(augmented.shape[1])
    # the zero start is never returned: its normal is undefined
    best_objective, best = np.inf, weights
    previous = np.inf
    for t in range(1, config.steps + 1):
        objective, coefficients = _objective(weights, augmented, labels, sample_weights, config)
        if t > 1 and objective < best_objective:
            best_objective, best = objective, weights
        if abs(previous - objective) <= CONVERGENCE_TOL:
            break
        previous = objective
        updated = weights - config.learning_rate / (lam * t) * (lam * weights + coefficients @ augmented)
        if (norm := float(np.linalg.norm(updated))) > radius:
            updated *= radius / norm
        weights = updated
    objective, _ = _objective(weights, augmented, labels, sample_weights, config)
    if objective < best_objective:
        best_objective, best = objective, weights
    logger.debug("CAV fit stopped at step %d, objective %.6f", t, best_objective)
    return best[:-1], float(best[-1])


def train_cav(
    positives: ConceptActivations,
    negatives: ConceptActivations,
    holdout_fraction: float = 0.2,
    seed: int = 0,
    config: CavConfig | None = None,
) -> Cav:
    """Fit a linear concept classifier and return its unit normal as the CAV.

    Rows are centred and isotropically rescaled with training statistics before
    fitting, so the direction is unchanged by a common translation of all
    activations; the hyperplane is mapped back to raw activation space.
    """
    config = config or CavConfig(holdout_fraction=holdout_fraction)
    if positives.activations.shape[1] != negatives.activations.shape[1]:
        raise ShapeError(
            "Positive and negative activations differ in width",
            context={"positives": positives.activations.shape, "negatives": negatives.activations.shape},
        )
    pos_train, pos_hold = _holdout(len(positives), holdout_fraction, seed)
    neg_train, neg_hold = _holdout(len(negatives), holdout_fraction, seed)
    if min(len(pos_train), len(neg_train)) < MIN_CLASS_ROWS or not len(pos_hold) or not len(neg_hold):
        raise TrainingError(
            "Each class needs at least 10 training rows and one holdout row",
            context={"concept": positives.concept, "positives": len(positives), "negatives": len(negatives)},
        )

    train_rows = np.vstack([positives.activations[pos_train], negatives.activations[neg_train]])
    labels = np.concatenate([np.ones(len(pos_train)), -np.ones(len(neg_train))])
    mean = train_rows.mean(axis=0)
    centred = train_rows - mean
    scale = float(np.sqrt(np.mean(np.sum(centred * centred, axis=1)))) or 1.0
    weights, bias = _fit_linear(centred / scale, labels, config)

    norm = float(np.linalg.norm(weights))
    if norm == 0.0:
        raise TrainingError("Concept classifier collapsed to a zero normal", context={"concept": positives.concept})
    direction = weights / norm
    raw_bias = bias * scale / norm - float(direction @ mean)

    holdout_rows = np.vstack([positives.activations[pos_hold], negatives.activations[neg_hold]])
    holdout_labels = np.concatenate([np.ones(len(pos_hold)), -np.ones(len(neg_hold))])
    predicted = np.where(holdout_rows @ direction + raw_bias > 0, 1.0, -1.0)
    accuracy = float(np.mean(predicted == holdout_labels))

    return Cav(
        concept=positives.concept,
        layer=positives.layer,
        direction=direction,
        bias=raw_bias,
        holdout_accuracy=accuracy,
        seed=seed,
        shortfall=negatives.shortfall,
        train_ids=tuple(positives.scene_ids[i] for i in pos_train) + tuple(negatives.scene_ids[i] for i in neg_train),
        holdout_ids=tuple(positives.scene_ids[i] for i in pos_hold) + tuple(negatives.scene_ids[i] for i in neg_hold),
    )


def learn_cavs(
    encoder: MlpEncoder,
    concept_sets: Mapping[str, Sequence[Scene]],
    layers: Iterable[int],
    config: CavConfig | None = None,
    seed: int = 0,
) -> dict[tuple[str, int], Cav]:
    """One CAV per (concept, layer), negatives drawn from the other concepts."""
    config = config or CavConfig()
    if len(concept_sets) < 2:
        raise ConfigError("CAV learning needs at least two concepts", context={"concepts": list(concept_sets)})
    cavs: dict[tuple[str, int], Cav] = {}
    for layer in layers:
        activations = {
            str(name): collect_activations(encoder, scenes, layer, str(name))
            for name, scenes in concept_sets.items()
        }
        for name, positives in activations.items():
            negatives = sample_negatives(activations, name, config.n_negatives, seed)
            cav = train_cav(positives, negatives, config.holdout_fraction, seed, config)
            cavs[name, layer] = cav
            logger.debug("CAV %s layer %d accuracy %.3f", name, layer, cav.holdout_accuracy)
    return cavs


def accuracy_table(cavs: Mapping[tuple[str, int], Cav]) -> tuple[AccuracyRow, ...]:
    return tuple(AccuracyRow(name, layer, cav.holdout_accuracy) for (name, layer), cav in cavs.items())


def concept_accuracy_by_layer(
    encoder: MlpEncoder,
    concept_sets: Mapping[str, Sequence[Scene]],
    layers: Iterable[int],
    config: CavConfig | None = None,
    seed: int = 0,
) -> tuple[AccuracyRow, ...]:
    return accuracy_table(learn_cavs(encoder, concept_sets, layers, config, seed))


def mean_accuracy(table: Iterable[AccuracyRow], layer: int) -> float:
    values = [row.accuracy for row in table if row.layer == layer]
    if not values:
        raise ShapeError("No accuracies recorded for layer", context={"layer": layer})
    return float(np.mean(values))
