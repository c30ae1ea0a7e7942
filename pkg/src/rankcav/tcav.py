# tcav.py
"""Conceptual sensitivities, integrated gradients, TCAV scores and alignment.

Sensitivities are directional derivatives of the head output with respect to
a layer's activations along a CAV. The integrated-gradients variant averages
those gradients along the straight path from the zero-input baseline's
activations to the instance's, using the midpoint rule, and scales by the
displacement before projecting onto the CAV.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace
from enum import StrEnum
from typing import NamedTuple

import numpy as np

from rankcav.cav import Cav
from rankcav.exceptions import ConfigError, ShapeError, UndefinedMetricError
from rankcav.helpers import as_matrix
from rankcav.nn import forward, grads_at_activations, grads_wrt_layer
from rankcav.synth import Scene, feature_matrix
from rankcav.training import TrainedPipeline

logger = logging.getLogger(__name__)


class Method(StrEnum):
    PLAIN = "plain"
    IG = "ig"


@dataclass(frozen=True, slots=True)
class IgConfig:
    steps: int = 50
    baseline: str = "zero"

    def __post_init__(self) -> None:
        if self.steps < 2:
            raise ConfigError("Integrated gradients need at least two steps", context={"steps": self.steps})
        if self.baseline != "zero":
            raise ConfigError("Only the zero-input baseline is supported", context={"baseline": self.baseline})


@dataclass(frozen=True, slots=True)
class SensitivityRecord:
    scene_id: str
    concept: str
    layer: int
    method: Method
    value: float
    label: float
    normalized: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", Method(self.method))
        if not np.isfinite(self.value):
            raise ShapeError("Sensitivity must be finite", context={"scene_id": self.scene_id, "value": self.value})


@dataclass(frozen=True, slots=True)
class TcavScore:
    concept: str
    layer: int
    method: Method
    positive: int
    n: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", Method(self.method))
        if not 0 <= self.positive <= self.n or self.n < 1:
            raise ShapeError("Invalid positive count", context={"positive": self.positive, "n": self.n})

    @property
    def score(self) -> float:
        return self.positive / self.n


class MeanTcav(NamedTuple):
    concept: str
    layer: int
    method: Method
    mean: float
    std: float
    runs: int


@dataclass(frozen=True, slots=True)
class AlignmentRecord:
    scene_id: str
    label: float
    concepts: tuple[str, ...]
    cosines: tuple[float, ...]
    normalized: tuple[float, ...]
    best: str | None  # None when the embedding is zero


class ProfileRow(NamedTuple):
    bin: int
    lower: float
    upper: float
    mean: float  # nan for an empty bin
    count: int


def _check_cav(pipeline: TrainedPipeline, cav: Cav) -> None:
    pipeline.encoder.check_layer(cav.layer)
    width = pipeline.encoder.layers[cav.layer].out_dim
    if np.shape(cav.direction) != (width,):
        raise ShapeError(
            "CAV does not live in this layer's activation space",
            context={"concept": cav.concept, "layer": cav.layer, "width": width, "cav": np.shape(cav.direction)},
        )


def integrated_gradients(pipeline: TrainedPipeline, batch, layer: int, ig_config: IgConfig | None = None) -> np.ndarray:
    """Rows of activation-space IG attributions for a batch of input rows."""
    ig_config = ig_config or IgConfig()
    encoder = pipeline.encoder
    encoder.check_layer(layer)
    batch = as_matrix(batch, "batch")
    activations = forward(encoder, batch).activations[layer]
    baseline = forward(encoder, np.zeros((1, encoder.input_dim))).activations[layer]
    displacement = activations - baseline
    total = np.zeros_like(activations)
    for t in range(1, ig_config.steps + 1):
        alpha = (t - 0.5) / ig_config.steps
        total += grads_at_activations(encoder, pipeline.head, baseline + alpha * displacement, layer)
    return displacement * total / ig_config.steps


def integrated_gradients_layer(
    pipeline: TrainedPipeline, scene: Scene, layer: int, ig_config: IgConfig | None = None
) -> np.ndarray:
    return integrated_gradients(pipeline, scene.features[None, :], layer, ig_config)[0]


def layer_attributions(
    pipeline: TrainedPipeline,
    scenes: Sequence[Scene],
    layer: int,
    method: Method | str = Method.PLAIN,
    ig_config: IgConfig | None = None,
) -> np.ndarray:
    batch = feature_matrix(scenes)
    match Method(method):
        case Method.PLAIN:
            return grads_wrt_layer(pipeline.encoder, pipeline.head, batch, layer)
        case Method.IG:
            return integrated_gradients(pipeline, batch, layer, ig_config)


def project_attributions(
    scenes: Sequence[Scene], attributions: np.ndarray, cav: Cav, method: Method | str
) -> list[SensitivityRecord]:
    """Records from precomputed layer attributions, so one pass serves every CAV of a layer."""
    attributions = as_matrix(attributions, "attributions")
    if attributions.shape != (len(scenes), np.shape(cav.direction)[0]):
        raise ShapeError(
            "Attributions do not match the scenes and CAV",
            context={"attributions": attributions.shape, "scenes": len(scenes), "cav": np.shape(cav.direction)},
        )
    values = attributions @ cav.direction
    return [
        SensitivityRecord(
            scene.id,
            cav.concept,
            cav.layer,
            Method(method),
            float(value),
            float("nan") if scene.target is None else scene.target,
        )
        for scene, value in zip(scenes, values)
    ]


def sensitivities(
    pipeline: TrainedPipeline,
    scenes: Sequence[Scene],
    cav: Cav,
    method: Method | str = Method.PLAIN,
    ig_config: IgConfig | None = None,
) -> list[SensitivityRecord]:
    """One record per scene, in scene order."""
    _check_cav(pipeline, cav)
    if not scenes:
        return []
    return project_attributions(scenes, layer_attributions(pipeline, scenes, cav.layer, method, ig_config), cav, method)


def sensitivity_plain(pipeline: TrainedPipeline, scene: Scene, cav: Cav) -> SensitivityRecord:
    return sensitivities(pipeline, [scene], cav, Method.PLAIN)[0]


def sensitivity_ig(
    pipeline: TrainedPipeline, scene: Scene, cav: Cav, ig_config: IgConfig | None = None
) -> SensitivityRecord:
    return sensitivities(pipeline, [scene], cav, Method.IG, ig_config)[0]


def tcav_score(records: Sequence[SensitivityRecord]) -> TcavScore:
    """Fraction of strictly positive sensitivities; zeros count as non-positive."""
    if not records:
        raise UndefinedMetricError("TCAV score of an empty instance set")
    keys = {(r.concept, r.layer, r.method) for r in records}
    if len(keys) != 1:
        raise ShapeError("Records mix concepts, layers or methods", context={"groups": sorted(map(str, keys))})
    concept, layer, method = keys.pop()
    positive = sum(1 for r in records if r.value > 0.0)
    return TcavScore(concept, layer, method, positive, len(records))


def group_records(records: Iterable[SensitivityRecord]) -> dict[tuple[str, int, Method], list[SensitivityRecord]]:
    groups: dict[tuple[str, int, Method], list[SensitivityRecord]] = {}
    for record in records:
        groups.setdefault((record.concept, record.layer, record.method), []).append(record)
    return groups


def mean_tcav_score(scores: Sequence[TcavScore]) -> MeanTcav:
    """Mean and population std of one concept/layer/method score over repeated runs."""
    if not scores:
        raise UndefinedMetricError("No TCAV scores to average")
    keys = {(s.concept, s.layer, s.method) for s in scores}
    if len(keys) != 1:
        raise ShapeError("Scores mix concepts, layers or methods", context={"groups": sorted(map(str, keys))})
    values = np.array([s.score for s in scores])
    concept, layer, method = keys.pop()
    return MeanTcav(concept, layer, method, float(values.mean()), float(values.std()), len(scores))


def normalize_values(values) -> np.ndarray:
    """Separate min-max scaling of negatives onto [-1, 0] and positives onto [0, 1].

    Zeros stay 0. A sign group whose values are all equal (including a single
    value) maps to -1 or 1.
    """
    values = np.asarray(values, dtype=np.float64)
    normalized = np.zeros_like(values)
    negative = values < 0
    positive = values > 0
    if negative.any():
        low, high = values[negative].min(), values[negative].max()
        normalized[negative] = (values[negative] - high) / (high - low) if high > low else -1.0
    if positive.any():
        low, high = values[positive].min(), values[positive].max()
        normalized[positive] = (values[positive] - low) / (high - low) if high > low else 1.0
    return normalized


def normalize_magnitudes(records: Sequence[SensitivityRecord]) -> list[SensitivityRecord]:
    normalized = normalize_values([r.value for r in records])
    return [replace(r, normalized=float(n)) for r, n in zip(records, normalized)]


def align_instances(
    embeddings,
    cavs: Sequence[Cav],
    scene_ids: Sequence[str] | None = None,
    labels: Sequence[float] | None = None,
) -> list[AlignmentRecord]:
    """Best concept per instance by cosine similarity, each concept's column scaled to unit L2 norm.

    Ties go to the earlier CAV in `cavs`. A zero embedding gets nan cosines and no best concept;
    the other instances are unaffected.
    """
    embeddings = as_matrix(embeddings, "embeddings")
    if not cavs:
        raise ShapeError("Alignment needs at least one CAV")
    layers = {cav.layer for cav in cavs}
    if len(layers) != 1:
        raise ShapeError("CAVs come from different layers", context={"layers": sorted(layers)})
    directions = np.stack([np.asarray(cav.direction, dtype=np.float64) for cav in cavs], axis=1)
    if directions.shape[0] != embeddings.shape[1]:
        raise ShapeError(
            "CAV width does not match the embeddings",
            context={"cav": directions.shape[0], "embeddings": embeddings.shape[1]},
        )
    n = embeddings.shape[0]
    scene_ids = list(scene_ids) if scene_ids is not None else [str(i) for i in range(n)]
    labels = list(labels) if labels is not None else [float("nan")] * n

    norms = np.linalg.norm(embeddings, axis=1)
    defined = norms > 0.0
    if not defined.all():
        logger.warning(
            "Cosine similarity is undefined for %d zero embeddings, first %s",
            int((~defined).sum()),
            scene_ids[int(np.flatnonzero(~defined)[0])],
        )
    cosines = np.full((n, len(cavs)), np.nan)
    cosines[defined] = np.clip(
        (embeddings[defined] / norms[defined, None]) @ (directions / np.linalg.norm(directions, axis=0)), -1.0, 1.0
    )
    column_norms = np.linalg.norm(cosines[defined], axis=0)
    column_norms[column_norms == 0.0] = 1.0
    normalized = cosines / column_norms

    concepts = tuple(cav.concept for cav in cavs)
    return [
        AlignmentRecord(
            scene_ids[i],
            float(labels[i]),
            concepts,
            tuple(float(c) for c in cosines[i]),
            tuple(float(c) for c in normalized[i]),
            concepts[int(np.argmax(normalized[i]))] if defined[i] else None,
        )
        for i in range(n)
    ]


def align_scenes(pipeline: TrainedPipeline, scenes: Sequence[Scene], cavs: Sequence[Cav]) -> list[AlignmentRecord]:
    """Alignment on the activations of the layer the CAVs were learned at."""
    if not cavs:
        raise ShapeError("Alignment needs at least one CAV")
    for cav in cavs:
        _check_cav(pipeline, cav)
    activations = forward(pipeline.encoder, feature_matrix(scenes)).activations[cavs[0].layer]
    return align_instances(
        activations,
        cavs,
        [scene.id for scene in scenes],
        [float("nan") if scene.target is None else scene.target for scene in scenes],
    )


def label_bins(labels, bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Quantile edges and the 0-based bin of every label; a label on an inner edge goes up."""
    labels = np.asarray(labels, dtype=np.float64)
    if not np.all(np.isfinite(labels)):
        raise UndefinedMetricError("Label bins need finite labels")
    edges = np.quantile(labels, np.linspace(0.0, 1.0, bins + 1))
    return edges, np.searchsorted(edges[1:-1], labels, side="right")


def profile_records(records: Sequence[SensitivityRecord], bins: int = 5) -> list[ProfileRow]:
    """Bucket by target-label quantile and average the normalized sensitivities per bin."""
    if bins < 2:
        raise ConfigError("A sensitivity profile needs at least two bins", context={"bins": bins})
    if not records:
        raise UndefinedMetricError("No sensitivity records to profile")
    if any(r.normalized is None for r in records):
        records = normalize_magnitudes(records)
    values = np.array([r.normalized for r in records], dtype=np.float64)
    edges, assignment = label_bins([r.label for r in records], bins)
    rows = []
    for b in range(bins):
        members = values[assignment == b]
        mean = float(members.mean()) if members.size else float("nan")
        rows.append(ProfileRow(b, float(edges[b]), float(edges[b + 1]), mean, int(members.size)))
    return rows


def sensitivity_profile(
    pipeline: TrainedPipeline,
    scenes: Sequence[Scene],
    cav: Cav,
    method: Method | str = Method.PLAIN,
    bins: int = 5,
    ig_config: IgConfig | None = None,
) -> list[ProfileRow]:
    if bins < 2:
        raise ConfigError("A sensitivity profile needs at least two bins", context={"bins": bins})
    records = normalize_magnitudes(sensitivities(pipeline, scenes, cav, method, ig_config))
    return profile_records(records, bins)
