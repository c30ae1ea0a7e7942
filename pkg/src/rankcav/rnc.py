# rnc.py
"""Rank-N-Contrast batch loss with its analytic gradient.

For anchor i and partner j the candidate set S_ij holds every k != i whose
label distance to i is at least |y_i - y_j| (ties included). The per-pair
term is -log softmax of sim(v_i, v_j) / tau over S_ij, with
sim(a, b) = -||a - b||_2, averaged over all ordered pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import StrEnum
from typing import NamedTuple

import numpy as np

from rankcav.exceptions import ConfigError, ShapeError
from rankcav.helpers import as_matrix, as_vector


class LabelDistance(StrEnum):
    L1 = "l1"


class FeatureSimilarity(StrEnum):
    NEGATIVE_L2 = "negative_l2"


@dataclass(frozen=True, slots=True)
class RncConfig:
    temperature: float = 2.0
    label_distance: LabelDistance = LabelDistance.L1
    feature_similarity: FeatureSimilarity = FeatureSimilarity.NEGATIVE_L2

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0", context={"temperature": self.temperature})
        object.__setattr__(self, "label_distance", LabelDistance(self.label_distance))
        object.__setattr__(self, "feature_similarity", FeatureSimilarity(self.feature_similarity))


@dataclass(frozen=True, eq=False, slots=True)
class RncBatch:
    embeddings: np.ndarray  # (M, d)
    labels: np.ndarray  # (M,)

    def __post_init__(self) -> None:
        embeddings = as_matrix(self.embeddings, "embeddings")
        labels = as_vector(self.labels, "labels")
        if embeddings.shape[0] != labels.shape[0]:
            raise ShapeError(
                "One label per embedding row",
                context={"embeddings": embeddings.shape, "labels": labels.shape},
            )
        if embeddings.shape[0] < 2:
            raise ShapeError("An RNC batch needs at least two samples", context={"M": embeddings.shape[0]})
        object.__setattr__(self, "embeddings", embeddings)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]


class RncLossOutput(NamedTuple):
    value: float
    grad: np.ndarray


def label_distances(labels: np.ndarray) -> np.ndarray:
    return np.abs(labels[:, None] - labels[None, :])


def candidate_set(i: int, j: int, labels) -> frozenset[int]:
    """S_ij = {k != i : d(y_i, y_k) >= d(y_i, y_j)}; always contains j."""
    labels = as_vector(labels, "labels")
    size = labels.shape[0]
    if not (0 <= i < size and 0 <= j < size):
        raise ShapeError("Index out of range", context={"i": i, "j": j, "M": size})
    if i == j:
        raise ShapeError("Anchor and partner must differ", context={"i": i})
    distances = np.abs(labels - labels[i])
    return frozenset(int(k) for k in np.flatnonzero(distances >= distances[j]) if k != i)


def anchor_masks(labels: np.ndarray, i: int) -> np.ndarray:
    """Boolean (M, M) array for anchor i, True at [j, k] when k is in S_ij (j != i)."""
    distances = np.abs(labels - labels[i])
    masks = distances[None, :] >= distances[:, None]
    masks[i, :] = False
    masks[:, i] = False
    return masks


def rnc_loss(batch: RncBatch, config: RncConfig | None = None) -> RncLossOutput:
    """Loss value and d(loss)/d(embeddings), log-sum-exp stabilised per denominator.

    One anchor at a time, so memory grows with M^2 rather than M^3.
    """
    config = config or RncConfig()
    v = batch.embeddings
    size = batch.size
    tau = config.temperature
    scale = 1.0 / (size * (size - 1))

    total = 0.0
    grad = np.zeros_like(v)
    for i in range(size):
        diffs = v[i] - v
        norms = np.sqrt(np.sum(diffs * diffs, axis=-1))
        logits = -norms / tau  # s_ik

        masks = anchor_masks(batch.labels, i)
        partners = np.arange(size) != i
        masked = np.where(masks, logits[None, :], -np.inf)
        peak = np.where(partners, masked.max(axis=-1), 0.0)
        weights = np.where(masks, np.exp(masked - peak[:, None]), 0.0)
        totals = np.where(partners, weights.sum(axis=-1), 1.0)
        log_denominator = peak + np.log(totals)
        total += float(np.sum(np.where(partners, log_denominator - logits, 0.0)))

        # d(term_ij)/d(s_ik) = p_ijk - [k == j]; summed over j gives the coefficient of s_ik.
        coefficients = ((weights / totals[:, None]).sum(axis=0) - partners) * scale
        with np.errstate(invalid="ignore", divide="ignore"):
            units = np.where(norms[:, None] > 0, diffs / norms[:, None], 0.0)
        # s_ik = -||v_i - v_k|| / tau: ds_ik/dv_i = -u_ik / tau, ds_ik/dv_k = +u_ik / tau.
        weighted = coefficients[:, None] * units / tau
        grad[i] -= weighted.sum(axis=0)
        grad += weighted
    return RncLossOutput(total * scale, grad)
