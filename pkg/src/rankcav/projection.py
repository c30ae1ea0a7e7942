# projection.py
"""Deterministic 2-D PCA of embedding clouds by power iteration with deflation."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from rankcav.exceptions import ShapeError
from rankcav.helpers import as_matrix

POWER_ITERATIONS = 1000
TOLERANCE = 1e-13


class Components(NamedTuple):
    mean: np.ndarray
    vectors: np.ndarray  # (k, d), orthonormal rows
    variances: np.ndarray  # (k,)


@dataclass(frozen=True, slots=True)
class EmbeddingProjection:
    scene_id: str
    label: float
    x: float
    y: float
    tag: str

    def __post_init__(self) -> None:
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ShapeError("Projection coordinates must be finite", context={"scene_id": self.scene_id})


def _orient(vector: np.ndarray) -> np.ndarray:
    """Sign convention: the largest-magnitude entry is positive (first one on ties)."""
    return -vector if vector[np.argmax(np.abs(vector))] < 0 else vector


def principal_components(data, k: int = 2) -> Components:
    """Top-k eigenpairs of the sample covariance; deflated-away directions get variance 0."""
    data = as_matrix(data, "embeddings")
    n, d = data.shape
    if n < 3:
        raise ShapeError("Projection needs at least three instances", context={"n": n})
    if not 1 <= k <= d:
        raise ShapeError("Component count out of range", context={"k": k, "d": d})
    mean = data.mean(axis=0)
    centred = data - mean
    covariance = centred.T @ centred / (n - 1)
    vectors, variances = [], []
    for index in range(k):
        # Deterministic start that is never orthogonal to every eigenvector.
        vector = np.ones(d) / np.sqrt(d) + np.arange(d) / (10.0 * d * d)
        for previous in vectors:
            vector -= (vector @ previous) * previous
        vector /= np.linalg.norm(vector)
        for _ in range(POWER_ITERATIONS):
            nxt = covariance @ vector
            for previous in vectors:
                nxt -= (nxt @ previous) * previous
            norm = np.linalg.norm(nxt)
            if norm <= TOLERANCE:
                break
            nxt /= norm
            if np.linalg.norm(nxt - vector) <= TOLERANCE or np.linalg.norm(nxt + vector) <= TOLERANCE:
                vector = nxt
                break
            vector = nxt
        if norm <= TOLERANCE:
            vector = _complement(vectors, d, index)
        vector = _orient(vector)
        vectors.append(vector)
        variances.append(max(float(vector @ covariance @ vector), 0.0))
    return Components(mean, np.array(vectors), np.array(variances))


def _complement(vectors: Sequence[np.ndarray], d: int, index: int) -> np.ndarray:
    """A unit vector orthogonal to `vectors`, used when the remaining spectrum is zero."""
    for axis in range(index, index + d):
        candidate = np.zeros(d)
        candidate[axis % d] = 1.0
        for previous in vectors:
            candidate -= (candidate @ previous) * previous
        if (norm := np.linalg.norm(candidate)) > 1e-8:
            return candidate / norm
    raise ShapeError("No orthogonal complement left", context={"d": d, "found": len(vectors)})


def project(data, components: Components) -> np.ndarray:
    return (as_matrix(data, "embeddings") - components.mean) @ components.vectors.T


def project_embeddings(
    embeddings, scene_ids: Sequence[str], labels: Sequence[float], tag: str
) -> list[EmbeddingProjection]:
    embeddings = as_matrix(embeddings, "embeddings")
    if embeddings.shape[0] != len(scene_ids) or len(scene_ids) != len(labels):
        raise ShapeError(
            "Embeddings, ids and labels differ in length",
            context={"embeddings": embeddings.shape[0], "ids": len(scene_ids), "labels": len(labels)},
        )
    coordinates = project(embeddings, principal_components(embeddings, k=min(2, embeddings.shape[1])))
    if coordinates.shape[1] == 1:
        coordinates = np.hstack([coordinates, np.zeros((coordinates.shape[0], 1))])
    return [
        EmbeddingProjection(scene_id, float(label), float(x), float(y), tag)
        for scene_id, label, (x, y) in zip(scene_ids, labels, coordinates)
    ]
