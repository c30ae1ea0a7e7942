# metrics.py

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rankcav.exceptions import ShapeError, UndefinedMetricError
from rankcav.helpers import as_vector


@dataclass(frozen=True, slots=True)
class MetricsReport:
    split: str
    r2: float
    kendall_tau: float
    n: int

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ShapeError("A metrics report needs at least two instances", context={"n": self.n})
        if not self.r2 <= 1.0 or not -1.0 <= self.kendall_tau <= 1.0:
            raise ShapeError(
                "Metric out of range",
                context={"r2": self.r2, "kendall_tau": self.kendall_tau},
            )

    def as_dict(self) -> dict[str, float | int | str]:
        return {"split": self.split, "n": self.n, "r2": self.r2, "kendall_tau": self.kendall_tau}


def _paired(predictions, labels) -> tuple[np.ndarray, np.ndarray]:
    predictions = as_vector(predictions, "predictions")
    labels = as_vector(labels, "labels")
    if predictions.shape != labels.shape:
        raise ShapeError(
            "Predictions and labels differ in length",
            context={"predictions": predictions.shape, "labels": labels.shape},
        )
    if labels.shape[0] < 2:
        raise ShapeError("Need at least two instances", context={"n": labels.shape[0]})
    return predictions, labels


def r_squared(predictions, labels) -> float:
    """1 - SS_res / SS_tot with a mean-centred SS_tot."""
    predictions, labels = _paired(predictions, labels)
    residuals = labels - predictions
    centred = labels - labels.mean()
    ss_tot = float(centred @ centred)
    if ss_tot == 0.0:
        raise UndefinedMetricError("R² is undefined for constant labels", context={"n": labels.shape[0]})
    return 1.0 - float(residuals @ residuals) / ss_tot


def kendall_tau(predictions, labels) -> float:
    """Tie-corrected Kendall tau-b over all n(n-1)/2 pairs."""
    x, y = _paired(predictions, labels)
    upper = np.triu_indices(x.shape[0], k=1)
    sx = np.sign(x[:, None] - x[None, :])[upper]
    sy = np.sign(y[:, None] - y[None, :])[upper]
    pairs = sx.shape[0]
    concordance = int(np.sum(sx * sy))  # concordant minus discordant
    tied_x = int(np.count_nonzero(sx == 0))
    tied_y = int(np.count_nonzero(sy == 0))
    denominator = float(pairs - tied_x) * float(pairs - tied_y)
    if denominator == 0.0:
        raise UndefinedMetricError(
            "Kendall tau is undefined when one ranking is fully tied",
            context={"pairs": pairs, "tied_x": tied_x, "tied_y": tied_y},
        )
    return float(concordance / np.sqrt(denominator))
