"""Utterance-level representation: eight order statistics per class
computed over the segment prediction sequence.

Per class the vector carries the mean, the 1st and 99th percentiles
(robust stand-ins for min and max), the three quartiles, and the
fraction of segments strictly above two fixed probability thresholds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

N_STATS = 8


@dataclass
class AggregationConfig:
    beta_low: float = 0.2
    beta_high: float = 0.3
    percentile_low: float = 1.0
    percentile_high: float = 99.0

    def __post_init__(self):
        if not (0.0 <= self.beta_low < self.beta_high <= 1.0):
            raise ValueError(
                f"need 0 <= beta_low < beta_high <= 1, got "
                f"{self.beta_low}/{self.beta_high}"
            )


def percentile(values, p: float) -> float:
    """Linear interpolation between closest ranks.

    Sort ascending, take rank r = (p/100) * (n-1), and interpolate
    between the neighbouring order statistics.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("percentile of an empty sequence is undefined")
    if not (0.0 <= p <= 100.0):
        raise ValueError(f"percentile must lie in [0, 100], got {p}")
    v = np.sort(values)
    r = (p / 100.0) * (v.size - 1)
    lo = math.floor(r)
    if lo + 1 >= v.size:
        return float(v[-1])
    frac = r - lo
    return float(v[lo] + frac * (v[lo + 1] - v[lo]))


@dataclass
class UtteranceRepresentation:
    utterance_id: str
    values: np.ndarray  # length 8*K, class-major

    @property
    def n_classes(self) -> int:
        return self.values.size // N_STATS


def utterance_representation(
    preds,
    cfg: AggregationConfig | None = None,
    utterance_id: str = "",
) -> UtteranceRepresentation:
    """Aggregate one utterance's segment predictions into 8*K statistics.

    Layout is class-major: all eight statistics of class 0, then class 1,
    and so on. Threshold features count segments with probability
    strictly greater than beta.
    """
    if cfg is None:
        cfg = AggregationConfig()
    preds = np.asarray(preds, dtype=np.float64)
    if preds.ndim != 2 or preds.shape[0] == 0:
        raise ValueError("need a non-empty (n_segments, K) prediction array")
    n, k = preds.shape
    values = np.empty(N_STATS * k)
    for c in range(k):
        col = preds[:, c]
        values[N_STATS * c : N_STATS * (c + 1)] = [
            col.mean(),
            percentile(col, cfg.percentile_low),
            percentile(col, cfg.percentile_high),
            percentile(col, 25.0),
            percentile(col, 50.0),
            percentile(col, 75.0),
            float((col > cfg.beta_low).mean()),
            float((col > cfg.beta_high).mean()),
        ]
    return UtteranceRepresentation(utterance_id=utterance_id, values=values)


def write_representations(path, reps: list[UtteranceRepresentation], labels: dict[str, str]) -> None:
    """Delimited cache: utterance_id, true label, 8*K values per row."""
    with open(path, "w", encoding="utf-8") as fh:
        for rep in reps:
            vals = ",".join(f"{v:.9g}" for v in rep.values)
            fh.write(f"{rep.utterance_id},{labels[rep.utterance_id]},{vals}\n")
