"""Half-step interval grid: discretize feature values and average attributions.

Continuous values are binned onto a uniform midpoint grid (multiples of the
step size) using half-open intervals, so every real value belongs to exactly
one interval. Integer-kind features skip binning and must already sit on
whole-number midpoints.
"""

from __future__ import annotations

import math
from bisect import bisect_left
from dataclasses import dataclass
from typing import Sequence

from .schema_ingest import (
    KIND_INTEGER,
    FeatureSchema,
    FeatureShapMatrix,
)

DEFAULT_STEP = 0.5


def assign_interval(value: float, kind: str, step: float = DEFAULT_STEP) -> float:
    """Map a raw value to its interval midpoint.

    Continuous: the unique grid midpoint m*step with
    value in [m*step - step/2, m*step + step/2). Integer kind: the value
    itself, which must be whole.
    """
    if not math.isfinite(value):
        raise ValueError(f"cannot assign non-finite value {value!r}")
    if step <= 0:
        raise ValueError(f"step must be positive, got {step!r}")
    if kind == KIND_INTEGER:
        if not float(value).is_integer():
            raise ValueError(f"integer feature holds fractional value {value!r}")
        return float(value)
    m = math.floor(value / step + 0.5)
    return m * step


@dataclass(frozen=True)
class IntervalStats:
    """Aggregate attribution for one (feature, midpoint) interval."""

    midpoint: float
    mean_shap: float
    count: int


@dataclass(frozen=True)
class ShapKnowledgeBase:
    """Per-feature interval tables of mean attributions, midpoints ascending."""

    schema: FeatureSchema
    step: float
    base_value: float
    features: tuple[tuple[IntervalStats, ...], ...]

    def midpoints(self, feature_index: int) -> tuple[float, ...]:
        return tuple(s.midpoint for s in self.features[feature_index])


def build_knowledge_base(
    matrix: FeatureShapMatrix, step: float = DEFAULT_STEP
) -> ShapKnowledgeBase:
    """Group every row's attribution by interval and average within each cell.

    The result depends only on the set of rows, not their order: sums use
    exact accumulation, so permuted inputs produce identical tables.
    """
    schema = matrix.schema
    per_feature: list[dict[float, list[float]]] = [{} for _ in schema.features]
    for row in matrix.rows:
        for i, spec in enumerate(schema.features):
            mid = assign_interval(row.values[i], spec.kind, step)
            per_feature[i].setdefault(mid, []).append(row.shap[i])
    tables = []
    for bucket in per_feature:
        stats = tuple(
            IntervalStats(
                midpoint=mid,
                mean_shap=math.fsum(shaps) / len(shaps),
                count=len(shaps),
            )
            for mid, shaps in sorted(bucket.items())
        )
        tables.append(stats)
    return ShapKnowledgeBase(
        schema=schema,
        step=step,
        base_value=matrix.base_value,
        features=tuple(tables),
    )


def nearest_midpoint(value: float, midpoints: Sequence[float]) -> float:
    """Closest stored midpoint to ``value``; ties go to the smaller midpoint."""
    if not midpoints:
        raise ValueError("feature has no stored intervals")
    pos = bisect_left(midpoints, value)
    if pos == 0:
        return midpoints[0]
    if pos == len(midpoints):
        return midpoints[-1]
    left, right = midpoints[pos - 1], midpoints[pos]
    if value - left <= right - value:
        return left
    return right
