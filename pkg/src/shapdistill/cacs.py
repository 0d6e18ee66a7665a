"""Contrastive mapping from mean attributions to probability contributions.

Each interval's mean attribution is converted to the exact change it induces
in the teacher's output probability: sigmoid(base + mean_shap) - sigmoid(base).
The resulting per-feature tables form the attribution-contribution base that
calibration and prediction consume.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .haga import DEFAULT_STEP, ShapKnowledgeBase, assign_interval, nearest_midpoint
from .schema_ingest import (
    FeatureSchema,
    SampleRecord,
    schema_fingerprint,
    schema_from_dict,
    schema_to_dict,
)


def sigmoid(x: float) -> float:
    # split on sign so exp never overflows
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def contribution_probability(base_value: float, mean_shap: float) -> float:
    """Probability change a single attribution induces on top of the base value."""
    return sigmoid(base_value + mean_shap) - sigmoid(base_value)


@dataclass(frozen=True)
class ContributionEntry:
    """One interval: midpoint, mean attribution, its probability contribution."""

    midpoint: float
    mean_shap: float
    contribution_prob: float
    count: int


@dataclass(frozen=True)
class ContributionProbabilityBase:
    """Per-feature contribution tables plus everything needed to apply them.

    Self-contained: embeds the schema and base value so a saved table can be
    reloaded and used without the original matrix.
    """

    schema: FeatureSchema
    base_value: float
    step: float
    features: tuple[tuple[ContributionEntry, ...], ...]

    def midpoints(self, feature_index: int) -> tuple[float, ...]:
        return tuple(e.midpoint for e in self.features[feature_index])

    def entry_at(self, feature_index: int, midpoint: float) -> ContributionEntry:
        for entry in self.features[feature_index]:
            if entry.midpoint == midpoint:
                return entry
        raise KeyError(f"feature {feature_index}: no interval at midpoint {midpoint!r}")


def build_acpb(skb: ShapKnowledgeBase) -> ContributionProbabilityBase:
    """Convert an averaged-attribution base into probability-contribution tables.

    Monotonicity of the sigmoid means each entry's contribution keeps the sign
    of its mean attribution.
    """
    features = tuple(
        tuple(
            ContributionEntry(
                midpoint=s.midpoint,
                mean_shap=s.mean_shap,
                contribution_prob=contribution_probability(skb.base_value, s.mean_shap),
                count=s.count,
            )
            for s in table
        )
        for table in skb.features
    )
    return ContributionProbabilityBase(
        schema=skb.schema,
        base_value=skb.base_value,
        step=skb.step,
        features=features,
    )


@dataclass(frozen=True)
class FeatureMatch:
    """A case value resolved against its feature's contribution table."""

    name: str
    raw_value: float
    midpoint: float
    contribution_prob: float
    exact: bool


@dataclass(frozen=True)
class CaseFeatureTable:
    """All features of one case matched to contribution entries, schema order."""

    schema: FeatureSchema
    sample_id: str
    entries: tuple[FeatureMatch, ...]

    @property
    def contributions(self) -> tuple[float, ...]:
        return tuple(e.contribution_prob for e in self.entries)

    @property
    def out_of_support(self) -> bool:
        """True when any feature fell back to a nearest midpoint."""
        return any(not e.exact for e in self.entries)


def match_record(record: SampleRecord, acpb: ContributionProbabilityBase) -> CaseFeatureTable:
    """Resolve each raw value to a stored interval.

    Values whose own interval was never seen in training fall back to the
    nearest stored midpoint (ties toward the smaller one) and are marked
    inexact.
    """
    if len(record.values) != len(acpb.schema):
        raise ValueError(
            f"record {record.sample_id!r} has {len(record.values)} values, "
            f"schema expects {len(acpb.schema)}"
        )
    matches = []
    for i, spec in enumerate(acpb.schema.features):
        mids = acpb.midpoints(i)
        target = assign_interval(record.values[i], spec.kind, acpb.step)
        exact = _has_midpoint(mids, target)
        midpoint = target if exact else nearest_midpoint(record.values[i], mids)
        entry = acpb.entry_at(i, midpoint)
        matches.append(
            FeatureMatch(
                name=spec.name,
                raw_value=record.values[i],
                midpoint=midpoint,
                contribution_prob=entry.contribution_prob,
                exact=exact,
            )
        )
    return CaseFeatureTable(
        schema=acpb.schema, sample_id=record.sample_id, entries=tuple(matches)
    )


def _has_midpoint(midpoints: tuple[float, ...], target: float) -> bool:
    return target in midpoints


# -- persistence -------------------------------------------------------------

_FORMAT = "acpb"
_VERSION = 1


def acpb_to_dict(acpb: ContributionProbabilityBase) -> dict:
    return {
        "format": _FORMAT,
        "version": _VERSION,
        "schema": schema_to_dict(acpb.schema),
        "schema_hash": schema_fingerprint(acpb.schema),
        "base_value": repr(acpb.base_value),
        "step": repr(acpb.step),
        "features": [
            {
                "name": acpb.schema.features[i].name,
                "entries": [
                    {
                        "midpoint": repr(e.midpoint),
                        "mean_shap": repr(e.mean_shap),
                        "contribution_prob": repr(e.contribution_prob),
                        "count": e.count,
                    }
                    for e in table
                ],
            }
            for i, table in enumerate(acpb.features)
        ],
    }


def acpb_from_dict(doc: dict) -> ContributionProbabilityBase:
    if doc.get("format") != _FORMAT or doc.get("version") != _VERSION:
        raise ValueError(
            f"not an attribution-contribution file (format={doc.get('format')!r}, "
            f"version={doc.get('version')!r})"
        )
    schema = schema_from_dict(doc["schema"])
    recorded = doc.get("schema_hash")
    if recorded is not None and recorded != schema_fingerprint(schema):
        raise ValueError("schema hash does not match embedded schema")
    features = []
    for i, block in enumerate(doc["features"]):
        if block["name"] != schema.features[i].name:
            raise ValueError(
                f"feature order mismatch at index {i}: {block['name']!r} vs "
                f"{schema.features[i].name!r}"
            )
        features.append(
            tuple(
                ContributionEntry(
                    midpoint=float(e["midpoint"]),
                    mean_shap=float(e["mean_shap"]),
                    contribution_prob=float(e["contribution_prob"]),
                    count=int(e["count"]),
                )
                for e in block["entries"]
            )
        )
    return ContributionProbabilityBase(
        schema=schema,
        base_value=float(doc["base_value"]),
        step=float(doc["step"]),
        features=tuple(features),
    )


def write_acpb(acpb: ContributionProbabilityBase, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(acpb_to_dict(acpb), indent=2) + "\n", encoding="utf-8"
    )


def load_acpb(path: str | Path) -> ContributionProbabilityBase:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON: {exc}") from exc
    return acpb_from_dict(doc)
