"""Unseen-case prediction: retrieve precedents, weight, vote, and report.

A single run retrieves similar solved cases, asks the policy for weights
conditioned on those precedents, and infers a probability. Several runs are
voted: the majority classification wins and the reported probability is the
mean over the majority's runs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .cacs import CaseFeatureTable, ContributionProbabilityBase, match_record
from .calibration import clamp_weights, infer_probability
from .knowledge_base import (
    DiagnosisKnowledgeBase,
    RetrievalConfig,
    RetrievalResult,
    ScoredEntry,
    fgmr_retrieve,
)
from .policy import Policy, Precedent, PredictionRequest
from .schema_ingest import LABEL_UNHEALTHY, SampleRecord

CLASS_NAMES = {0: "healthy", 1: "unhealthy"}


class PredictionError(RuntimeError):
    """A voting run failed; completed runs are attached."""

    def __init__(self, message: str, partial_runs: tuple["PredictionRun", ...] = ()):
        super().__init__(message)
        self.partial_runs = partial_runs


@dataclass(frozen=True)
class PredictionConfig:
    runs: int = 3
    weight_bound: float = 10.0
    vote_temperature: float | None = None
    retrieval: RetrievalConfig | None = None

    def __post_init__(self) -> None:
        if self.runs < 1 or self.runs % 2 == 0:
            raise ValueError(f"runs must be odd and >= 1, got {self.runs!r}")
        if self.weight_bound <= 0:
            raise ValueError(f"weight_bound must be positive, got {self.weight_bound!r}")


@dataclass(frozen=True)
class PredictionRun:
    retrieved: RetrievalResult
    weights: tuple[float, ...]
    guidance: str
    probability: float
    classification: int


@dataclass(frozen=True)
class VotedPrediction:
    classification: int
    probability: float
    tally: tuple[int, int]  # (healthy votes, unhealthy votes)
    runs: tuple[PredictionRun, ...]


def classify(probability: float) -> int:
    # the boundary case counts as unhealthy
    return LABEL_UNHEALTHY if probability >= 0.5 else 1 - LABEL_UNHEALTHY


def _precedents(store: DiagnosisKnowledgeBase, result: RetrievalResult) -> tuple[Precedent, ...]:
    out = []
    for scored in result.final:
        entry = store.get(scored.entry_id)
        out.append(
            Precedent(
                entry_id=entry.entry_id,
                similarity=scored.similarity,
                weights=entry.weights,
                guidance=entry.guidance,
            )
        )
    return tuple(out)


def predict_once(
    record: SampleRecord,
    acpb: ContributionProbabilityBase,
    store: DiagnosisKnowledgeBase,
    policy: Policy,
    config: PredictionConfig = PredictionConfig(),
    temperature: float | None = None,
) -> PredictionRun:
    """One retrieval-conditioned prediction for a raw-valued case."""
    table = match_record(record, acpb)
    retrieved = fgmr_retrieve(store, table, config.retrieval)
    request = PredictionRequest(
        table=table,
        precedents=_precedents(store, retrieved),
        feature_descriptions=acpb.schema.descriptions,
    )
    response = policy.predict(request, temperature=temperature)
    weights = clamp_weights(response.weights, config.weight_bound)
    if len(weights) != len(table.entries):
        raise PredictionError(
            f"policy returned {len(weights)} weights for {len(table.entries)} features"
        )
    probability = infer_probability(table, weights)
    return PredictionRun(
        retrieved=retrieved,
        weights=weights,
        guidance=response.guidance,
        probability=probability,
        classification=classify(probability),
    )


def predict_voted(
    record: SampleRecord,
    acpb: ContributionProbabilityBase,
    store: DiagnosisKnowledgeBase,
    policy: Policy,
    config: PredictionConfig = PredictionConfig(),
) -> VotedPrediction:
    """Run an odd number of predictions and vote.

    The reported probability averages only the majority class's runs, so it
    always sits on the winning side of the boundary. Any failing run aborts
    the whole vote with the completed runs attached to the error.
    """
    runs: list[PredictionRun] = []
    for i in range(config.runs):
        try:
            runs.append(
                predict_once(
                    record, acpb, store, policy, config,
                    temperature=config.vote_temperature,
                )
            )
        except Exception as exc:
            raise PredictionError(
                f"run {i + 1} of {config.runs} failed for {record.sample_id!r}: {exc}",
                partial_runs=tuple(runs),
            ) from exc
    unhealthy = sum(1 for r in runs if r.classification == LABEL_UNHEALTHY)
    healthy = len(runs) - unhealthy
    winner = LABEL_UNHEALTHY if unhealthy > healthy else 1 - LABEL_UNHEALTHY
    majority = [r.probability for r in runs if r.classification == winner]
    probability = math.fsum(majority) / len(majority)
    return VotedPrediction(
        classification=winner,
        probability=probability,
        tally=(healthy, unhealthy),
        runs=tuple(runs),
    )


@dataclass(frozen=True)
class DiagnosisReport:
    """Human- and machine-readable account of one voted prediction."""

    sample_id: str
    classification: int
    probability: float
    raw_probability: float
    tally: tuple[int, int]
    contributions: tuple[tuple[str, float], ...]  # (feature, weighted contribution)
    weights: tuple[float, ...]
    precedents: tuple[ScoredEntry, ...]
    tier: str
    guidance: str
    out_of_support: bool
    config_fingerprint: str = ""


def generate_report(
    voted: VotedPrediction,
    table: CaseFeatureTable,
    config_fingerprint: str = "",
) -> DiagnosisReport:
    """Assemble a report from the vote, decomposing the first majority run.

    The decomposition satisfies raw_probability == 0.5 + sum of the listed
    weighted contributions (before clamping), so the table explains exactly
    the probability it accompanies.
    """
    lead = next(r for r in voted.runs if r.classification == voted.classification)
    products = [
        (e.name, e.contribution_prob * w)
        for e, w in zip(table.entries, lead.weights)
    ]
    ranked = tuple(sorted(products, key=lambda p: (-abs(p[1]), p[0])))
    raw = 0.5 + math.fsum(p for _, p in products)
    return DiagnosisReport(
        sample_id=table.sample_id,
        classification=voted.classification,
        probability=voted.probability,
        raw_probability=raw,
        tally=voted.tally,
        contributions=ranked,
        weights=lead.weights,
        precedents=lead.retrieved.final,
        tier=lead.retrieved.tier,
        guidance=lead.guidance,
        out_of_support=table.out_of_support,
        config_fingerprint=config_fingerprint,
    )


def report_to_dict(report: DiagnosisReport) -> dict:
    return {
        "sample_id": report.sample_id,
        "classification": report.classification,
        "class_name": CLASS_NAMES[report.classification],
        "probability": report.probability,
        "raw_probability": report.raw_probability,
        "tally": {"healthy": report.tally[0], "unhealthy": report.tally[1]},
        "contributions": [
            {"feature": name, "weighted_contribution": value}
            for name, value in report.contributions
        ],
        "weights": list(report.weights),
        "precedents": [
            {"entry_id": s.entry_id, "similarity": s.similarity}
            for s in report.precedents
        ],
        "tier": report.tier,
        "guidance": report.guidance,
        "out_of_support": report.out_of_support,
        "config_fingerprint": report.config_fingerprint,
    }


def render_report_text(report: DiagnosisReport) -> str:
    lines = [
        f"case: {report.sample_id}",
        f"classification: {CLASS_NAMES[report.classification]} ({report.classification})",
        f"probability: {report.probability:.6f}",
        f"votes: healthy={report.tally[0]} unhealthy={report.tally[1]}",
        f"retrieval tier: {report.tier}",
        "",
        "feature contributions (contribution x weight, strongest first):",
    ]
    for name, value in report.contributions:
        lines.append(f"  {name:<24} {value:+.6f}")
    lines.append(f"  {'(base)':<24} {0.5:+.6f}")
    lines.append(f"  raw probability         {report.raw_probability:+.6f}")
    lines.append("")
    if report.precedents:
        lines.append("precedents:")
        for s in report.precedents:
            lines.append(f"  entry {s.entry_id}  similarity {s.similarity:.6f}")
    else:
        lines.append("precedents: none")
    if report.out_of_support:
        lines.append("")
        lines.append(
            "note: one or more values fell outside the training support; "
            "nearest stored intervals were used"
        )
    lines.append("")
    lines.append(f"guidance: {report.guidance}")
    if report.config_fingerprint:
        lines.append(f"config: {report.config_fingerprint}")
    return "\n".join(lines) + "\n"


def write_report(report: DiagnosisReport, text_path: str | Path, json_path: str | Path) -> None:
    Path(text_path).write_text(render_report_text(report), encoding="utf-8")
    Path(json_path).write_text(
        json.dumps(report_to_dict(report), indent=2) + "\n", encoding="utf-8"
    )
