"""Reward-guided weight calibration against teacher probabilities.

For each training case the loop starts from unit weights, asks a policy for
revised weights, recomputes the inferred probability, and repeats until the
relative deviation from the teacher probability drops below the threshold or
the iteration budget runs out. Failed attempts are kept in a small rolling
base and shown back to the policy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

from .cacs import CaseFeatureTable, ContributionProbabilityBase, match_record
from .schema_ingest import FeatureShapMatrix, SampleRecord

if TYPE_CHECKING:  # pragma: no cover
    from .policy import Policy

GUIDANCE_OVER = "Your inferred probability is significantly higher than actual levels"
GUIDANCE_UNDER = "Your inferred probability is significantly lower than actual levels"
GUIDANCE_OK = "Prediction direction correct with acceptable deviation"
GUIDANCE_WARN = (
    "Warning: Prediction contradicts factual direction. Re-examine decision basis"
)

SCORE_MAX = 10.0
FAILURE_CAPACITY = 3


class CalibrationError(RuntimeError):
    """Policy interaction failed mid-loop; carries the iteration index."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True)
class CalibrationConfig:
    epsilon: float = 0.05
    max_iters: int = 20
    weight_bound: float = 10.0
    literal_alignment: bool = False
    include_unconverged: bool = False

    def __post_init__(self) -> None:
        if not 0 < self.epsilon < 1:
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon!r}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters!r}")
        if self.weight_bound <= 0:
            raise ValueError(f"weight_bound must be positive, got {self.weight_bound!r}")


@dataclass(frozen=True)
class RewardSignal:
    """Deviation, direction agreement, score, and the guidance line they imply.

    ``alignment`` is the product of centered teacher and inferred
    probabilities; only its sign matters, and the raw value is kept for
    inspection.
    """

    diff: float
    alignment: float
    score: float
    guidance: str


def compute_reward(
    teacher_prob: float, infer_prob: float, *, literal_alignment: bool = False
) -> RewardSignal:
    """Score an inferred probability against the teacher's.

    Relative deviation is |teacher - inferred| / teacher. Alignment is
    (teacher - 0.5) * (inferred - 0.5); with ``literal_alignment`` the second
    factor is the uncentered inferred probability, which can never flag
    contradiction for teacher probabilities above one half. Scores: maximum
    when deviation is within 5% and direction agrees, a reciprocal of the
    absolute gap scaled by the teacher value when direction agrees but the
    deviation is large, zero whenever direction disagrees.
    """
    if not 0.0 < teacher_prob < 1.0:
        raise ValueError(f"teacher_prob must be inside (0, 1), got {teacher_prob!r}")
    if not 0.0 <= infer_prob <= 1.0:
        raise ValueError(f"infer_prob must be inside [0, 1], got {infer_prob!r}")
    diff = abs(teacher_prob - infer_prob) / teacher_prob
    if literal_alignment:
        alignment = (teacher_prob - 0.5) * infer_prob
    else:
        alignment = (teacher_prob - 0.5) * (infer_prob - 0.5)
    if alignment <= 0.0:
        score = 0.0
        guidance = GUIDANCE_WARN
    elif diff <= 0.05:
        score = SCORE_MAX
        guidance = GUIDANCE_OK
    else:
        score = teacher_prob / abs(teacher_prob - infer_prob)
        guidance = GUIDANCE_OVER if infer_prob > teacher_prob else GUIDANCE_UNDER
    return RewardSignal(diff=diff, alignment=alignment, score=score, guidance=guidance)


def infer_probability(table: CaseFeatureTable, weights: Sequence[float]) -> float:
    """Half plus the weighted sum of contributions, clamped to [0, 1].

    Exact summation keeps the result independent of feature order.
    """
    if len(weights) != len(table.entries):
        raise ValueError(
            f"{len(weights)} weights for {len(table.entries)} features"
        )
    raw = 0.5 + math.fsum(
        c * w for c, w in zip(table.contributions, weights)
    )
    return min(1.0, max(0.0, raw))


def clamp_weights(weights: Sequence[float], bound: float) -> tuple[float, ...]:
    out = []
    for w in weights:
        if not math.isfinite(w):
            raise ValueError(f"non-finite weight {w!r}")
        out.append(min(bound, max(0.0, w)))
    return tuple(out)


@dataclass(frozen=True)
class DiagnosticState:
    """A case's feature table with current weights and derived probability."""

    table: CaseFeatureTable
    weights: tuple[float, ...]
    infer_prob: float
    guidance: str = ""


def make_state(
    table: CaseFeatureTable, weights: Sequence[float], guidance: str = ""
) -> DiagnosticState:
    w = tuple(weights)
    return DiagnosticState(
        table=table, weights=w, infer_prob=infer_probability(table, w), guidance=guidance
    )


@dataclass(frozen=True)
class FailureCase:
    """One rejected weight proposal, kept to steer later attempts away."""

    weights: tuple[float, ...]
    infer_prob: float
    teacher_prob: float
    diff: float
    iteration: int


@dataclass(frozen=True)
class FailureCaseBase:
    """Rolling window of the most recent failures, oldest evicted first."""

    cases: tuple[FailureCase, ...] = ()

    def __post_init__(self) -> None:
        if len(self.cases) > FAILURE_CAPACITY:
            raise ValueError(f"failure base holds at most {FAILURE_CAPACITY} cases")


def push_failure(
    base: FailureCaseBase, case: FailureCase, *, epsilon: float = 0.05
) -> FailureCaseBase:
    """Append a failure, evicting the oldest if the base is full."""
    if case.diff <= epsilon:
        raise ValueError(
            f"case with diff {case.diff!r} <= {epsilon!r} is not a failure"
        )
    cases = base.cases + (case,)
    if len(cases) > FAILURE_CAPACITY:
        cases = cases[1:]
    return FailureCaseBase(cases=cases)


@dataclass(frozen=True)
class DistillationOutcome:
    """Final state of one case's calibration with its trajectory."""

    sample_id: str
    converged: bool
    iterations: int
    state: DiagnosticState
    teacher_prob: float
    label: int | None
    final_diff: float
    final_score: float
    trajectory: tuple[tuple[float, float], ...]  # (infer_prob, score) per step


def distill_record(
    record: SampleRecord,
    acpb: ContributionProbabilityBase,
    policy: "Policy",
    config: CalibrationConfig = CalibrationConfig(),
) -> DistillationOutcome:
    """Calibrate one record's weights until inference tracks the teacher.

    Starts at unit weights. Already-accurate cases still make one policy call
    so the stored guidance reflects the policy's reading of the case, but the
    weights are kept as-is.
    """
    from .policy import PolicyRequest  # local import to avoid a cycle

    if record.teacher_prob is None:
        raise ValueError(f"record {record.sample_id!r} has no teacher probability")
    table = match_record(record, acpb)
    teacher = record.teacher_prob
    weights = tuple(1.0 for _ in table.entries)
    prob = infer_probability(table, weights)
    reward = compute_reward(teacher, prob, literal_alignment=config.literal_alignment)
    trajectory = [(prob, reward.score)]
    failures = FailureCaseBase()
    guidance = ""
    iterations = 0

    def ask(iteration: int) -> "tuple[tuple[float, ...], str]":
        request = PolicyRequest(
            state=make_state(table, weights, guidance),
            reward=reward,
            failures=failures.cases,
            teacher_prob=teacher,
            feature_descriptions=acpb.schema.descriptions,
        )
        try:
            response = policy.propose(request)
        except Exception as exc:
            raise CalibrationError(
                f"policy failed on {record.sample_id!r} at iteration {iteration}: {exc}",
                iteration=iteration,
            ) from exc
        try:
            clamped = clamp_weights(response.weights, config.weight_bound)
        except ValueError as exc:
            raise CalibrationError(
                f"policy returned bad weights on {record.sample_id!r} "
                f"at iteration {iteration}: {exc}",
                iteration=iteration,
            ) from exc
        if len(clamped) != len(table.entries):
            raise CalibrationError(
                f"policy returned {len(clamped)} weights for "
                f"{len(table.entries)} features on {record.sample_id!r}",
                iteration=iteration,
            )
        return clamped, response.guidance

    if reward.diff <= config.epsilon:
        _, guidance = ask(0)
        return DistillationOutcome(
            sample_id=record.sample_id,
            converged=True,
            iterations=0,
            state=make_state(table, weights, guidance),
            teacher_prob=teacher,
            label=record.label,
            final_diff=reward.diff,
            final_score=reward.score,
            trajectory=tuple(trajectory),
        )

    for iteration in range(1, config.max_iters + 1):
        weights, guidance = ask(iteration)
        prob = infer_probability(table, weights)
        reward = compute_reward(
            teacher, prob, literal_alignment=config.literal_alignment
        )
        trajectory.append((prob, reward.score))
        iterations = iteration
        if reward.diff <= config.epsilon:
            break
        failures = push_failure(
            failures,
            FailureCase(
                weights=weights,
                infer_prob=prob,
                teacher_prob=teacher,
                diff=reward.diff,
                iteration=iteration,
            ),
            epsilon=config.epsilon,
        )

    return DistillationOutcome(
        sample_id=record.sample_id,
        converged=reward.diff <= config.epsilon,
        iterations=iterations,
        state=make_state(table, weights, guidance),
        teacher_prob=teacher,
        label=record.label,
        final_diff=reward.diff,
        final_score=reward.score,
        trajectory=tuple(trajectory),
    )


@dataclass(frozen=True)
class RecordSummary:
    sample_id: str
    converged: bool
    iterations: int
    final_diff: float
    final_score: float
    saved_entry_id: int | None


@dataclass(frozen=True)
class DistillationSummary:
    """Cohort-level result: per-record lines plus aggregate counts."""

    records: tuple[RecordSummary, ...]
    epsilon: float
    max_iters: int

    @property
    def total(self) -> int:
        return len(self.records)

    @property
    def converged_count(self) -> int:
        return sum(1 for r in self.records if r.converged)

    @property
    def unconverged_ids(self) -> tuple[str, ...]:
        return tuple(r.sample_id for r in self.records if not r.converged)


def distill_cohort(
    matrix: FeatureShapMatrix,
    acpb: ContributionProbabilityBase,
    policy: "Policy",
    config: CalibrationConfig = CalibrationConfig(),
    store=None,
) -> DistillationSummary:
    """Calibrate every row and save outcomes into the precedent store.

    Converged outcomes are always saved. Unconverged ones are only saved when
    the config says to keep them (the store flags such entries); otherwise
    they are reported in the summary and dropped.
    """
    summaries = []
    for record in matrix.rows:
        outcome = distill_record(record, acpb, policy, config)
        entry_id = None
        if store is not None and (outcome.converged or config.include_unconverged):
            entry_id = store.save_entry(
                outcome, allow_unconverged=config.include_unconverged
            )
        summaries.append(
            RecordSummary(
                sample_id=outcome.sample_id,
                converged=outcome.converged,
                iterations=outcome.iterations,
                final_diff=outcome.final_diff,
                final_score=outcome.final_score,
                saved_entry_id=entry_id,
            )
        )
    return DistillationSummary(
        records=tuple(summaries), epsilon=config.epsilon, max_iters=config.max_iters
    )


def summary_to_dict(summary: DistillationSummary) -> dict:
    return {
        "total": summary.total,
        "converged": summary.converged_count,
        "unconverged_ids": list(summary.unconverged_ids),
        "epsilon": summary.epsilon,
        "max_iters": summary.max_iters,
        "records": [
            {
                "sample_id": r.sample_id,
                "converged": r.converged,
                "iterations": r.iterations,
                "final_diff": r.final_diff,
                "final_score": r.final_score,
                "saved_entry_id": r.saved_entry_id,
            }
            for r in summary.records
        ],
    }


def write_summary(summary: DistillationSummary, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(summary_to_dict(summary), indent=2) + "\n", encoding="utf-8"
    )
