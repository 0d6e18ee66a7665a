"""Evaluation arithmetic and the synthetic piecewise teacher used for testing.

The synthetic teacher is additive over per-feature step functions aligned to
the half-step grid, so its exact per-feature attributions are known in closed
form and the whole pipeline can be validated end to end without a trained
model. A brute-force coalition-enumeration attributor is included as an
independent oracle for small feature counts.
"""

from __future__ import annotations

import math
import random
import statistics
from dataclasses import dataclass
from typing import Callable, Sequence

from .cacs import sigmoid
from .haga import DEFAULT_STEP, assign_interval
from .schema_ingest import (
    KIND_CONTINUOUS,
    KIND_INTEGER,
    FeatureSchema,
    FeatureShapMatrix,
    FeatureSpec,
    SampleRecord,
    make_schema,
)

# -- classification metrics --------------------------------------------------


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with the unhealthy class (label 1) as positive."""

    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class ClassScores:
    precision: float | None
    recall: float | None
    f1: float | None


@dataclass(frozen=True)
class ClassMetrics:
    accuracy: float | None
    unhealthy: ClassScores
    healthy: ClassScores


def _scores(tp: int, fp: int, fn: int) -> ClassScores:
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return ClassScores(precision=precision, recall=recall, f1=f1)


def class_metrics(cm: ConfusionMatrix) -> ClassMetrics:
    """Accuracy plus per-class precision/recall/F1; undefined ratios are None."""
    accuracy = (cm.tp + cm.tn) / cm.total if cm.total else None
    return ClassMetrics(
        accuracy=accuracy,
        unhealthy=_scores(cm.tp, cm.fp, cm.fn),
        healthy=_scores(cm.tn, cm.fn, cm.fp),
    )


def confusion_from_predictions(
    predicted: Sequence[int], truth: Sequence[int]
) -> ConfusionMatrix:
    if len(predicted) != len(truth):
        raise ValueError(
            f"{len(predicted)} predictions for {len(truth)} truth labels"
        )
    tp = tn = fp = fn = 0
    for p, t in zip(predicted, truth):
        if p not in (0, 1) or t not in (0, 1):
            raise ValueError(f"labels must be 0 or 1, got ({p!r}, {t!r})")
        if p == 1 and t == 1:
            tp += 1
        elif p == 0 and t == 0:
            tn += 1
        elif p == 1 and t == 0:
            fp += 1
        else:
            fn += 1
    return ConfusionMatrix(tp=tp, tn=tn, fp=fp, fn=fn)


@dataclass(frozen=True)
class BiasStats:
    """Distribution summary of teacher-minus-inferred probability gaps."""

    mean: float
    std: float
    median: float
    min: float
    max: float
    n: int


def bias_stats(
    teacher_probs: Sequence[float], infer_probs: Sequence[float]
) -> BiasStats:
    if len(teacher_probs) != len(infer_probs):
        raise ValueError("probability sequences must have equal length")
    if not teacher_probs:
        raise ValueError("bias stats need at least one pair")
    gaps = [t - p for t, p in zip(teacher_probs, infer_probs)]
    return BiasStats(
        mean=math.fsum(gaps) / len(gaps),
        std=statistics.pstdev(gaps),
        median=statistics.median(gaps),
        min=min(gaps),
        max=max(gaps),
        n=len(gaps),
    )


CONCORDANCE_BOTH_CORRECT = "both_correct"
CONCORDANCE_BOTH_WRONG = "both_wrong"
CONCORDANCE_A_ONLY = "a_only_correct"
CONCORDANCE_B_ONLY = "b_only_correct"


@dataclass(frozen=True)
class ConcordanceBreakdown:
    """Agreement of two prediction lists against shared truth labels."""

    both_correct: int
    both_wrong: int
    a_only_correct: int
    b_only_correct: int

    @property
    def total(self) -> int:
        return (
            self.both_correct + self.both_wrong
            + self.a_only_correct + self.b_only_correct
        )

    def fraction(self, count: int) -> float:
        return count / self.total if self.total else 0.0

    @property
    def fractions(self) -> tuple[float, float, float, float]:
        return (
            self.fraction(self.both_correct),
            self.fraction(self.both_wrong),
            self.fraction(self.a_only_correct),
            self.fraction(self.b_only_correct),
        )


def concordance_categories(
    preds_a: Sequence[int], preds_b: Sequence[int], truth: Sequence[int]
) -> tuple[str, ...]:
    if not (len(preds_a) == len(preds_b) == len(truth)):
        raise ValueError("prediction and truth lists must have equal length")
    out = []
    for a, b, t in zip(preds_a, preds_b, truth):
        if a == t and b == t:
            out.append(CONCORDANCE_BOTH_CORRECT)
        elif a != t and b != t:
            out.append(CONCORDANCE_BOTH_WRONG)
        elif a == t:
            out.append(CONCORDANCE_A_ONLY)
        else:
            out.append(CONCORDANCE_B_ONLY)
    return tuple(out)


def concordance(
    preds_a: Sequence[int], preds_b: Sequence[int], truth: Sequence[int]
) -> ConcordanceBreakdown:
    cats = concordance_categories(preds_a, preds_b, truth)
    return ConcordanceBreakdown(
        both_correct=cats.count(CONCORDANCE_BOTH_CORRECT),
        both_wrong=cats.count(CONCORDANCE_BOTH_WRONG),
        a_only_correct=cats.count(CONCORDANCE_A_ONLY),
        b_only_correct=cats.count(CONCORDANCE_B_ONLY),
    )


# -- synthetic piecewise teacher ----------------------------------------------


@dataclass(frozen=True)
class SyntheticFeature:
    """One additive component: a step function over grid midpoints.

    ``effects`` maps each reachable midpoint to the component's value there,
    already centered so the effect at ``baseline`` is zero.
    """

    name: str
    kind: str
    low: float
    high: float
    baseline: float
    effects: tuple[tuple[float, float], ...]

    def effect_at(self, midpoint: float) -> float:
        for mid, eff in self.effects:
            if mid == midpoint:
                return eff
        raise KeyError(f"{self.name}: no effect stored for midpoint {midpoint!r}")


@dataclass(frozen=True)
class SyntheticTeacherConfig:
    features: tuple[SyntheticFeature, ...]
    intercept: float = 0.0
    step: float = DEFAULT_STEP
    seed: int = 0


def _grid_range(low: float, high: float, kind: str, step: float) -> list[float]:
    # enumerate by integer multiples so midpoints stay exactly on the grid
    if kind == KIND_INTEGER:
        return [float(k) for k in range(int(low), int(high) + 1)]
    k0 = round(assign_interval(low, kind, step) / step)
    k1 = round(assign_interval(high, kind, step) / step)
    return [k * step for k in range(k0, k1 + 1)]


def default_synthetic_config(
    seed: int = 7,
    n_features: int = 15,
    n_integer: int = 3,
    effect_scale: float = 0.3,
    intercept: float = 0.0,
    step: float = DEFAULT_STEP,
) -> SyntheticTeacherConfig:
    """Random step functions over mixed continuous/integer features.

    Continuous features range over a few grid steps; integer features over a
    small whole-number range. Effects are drawn uniformly within
    [-effect_scale, effect_scale] and centered at the feature's baseline
    midpoint.
    """
    rng = random.Random(seed)
    features = []
    for i in range(n_features):
        if i < n_integer:
            name = f"count_{i}"
            kind = KIND_INTEGER
            low, high = 0.0, float(rng.randint(3, 6))
        else:
            name = f"marker_{i}"
            kind = KIND_CONTINUOUS
            lo = round(rng.uniform(-3.0, 0.0), 2)
            low, high = lo, lo + round(rng.uniform(2.0, 4.0), 2)
        mids = _grid_range(low, high, kind, step)
        baseline = mids[rng.randrange(len(mids))]
        # baseline effect is pinned to zero (not shifted), so every effect
        # stays within [-effect_scale, effect_scale]
        raw = {m: rng.uniform(-effect_scale, effect_scale) for m in mids}
        raw[baseline] = 0.0
        effects = tuple((m, raw[m]) for m in mids)
        features.append(
            SyntheticFeature(
                name=name,
                kind=kind,
                low=low,
                high=high,
                baseline=baseline,
                effects=effects,
            )
        )
    return SyntheticTeacherConfig(
        features=tuple(features), intercept=intercept, step=step, seed=seed
    )


def synthetic_schema(config: SyntheticTeacherConfig) -> FeatureSchema:
    specs = [
        FeatureSpec(
            name=f.name,
            kind=f.kind,
            description=f"synthetic step-function component over [{f.low}, {f.high}]",
        )
        for f in config.features
    ]
    return make_schema(specs)


def teacher_margin(config: SyntheticTeacherConfig, values: Sequence[float]) -> float:
    """Log-odds the synthetic teacher assigns to a value vector."""
    if len(values) != len(config.features):
        raise ValueError(
            f"{len(values)} values for {len(config.features)} features"
        )
    total = config.intercept
    for f, v in zip(config.features, values):
        total += f.effect_at(assign_interval(v, f.kind, config.step))
    return total


def synth_generate(config: SyntheticTeacherConfig, n: int) -> FeatureShapMatrix:
    """Sample n rows and attach exact attributions and teacher probabilities.

    Because effects are centered at each feature's baseline, the attribution
    of feature i for a row is exactly its effect at the row's midpoint, and
    the shared base value is the intercept.
    """
    if n < 1:
        raise ValueError(f"need at least one row, got {n!r}")
    rng = random.Random(config.seed)
    schema = synthetic_schema(config)
    rows = []
    for idx in range(n):
        values = []
        shap = []
        for f in config.features:
            if f.kind == KIND_INTEGER:
                v = float(rng.randint(int(f.low), int(f.high)))
            else:
                v = rng.uniform(f.low, f.high)
            values.append(v)
            shap.append(f.effect_at(assign_interval(v, f.kind, config.step)))
        margin = config.intercept + math.fsum(shap)
        teacher_prob = sigmoid(margin)
        rows.append(
            SampleRecord(
                sample_id=f"syn{idx:04d}",
                values=tuple(values),
                shap=tuple(shap),
                teacher_prob=teacher_prob,
                label=1 if teacher_prob >= 0.5 else 0,
            )
        )
    return FeatureShapMatrix(
        schema=schema, base_value=config.intercept, rows=tuple(rows)
    )


# -- brute-force attribution oracle -------------------------------------------


def shapley_brute(
    model: Callable[[Sequence[float]], float],
    reference: Sequence[float],
    x: Sequence[float],
) -> tuple[float, ...]:
    """Exact attributions by full coalition enumeration against one reference.

    The coalition value substitutes reference coordinates for absent features.
    Exponential in the feature count, so it refuses more than 8 features.
    Attributions sum to model(x) - model(reference) up to float rounding.
    """
    n = len(x)
    if len(reference) != n:
        raise ValueError("reference and x must have equal length")
    if n > 8:
        raise ValueError(f"brute-force enumeration limited to 8 features, got {n}")
    values = {}
    for mask in range(1 << n):
        hybrid = [x[i] if mask >> i & 1 else reference[i] for i in range(n)]
        values[mask] = model(hybrid)
    fact = [math.factorial(i) for i in range(n + 1)]
    phis = []
    for i in range(n):
        total = 0.0
        acc = []
        for mask in range(1 << n):
            if mask >> i & 1:
                continue
            s = bin(mask).count("1")
            weight = fact[s] * fact[n - s - 1] / fact[n]
            acc.append(weight * (values[mask | (1 << i)] - values[mask]))
        total = math.fsum(acc)
        phis.append(total)
    return tuple(phis)
