"""Train the teacher, keep its correctly predicted training rows, export.

The output matrix is the consumer's ingest format, written byte for byte the
same way: a base-value comment line, a fixed header, and shortest round-trip
decimal numbers. A schema sidecar (feature names, inferred kinds, contiguous
thirds grouping) lands next to it.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.ensemble import GradientBoostingClassifier

from .explain import ATTRIBUTION_TOLERANCE, margin_attributions
from .job import ExportJob, LabeledTable, load_table

# probabilities are clamped into the open unit interval the consumer requires
_PROB_FLOOR = math.nextafter(0.0, 1.0)
_PROB_CEIL = math.nextafter(1.0, 0.0)


class ExportError(RuntimeError):
    """Training or attribution failed; the job cannot produce a matrix."""


@dataclass(frozen=True)
class SplitIndices:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]


def split_table(n: int, split: tuple[float, float, float], seed: int) -> SplitIndices:
    """Deterministic shuffled split; every part must come out non-empty."""
    order = list(range(n))
    random.Random(seed).shuffle(order)
    n_train = round(n * split[0])
    n_val = round(n * (split[0] + split[1])) - n_train
    parts = SplitIndices(
        train=tuple(order[:n_train]),
        val=tuple(order[n_train:n_train + n_val]),
        test=tuple(order[n_train + n_val:]),
    )
    if not (parts.train and parts.val and parts.test):
        raise ExportError(
            f"table with {n} rows is too small for split {split!r}"
        )
    return parts


@dataclass(frozen=True)
class ExportResult:
    matrix_path: str
    schema_path: str
    kept: int
    train_accuracy: float
    val_accuracy: float
    test_accuracy: float
    split_sizes: tuple[int, int, int]
    base_value: float
    max_residual: float


def _accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    # correctness rule: predicted class is 1 exactly when prob >= 0.5
    predicted = (probs >= 0.5).astype(int)
    return float(np.mean(predicted == labels))


def _infer_kinds(table: LabeledTable) -> tuple[str, ...]:
    columns = np.array(table.rows)
    return tuple(
        "integer" if np.all(columns[:, i] == np.floor(columns[:, i])) else "continuous"
        for i in range(len(table.features))
    )


def _schema_doc(table: LabeledTable) -> dict:
    kinds = _infer_kinds(table)
    names = list(table.features)
    third = len(names) // 3
    return {
        "features": [
            {"name": name, "kind": kind, "description": ""}
            for name, kind in zip(names, kinds)
        ],
        "groups": [
            names[:third], names[third:2 * third], names[2 * third:],
        ],
    }


def _write_matrix(
    path: Path,
    features: tuple[str, ...],
    base_value: float,
    rows: list[tuple[str, tuple[float, ...], tuple[float, ...], float, int]],
) -> None:
    header = (
        ["sample_id"]
        + [f"v_{n}" for n in features]
        + [f"s_{n}" for n in features]
        + ["teacher_prob", "label"]
    )
    out = [f"# base_value={base_value!r}", ",".join(header)]
    for sample_id, values, shap, prob, label in rows:
        cells = [sample_id]
        cells += [repr(float(v)) for v in values]
        cells += [repr(float(s)) for s in shap]
        cells.append(repr(float(prob)))
        cells.append(str(label))
        out.append(",".join(cells))
    path.write_text("\n".join(out) + "\n", encoding="utf-8")


def export(job: ExportJob) -> ExportResult:
    """Run the whole job; returns the summary the CLI prints.

    Only training rows the teacher classifies correctly are exported. Every
    exported row's attributions are checked against the teacher's margin
    before anything is written.
    """
    table = load_table(job)
    X = np.array(table.rows)
    y = np.array(table.labels)
    parts = split_table(len(table), job.split, job.seed)

    model = GradientBoostingClassifier(
        n_estimators=job.rounds,
        max_depth=job.max_depth,
        learning_rate=0.1,
        random_state=job.seed,
    )
    try:
        model.fit(X[list(parts.train)], y[list(parts.train)])
    except Exception as exc:
        raise ExportError(f"training failure: {exc}") from exc

    accuracies = {}
    for name, idx in (("train", parts.train), ("val", parts.val), ("test", parts.test)):
        probs = model.predict_proba(X[list(idx)])[:, 1]
        accuracies[name] = _accuracy(probs, y[list(idx)])

    train_idx = np.array(parts.train)
    train_probs = model.predict_proba(X[train_idx])[:, 1]
    correct = (train_probs >= 0.5).astype(int) == y[train_idx]
    kept_idx = train_idx[correct]
    if kept_idx.size == 0:
        raise ExportError("the teacher predicted no training row correctly")
    # keep the input file's ordering so reruns diff cleanly
    kept_idx = np.sort(kept_idx)

    reference = X[train_idx].mean(axis=0)
    base, phis = margin_attributions(model, X[kept_idx], reference)
    margins = model.decision_function(X[kept_idx])
    residuals = np.abs(base + phis.sum(axis=1) - margins)
    max_residual = float(residuals.max())
    if max_residual > ATTRIBUTION_TOLERANCE:
        raise ExportError(
            f"attribution self-check failed: residual {max_residual:.3e} "
            f"exceeds {ATTRIBUTION_TOLERANCE:.0e}"
        )
    probs = 1.0 / (1.0 + np.exp(-margins))
    probs = np.clip(probs, _PROB_FLOOR, _PROB_CEIL)

    rows = [
        (
            table.sample_ids[i],
            table.rows[i],
            tuple(float(p) for p in phis[pos]),
            float(probs[pos]),
            int(y[i]),
        )
        for pos, i in enumerate(kept_idx)
    ]
    matrix_path = Path(job.output_path)
    schema_path = Path(job.output_path + ".schema.json")
    _write_matrix(matrix_path, table.features, base, rows)
    schema_path.write_text(
        json.dumps(_schema_doc(table), indent=2) + "\n", encoding="utf-8"
    )
    return ExportResult(
        matrix_path=str(matrix_path),
        schema_path=str(schema_path),
        kept=len(rows),
        train_accuracy=accuracies["train"],
        val_accuracy=accuracies["val"],
        test_accuracy=accuracies["test"],
        split_sizes=(len(parts.train), len(parts.val), len(parts.test)),
        base_value=base,
        max_residual=max_residual,
    )
