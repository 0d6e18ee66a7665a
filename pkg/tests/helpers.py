"""Shared builders for hand-sized fixtures."""

from __future__ import annotations

from shapdistill.cacs import CaseFeatureTable, FeatureMatch
from shapdistill.calibration import DistillationOutcome, make_state
from shapdistill.haga import assign_interval
from shapdistill.schema_ingest import (
    FeatureShapMatrix,
    FeatureSpec,
    SampleRecord,
    make_schema,
)


def schema3():
    return make_schema(
        [
            FeatureSpec("grip", "continuous", "grip strength, kg"),
            FeatureSpec("gait", "continuous", "gait speed, m/s"),
            FeatureSpec("falls", "integer", "falls in the last year"),
        ]
    )


def schema6():
    return make_schema(
        [FeatureSpec(f"f{i}", "continuous", f"feature {i}") for i in range(6)]
    )


def make_matrix(schema, rows, base_value=0.0):
    """rows: list of (sample_id, values, shap, teacher_prob, label)."""
    records = tuple(
        SampleRecord(
            sample_id=sid,
            values=tuple(values),
            shap=tuple(shap),
            teacher_prob=teacher_prob,
            label=label,
        )
        for sid, values, shap, teacher_prob, label in rows
    )
    return FeatureShapMatrix(schema=schema, base_value=base_value, rows=records)


def make_table(schema, sample_id, values, contribs, step=0.5):
    """Hand-built case table; midpoints follow the grid, matches marked exact."""
    entries = tuple(
        FeatureMatch(
            name=spec.name,
            raw_value=float(v),
            midpoint=assign_interval(float(v), spec.kind, step),
            contribution_prob=float(c),
            exact=True,
        )
        for spec, v, c in zip(schema.features, values, contribs)
    )
    return CaseFeatureTable(schema=schema, sample_id=sample_id, entries=entries)


def make_outcome(
    table,
    weights,
    converged=True,
    teacher_prob=0.7,
    label=1,
    guidance="calibrated",
    iterations=1,
    final_diff=0.01,
):
    state = make_state(table, weights, guidance)
    return DistillationOutcome(
        sample_id=table.sample_id,
        converged=converged,
        iterations=iterations,
        state=state,
        teacher_prob=teacher_prob,
        label=label,
        final_diff=final_diff,
        final_score=10.0 if converged else 0.0,
        trajectory=((state.infer_prob, 10.0),),
    )
