import json
import math

import pytest

from shapdistill.cacs import build_acpb, match_record
from shapdistill.calibration import CalibrationConfig, distill_cohort, infer_probability
from shapdistill.evaluation import default_synthetic_config, synth_generate
from shapdistill.haga import build_knowledge_base
from shapdistill.knowledge_base import (
    TIER_INTERSECTION,
    DiagnosisKnowledgeBase,
    RetrievalConfig,
    RetrievalError,
)
from shapdistill.policy import PolicyError, PolicyResponse, StubPolicy
from shapdistill.prediction import (
    PredictionConfig,
    PredictionError,
    classify,
    generate_report,
    predict_once,
    predict_voted,
    render_report_text,
    report_to_dict,
    write_report,
)
from shapdistill.schema_ingest import SampleRecord


def test_classify_boundary_counts_as_unhealthy():
    assert classify(0.5) == 1
    assert classify(0.5 - 1e-12) == 0
    assert classify(0.9) == 1
    assert classify(0.1) == 0


def test_prediction_config_validation():
    with pytest.raises(ValueError, match="odd"):
        PredictionConfig(runs=2)
    with pytest.raises(ValueError, match="odd"):
        PredictionConfig(runs=0)
    with pytest.raises(ValueError, match="weight_bound"):
        PredictionConfig(weight_bound=0.0)
    PredictionConfig(runs=5)  # fine


@pytest.fixture(scope="module")
def pipeline():
    """Small distilled cohort: matrix, contribution base, populated store."""
    cfg = default_synthetic_config(seed=3, n_features=6, n_integer=0)
    matrix = synth_generate(cfg, 40)
    acpb = build_acpb(build_knowledge_base(matrix, cfg.step))
    store = DiagnosisKnowledgeBase.create(
        matrix, retrieval=RetrievalConfig(k=4, threshold=0.5)
    )
    summary = distill_cohort(
        matrix, acpb, StubPolicy(), CalibrationConfig(), store=store
    )
    return matrix, acpb, store, summary


def stored_record(pipeline):
    matrix, _, _, summary = pipeline
    by_id = {row.sample_id: row for row in matrix.rows}
    for rec in summary.records:
        if rec.saved_entry_id is not None:
            return by_id[rec.sample_id], rec.saved_entry_id
    raise AssertionError("no stored records")


def test_pipeline_fixture_mostly_converges(pipeline):
    _, _, store, summary = pipeline
    assert summary.converged_count >= 30
    assert len(store) == summary.converged_count


def test_predict_once_self_match_retrieves_own_precedent(pipeline):
    matrix, acpb, store, _ = pipeline
    row, entry_id = stored_record(pipeline)
    probe = SampleRecord(sample_id="probe", values=row.values)
    run = predict_once(probe, acpb, store, StubPolicy())
    assert run.retrieved.tier == TIER_INTERSECTION
    assert run.retrieved.final[0].entry_id == entry_id
    assert run.retrieved.final[0].similarity == 1.0
    table = match_record(probe, acpb)
    assert run.probability == infer_probability(table, run.weights)
    assert run.classification == classify(run.probability)


def test_predict_voted_with_deterministic_policy_is_unanimous(pipeline):
    matrix, acpb, store, _ = pipeline
    row, _ = stored_record(pipeline)
    probe = SampleRecord(sample_id="probe", values=row.values)
    voted = predict_voted(probe, acpb, store, StubPolicy())
    assert len(voted.runs) == 3
    assert voted.tally in ((3, 0), (0, 3))
    assert all(r == voted.runs[0] for r in voted.runs)
    assert voted.probability == voted.runs[0].probability
    assert voted.classification == voted.runs[0].classification


class ScriptedPolicy:
    """Returns a scripted weight vector per predict call."""

    def __init__(self, script):
        self.script = list(script)
        self.calls = 0

    def propose(self, request):
        raise AssertionError("propose is not used in prediction")

    def predict(self, request, temperature=None):
        weights = self.script[self.calls]
        self.calls += 1
        return PolicyResponse(weights=tuple(weights), guidance=f"run {self.calls}")


def contribution_handles(table):
    """Indices and values of the strongest positive and negative contributions."""
    contribs = [e.contribution_prob for e in table.entries]
    pos = max(range(len(contribs)), key=lambda i: contribs[i])
    neg = min(range(len(contribs)), key=lambda i: contribs[i])
    assert contribs[pos] > 0.02 and contribs[neg] < -0.02
    return pos, contribs[pos], neg, contribs[neg]


def weights_for_target(n, index, contribution, target):
    w = [0.0] * n
    w[index] = (target - 0.5) / contribution
    return tuple(w)


def scripted_probe(pipeline):
    """A record whose matched table has usable signal in both directions."""
    matrix, acpb, _, _ = pipeline
    for row in matrix.rows:
        probe = SampleRecord(sample_id="probe", values=row.values)
        table = match_record(probe, acpb)
        contribs = [e.contribution_prob for e in table.entries]
        if max(contribs) > 0.02 and min(contribs) < -0.02:
            return probe, table
    raise AssertionError("no suitable probe row")


def test_vote_majority_and_mean_over_majority_runs(pipeline):
    matrix, acpb, store, _ = pipeline
    probe, table = scripted_probe(pipeline)
    pos, c_pos, neg, c_neg = contribution_handles(table)
    n = len(table.entries)
    policy = ScriptedPolicy(
        [
            weights_for_target(n, pos, c_pos, 0.6),
            weights_for_target(n, neg, c_neg, 0.4),
            weights_for_target(n, pos, c_pos, 0.7),
        ]
    )
    voted = predict_voted(probe, acpb, store, policy)
    assert [r.classification for r in voted.runs] == [1, 0, 1]
    assert voted.classification == 1
    assert voted.tally == (1, 2)
    assert voted.probability == pytest.approx(0.65, abs=1e-9)


def test_vote_healthy_majority(pipeline):
    matrix, acpb, store, _ = pipeline
    probe, table = scripted_probe(pipeline)
    pos, c_pos, neg, c_neg = contribution_handles(table)
    n = len(table.entries)
    policy = ScriptedPolicy(
        [
            weights_for_target(n, neg, c_neg, 0.3),
            weights_for_target(n, pos, c_pos, 0.8),
            weights_for_target(n, neg, c_neg, 0.45),
        ]
    )
    voted = predict_voted(probe, acpb, store, policy)
    assert voted.classification == 0
    assert voted.tally == (2, 1)
    assert voted.probability == pytest.approx((0.3 + 0.45) / 2, abs=1e-9)


def test_predict_once_clamps_policy_weights(pipeline):
    matrix, acpb, store, _ = pipeline
    probe, table = scripted_probe(pipeline)
    n = len(table.entries)
    wild = [50.0] * n
    run = predict_once(probe, acpb, store, ScriptedPolicy([wild]))
    assert run.weights == (10.0,) * n
    assert run.probability == infer_probability(table, run.weights)


def test_predict_once_rejects_wrong_arity(pipeline):
    matrix, acpb, store, _ = pipeline
    probe, _ = scripted_probe(pipeline)
    with pytest.raises(PredictionError, match="weights for"):
        predict_once(probe, acpb, store, ScriptedPolicy([(1.0, 1.0)]))


class FailingPolicy:
    def __init__(self, fail_on):
        self.fail_on = fail_on
        self.calls = 0

    def propose(self, request):
        raise AssertionError("unused")

    def predict(self, request, temperature=None):
        self.calls += 1
        if self.calls == self.fail_on:
            raise PolicyError("backend fell over")
        n = len(request.table.entries)
        return PolicyResponse(weights=(1.0,) * n, guidance="ok")


def test_failed_run_aborts_vote_with_partial_runs(pipeline):
    matrix, acpb, store, _ = pipeline
    probe, _ = scripted_probe(pipeline)
    with pytest.raises(PredictionError, match="run 2 of 3") as excinfo:
        predict_voted(probe, acpb, store, FailingPolicy(fail_on=2))
    assert len(excinfo.value.partial_runs) == 1
    assert "probe" in str(excinfo.value)


def test_empty_store_fails_prediction(pipeline):
    matrix, acpb, store, _ = pipeline
    probe, _ = scripted_probe(pipeline)
    empty = DiagnosisKnowledgeBase(
        schema=store.schema,
        means=store.means,
        stds=store.stds,
        retrieval=store.retrieval,
    )
    with pytest.raises(RetrievalError):
        predict_once(probe, acpb, empty, StubPolicy())
    with pytest.raises(PredictionError, match="run 1"):
        predict_voted(probe, acpb, empty, StubPolicy())


# -- reports -------------------------------------------------------------------


def test_report_decomposition_matches_raw_probability(pipeline):
    matrix, acpb, store, _ = pipeline
    probe, table = scripted_probe(pipeline)
    voted = predict_voted(probe, acpb, store, StubPolicy())
    report = generate_report(voted, table, config_fingerprint="abc123")
    total = math.fsum(value for _, value in report.contributions)
    assert report.raw_probability == pytest.approx(0.5 + total, abs=1e-12)
    assert report.config_fingerprint == "abc123"
    # ranked by magnitude, name breaking ties
    magnitudes = [abs(v) for _, v in report.contributions]
    assert magnitudes == sorted(magnitudes, reverse=True)


def test_report_uses_first_majority_run(pipeline):
    matrix, acpb, store, _ = pipeline
    probe, table = scripted_probe(pipeline)
    pos, c_pos, neg, c_neg = contribution_handles(table)
    n = len(table.entries)
    script = [
        weights_for_target(n, neg, c_neg, 0.4),  # minority run
        weights_for_target(n, pos, c_pos, 0.6),  # first majority run
        weights_for_target(n, pos, c_pos, 0.7),
    ]
    voted = predict_voted(probe, acpb, store, ScriptedPolicy(script))
    report = generate_report(voted, table)
    assert voted.classification == 1
    assert report.weights == script[1]
    assert report.raw_probability == pytest.approx(0.6, abs=1e-9)
    assert report.guidance == "run 2"
    assert report.probability == voted.probability


def test_report_dict_and_text_render(pipeline):
    matrix, acpb, store, _ = pipeline
    probe, table = scripted_probe(pipeline)
    voted = predict_voted(probe, acpb, store, StubPolicy())
    report = generate_report(voted, table, config_fingerprint="deadbeef")
    doc = report_to_dict(report)
    assert doc["sample_id"] == "probe"
    assert doc["class_name"] in ("healthy", "unhealthy")
    assert doc["tally"] == {
        "healthy": voted.tally[0],
        "unhealthy": voted.tally[1],
    }
    assert len(doc["contributions"]) == len(table.entries)
    assert doc["config_fingerprint"] == "deadbeef"

    text = render_report_text(report)
    assert "case: probe" in text
    assert f"probability: {report.probability:.6f}" in text
    assert "raw probability" in text
    assert "precedents:" in text
    assert "config: deadbeef" in text


def test_out_of_support_note_in_text(pipeline):
    matrix, acpb, store, _ = pipeline
    # far outside the synthetic training range forces nearest-interval fallback
    values = tuple(1e6 for _ in range(len(acpb.schema)))
    probe = SampleRecord(sample_id="far", values=values)
    table = match_record(probe, acpb)
    assert table.out_of_support
    voted = predict_voted(probe, acpb, store, StubPolicy())
    report = generate_report(voted, table)
    assert report.out_of_support
    assert "outside the training support" in render_report_text(report)


def test_write_report_outputs_both_files(tmp_path, pipeline):
    matrix, acpb, store, _ = pipeline
    probe, table = scripted_probe(pipeline)
    voted = predict_voted(probe, acpb, store, StubPolicy())
    report = generate_report(voted, table)
    text_path = tmp_path / "report.txt"
    json_path = tmp_path / "report.json"
    write_report(report, text_path, json_path)
    assert text_path.read_text() == render_report_text(report)
    assert json.loads(json_path.read_text()) == report_to_dict(report)
