import json
import math
import random

import pytest

from helpers import make_matrix, schema3
from shapdistill.cacs import (
    build_acpb,
    contribution_probability,
    load_acpb,
    match_record,
    sigmoid,
    write_acpb,
)
from shapdistill.haga import build_knowledge_base
from shapdistill.schema_ingest import SampleRecord


def test_sigmoid_reference_points():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(0.4) == pytest.approx(1.0 / (1.0 + math.exp(-0.4)), abs=1e-15)
    assert sigmoid(-3.0) == pytest.approx(1.0 - sigmoid(3.0), abs=1e-15)


def test_sigmoid_extremes_do_not_overflow():
    assert sigmoid(800.0) == 1.0
    assert sigmoid(-800.0) == 0.0


def test_contribution_probability_against_direct_formula():
    rng = random.Random(3)
    for _ in range(200):
        base = rng.uniform(-2.0, 2.0)
        shap = rng.uniform(-1.0, 1.0)
        direct = 1.0 / (1.0 + math.exp(-(base + shap))) - 1.0 / (1.0 + math.exp(-base))
        assert contribution_probability(base, shap) == pytest.approx(direct, abs=1e-15)


def test_contribution_probability_sign_follows_attribution():
    for base in (-1.5, 0.0, 0.7):
        assert contribution_probability(base, 0.0) == 0.0
        assert contribution_probability(base, 0.3) > 0.0
        assert contribution_probability(base, -0.3) < 0.0
        assert -1.0 < contribution_probability(base, 5.0) < 1.0


def fixture_acpb():
    matrix = make_matrix(
        schema3(),
        [
            ("s1", (31.2, 0.9, 2.0), (0.1, -0.3, 0.05), 0.6, 1),
            ("s2", (30.9, 0.3, 2.0), (0.3, 0.1, 0.15), 0.7, 1),
            ("s3", (28.0, 0.9, 1.0), (0.5, -0.1, 0.2), 0.8, 0),
        ],
        base_value=0.25,
    )
    return build_acpb(build_knowledge_base(matrix))


def test_build_acpb_preserves_structure_and_maps_contributions():
    acpb = fixture_acpb()
    assert acpb.base_value == 0.25
    grip = acpb.features[0]
    assert [e.midpoint for e in grip] == [28.0, 31.0]
    assert [e.count for e in grip] == [1, 2]
    expected = sigmoid(0.25 + grip[1].mean_shap) - sigmoid(0.25)
    assert grip[1].contribution_prob == expected


def test_match_record_exact_and_fallback():
    acpb = fixture_acpb()
    record = SampleRecord(sample_id="c1", values=(30.8, 0.4, 2.0))
    table = match_record(record, acpb)
    assert table.sample_id == "c1"
    grip = table.entries[0]
    assert grip.midpoint == 31.0 and grip.exact
    gait = table.entries[1]
    assert gait.midpoint == 0.5 and gait.exact
    falls = table.entries[2]
    assert falls.midpoint == 2.0 and falls.exact
    assert not table.out_of_support


def test_match_record_out_of_support_uses_nearest():
    acpb = fixture_acpb()
    # grip 40 assigns to 40.0 which was never seen; nearest stored is 31.0
    record = SampleRecord(sample_id="c2", values=(40.0, 0.9, 2.0))
    table = match_record(record, acpb)
    grip = table.entries[0]
    assert grip.midpoint == 31.0
    assert not grip.exact
    assert table.out_of_support
    stored = acpb.entry_at(0, 31.0)
    assert grip.contribution_prob == stored.contribution_prob


def test_match_record_rejects_wrong_arity():
    acpb = fixture_acpb()
    with pytest.raises(ValueError, match="3"):
        match_record(SampleRecord(sample_id="c", values=(1.0, 2.0)), acpb)


def test_match_record_contributions_property():
    acpb = fixture_acpb()
    record = SampleRecord(sample_id="c1", values=(28.0, 0.9, 1.0))
    table = match_record(record, acpb)
    assert table.contributions == tuple(e.contribution_prob for e in table.entries)


def test_acpb_round_trip_exact(tmp_path):
    acpb = fixture_acpb()
    path = tmp_path / "acpb.json"
    write_acpb(acpb, path)
    assert load_acpb(path) == acpb


def test_acpb_rejects_wrong_format(tmp_path):
    path = tmp_path / "acpb.json"
    path.write_text(json.dumps({"format": "other", "version": 1}))
    with pytest.raises(ValueError, match="format"):
        load_acpb(path)


def test_acpb_rejects_tampered_schema_hash(tmp_path):
    acpb = fixture_acpb()
    path = tmp_path / "acpb.json"
    write_acpb(acpb, path)
    doc = json.loads(path.read_text())
    doc["schema_hash"] = "0" * 64
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="hash"):
        load_acpb(path)
