"""Export orchestration: splitting, filtering, output files, CLI."""

import io
import json
import random
from pathlib import Path

import numpy as np
import pytest
from sklearn.ensemble import GradientBoostingClassifier

from teacher_exporter.cli import main
from teacher_exporter.explain import ATTRIBUTION_TOLERANCE
from teacher_exporter.export import ExportError, export, split_table
from teacher_exporter.job import ExportJob, TableError

NAMES = ("grip", "gait", "falls", "mass", "age", "chair")


def write_cohort(path, n, seed, flip=0.0):
    """Labeled table with one integer-valued column and a learnable signal.

    flip > 0 inverts that fraction of labels so a weak teacher cannot fit
    the training rows perfectly.
    """
    rng = random.Random(seed)
    lines = ["sample_id," + ",".join(NAMES) + ",label"]
    for i in range(n):
        vals = [rng.uniform(-2.0, 2.0) for _ in range(6)]
        vals[2] = float(rng.randint(0, 5))
        margin = vals[0] - 0.8 * vals[1] + 0.3 * vals[2] + rng.gauss(0.0, 0.3)
        label = 1 if margin > 0 else 0
        if flip and rng.random() < flip:
            label = 1 - label
        lines.append(f"case{i:03d}," + ",".join(repr(v) for v in vals) + f",{label}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_cohort_arrays(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    data = [line.split(",") for line in lines[1:]]
    X = np.array([[float(c) for c in cells[1:7]] for cells in data])
    y = np.array([int(cells[7]) for cells in data])
    return X, y


def refit_teacher(job, X, y):
    parts = split_table(len(X), job.split, job.seed)
    model = GradientBoostingClassifier(
        n_estimators=job.rounds,
        max_depth=job.max_depth,
        learning_rate=0.1,
        random_state=job.seed,
    )
    model.fit(X[list(parts.train)], y[list(parts.train)])
    return model, parts


def make_job(root, **overrides):
    kwargs = dict(
        input_path=str(root / "table.csv"),
        label_column="label",
        features=NAMES,
        output_path=str(root / "matrix.csv"),
        rounds=25,
        max_depth=3,
        seed=5,
    )
    kwargs.update(overrides)
    return ExportJob(**kwargs)


def parse_matrix(path):
    lines = path.read_text(encoding="utf-8").splitlines()
    base = float(lines[0].removeprefix("# base_value="))
    header = lines[1].split(",")
    rows = [dict(zip(header, line.split(","))) for line in lines[2:]]
    return base, header, rows


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("export")
    write_cohort(root / "table.csv", n=90, seed=11)
    job = make_job(root)
    return job, export(job)


# -- splitting ----------------------------------------------------------------


def test_split_sizes_at_production_scale():
    parts = split_table(600, (0.6, 0.3, 0.1), seed=7)
    assert (len(parts.train), len(parts.val), len(parts.test)) == (360, 180, 60)


def test_split_is_a_partition():
    parts = split_table(101, (0.6, 0.3, 0.1), seed=3)
    combined = sorted(parts.train + parts.val + parts.test)
    assert combined == list(range(101))


def test_split_deterministic_per_seed():
    assert split_table(50, (0.6, 0.3, 0.1), 9) == split_table(50, (0.6, 0.3, 0.1), 9)
    assert split_table(50, (0.6, 0.3, 0.1), 9) != split_table(50, (0.6, 0.3, 0.1), 10)


def test_split_rejects_empty_parts():
    # 3 rows round to train=2 val=1 test=0
    with pytest.raises(ExportError, match="too small for split"):
        split_table(3, (0.6, 0.3, 0.1), seed=1)


# -- export behavior ----------------------------------------------------------


def test_export_reports_split_and_accuracies(run):
    job, result = run
    assert result.split_sizes == (54, 27, 9)
    for acc in (result.train_accuracy, result.val_accuracy, result.test_accuracy):
        assert 0.0 <= acc <= 1.0
    # a learnable signal should put the teacher well above chance on train
    assert result.train_accuracy > 0.9
    assert 0 < result.kept <= 54
    assert result.max_residual <= ATTRIBUTION_TOLERANCE


def test_export_is_deterministic(tmp_path, run):
    job, _ = run
    export(make_job(tmp_path, input_path=job.input_path))
    assert (tmp_path / "matrix.csv").read_bytes() == Path(job.output_path).read_bytes()
    assert (tmp_path / "matrix.csv.schema.json").read_bytes() == Path(
        job.output_path + ".schema.json"
    ).read_bytes()


def test_exported_rows_are_exactly_the_correct_ones(run):
    job, result = run
    base, header, rows = parse_matrix(Path(job.output_path))
    assert len(rows) == result.kept
    for row in rows:
        prob = float(row["teacher_prob"])
        assert 0.0 < prob < 1.0
        # the filter criterion itself: threshold the probability at 0.5
        assert int(prob >= 0.5) == int(row["label"])


def test_exported_ids_are_train_rows_in_input_order(run):
    job, _ = run
    _, _, rows = parse_matrix(Path(job.output_path))
    ids = [row["sample_id"] for row in rows]
    assert ids == sorted(ids)
    train_ids = {f"row{i:04d}" for i in split_table(90, job.split, job.seed).train}
    assert set(ids) <= train_ids


def test_filter_drops_misclassified_train_rows(tmp_path):
    # label noise plus a weak teacher guarantees misclassified train rows
    write_cohort(tmp_path / "table.csv", n=90, seed=11, flip=0.12)
    job = make_job(tmp_path, rounds=10, max_depth=2)
    result = export(job)
    assert result.kept < result.split_sizes[0]

    X, y = load_cohort_arrays(job.input_path)
    model, parts = refit_teacher(job, X, y)
    train_idx = sorted(parts.train)
    probs = model.predict_proba(X[train_idx])[:, 1]
    expected = [
        f"row{i:04d}"
        for i, p in zip(train_idx, probs)
        if int(p >= 0.5) == y[i]
    ]
    _, _, rows = parse_matrix(Path(job.output_path))
    assert [row["sample_id"] for row in rows] == expected


def test_attributions_reproduce_refit_model_margins(run):
    job, _ = run
    base, header, rows = parse_matrix(Path(job.output_path))

    # refit the identical teacher and compare margins on the exported rows
    X, y = load_cohort_arrays(job.input_path)
    model, _ = refit_teacher(job, X, y)

    values = np.array(
        [[float(row[f"v_{n}"]) for n in NAMES] for row in rows]
    )
    shap_sum = np.array(
        [sum(float(row[f"s_{n}"]) for n in NAMES) for row in rows]
    )
    margins = model.decision_function(values)
    assert np.abs(base + shap_sum - margins).max() <= ATTRIBUTION_TOLERANCE


def test_schema_sidecar_contents(run):
    job, _ = run
    doc = json.loads(Path(job.output_path + ".schema.json").read_text(encoding="utf-8"))
    assert [f["name"] for f in doc["features"]] == list(NAMES)
    kinds = {f["name"]: f["kind"] for f in doc["features"]}
    assert kinds["falls"] == "integer"
    assert kinds["grip"] == "continuous"
    assert doc["groups"] == [["grip", "gait"], ["falls", "mass"], ["age", "chair"]]


def test_export_rejects_missing_feature_column(tmp_path):
    write_cohort(tmp_path / "table.csv", n=30, seed=2)
    job = make_job(tmp_path, features=("grip", "gait", "falls", "mass", "age", "bmi"))
    with pytest.raises(TableError, match="missing feature columns \\['bmi'\\]"):
        export(job)


def test_export_rejects_non_binary_label(tmp_path):
    lines = ["sample_id," + ",".join(NAMES) + ",label"]
    lines.append("a,1,2,3,4,5,6,1")
    lines.append("b,6,5,4,3,2,1,maybe")
    (tmp_path / "table.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(TableError, match="label must be 0 or 1, got 'maybe'"):
        export(make_job(tmp_path))


def test_export_wraps_training_failure(tmp_path):
    # both classes exist, but seed 0 puts the lone positive outside the
    # train split, so the underlying fit sees a single class and raises
    rng = random.Random(1)
    lines = ["sample_id," + ",".join(NAMES) + ",label"]
    for i in range(12):
        vals = ",".join(repr(rng.uniform(0, 1)) for _ in range(6))
        lines.append(f"case{i},{vals},{1 if i == 0 else 0}")
    (tmp_path / "table.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    job = make_job(tmp_path, seed=0)
    assert 0 not in split_table(12, job.split, 0).train
    with pytest.raises(ExportError, match="training failure"):
        export(job)


# -- CLI ----------------------------------------------------------------------


def test_cli_runs_a_job(tmp_path, capsys):
    write_cohort(tmp_path / "table.csv", n=60, seed=4)
    job_doc = {
        "input": str(tmp_path / "table.csv"),
        "label_column": "label",
        "features": list(NAMES),
        "output": str(tmp_path / "matrix.csv"),
        "rounds": 10,
        "max_depth": 2,
        "seed": 3,
    }
    (tmp_path / "job.json").write_text(json.dumps(job_doc), encoding="utf-8")
    out = io.StringIO()
    assert main([str(tmp_path / "job.json")], out=out) == 0
    text = out.getvalue()
    assert "split: train=36 val=18 test=6" in text
    assert "train accuracy:" in text
    assert "val accuracy:" in text
    assert "test accuracy:" in text
    assert f"wrote {tmp_path / 'matrix.csv'}" in text
    assert (tmp_path / "matrix.csv").exists()
    assert (tmp_path / "matrix.csv.schema.json").exists()


def test_cli_usage_error(capsys):
    assert main([]) == 1
    assert "usage:" in capsys.readouterr().err


def test_cli_reports_bad_config(tmp_path, capsys):
    path = tmp_path / "job.json"
    path.write_text("{", encoding="utf-8")
    assert main([str(path)]) == 1
    assert "error:" in capsys.readouterr().err


def test_cli_reports_missing_input(tmp_path, capsys):
    job_doc = {
        "input": str(tmp_path / "absent.csv"),
        "label_column": "label",
        "features": list(NAMES),
        "output": str(tmp_path / "matrix.csv"),
    }
    (tmp_path / "job.json").write_text(json.dumps(job_doc), encoding="utf-8")
    assert main([str(tmp_path / "job.json")]) == 1
    assert "error:" in capsys.readouterr().err
