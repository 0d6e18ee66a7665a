"""Export job definition and labeled-table loading.

A job mirrors its JSON config file one to one: where the table lives, which
column is the label, which columns are features, how to split, and how big
the boosted teacher should be.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path


class TableError(ValueError):
    """The job config or the input table is malformed."""


@dataclass(frozen=True)
class ExportJob:
    input_path: str
    label_column: str
    features: tuple[str, ...]
    output_path: str
    split: tuple[float, float, float] = (0.6, 0.3, 0.1)
    rounds: int = 190
    max_depth: int = 8
    seed: int = 7

    def __post_init__(self) -> None:
        if not self.features:
            raise TableError("feature list is empty")
        if len(set(self.features)) != len(self.features):
            raise TableError("feature list contains duplicates")
        if len(self.features) % 3 != 0:
            # the consumer partitions features into 3 equal groups
            raise TableError(
                f"feature count must be divisible by 3, got {len(self.features)}"
            )
        if self.label_column in self.features:
            raise TableError(f"label column {self.label_column!r} is also a feature")
        if len(self.split) != 3 or any(s <= 0 for s in self.split):
            raise TableError(f"split must be three positive fractions, got {self.split!r}")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise TableError(f"split fractions must sum to 1, got {self.split!r}")
        if self.rounds < 1:
            raise TableError(f"rounds must be >= 1, got {self.rounds!r}")
        if self.max_depth < 1:
            raise TableError(f"max_depth must be >= 1, got {self.max_depth!r}")


_JOB_KEYS = {
    "input", "label_column", "features", "output",
    "split", "rounds", "max_depth", "seed",
}


def load_job(path: str | Path) -> ExportJob:
    """Read a job config file; unknown keys are rejected, not ignored."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise TableError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise TableError(f"{path}: job config must be a JSON object")
    unknown = sorted(set(doc) - _JOB_KEYS)
    if unknown:
        raise TableError(f"{path}: unknown job keys {unknown}")
    for key in ("input", "label_column", "features", "output"):
        if key not in doc:
            raise TableError(f"{path}: missing required key {key!r}")
    return ExportJob(
        input_path=str(doc["input"]),
        label_column=str(doc["label_column"]),
        features=tuple(str(f) for f in doc["features"]),
        output_path=str(doc["output"]),
        split=tuple(float(s) for s in doc.get("split", (0.6, 0.3, 0.1))),
        rounds=int(doc.get("rounds", 190)),
        max_depth=int(doc.get("max_depth", 8)),
        seed=int(doc.get("seed", 7)),
    )


@dataclass(frozen=True)
class LabeledTable:
    """Feature rows plus binary labels, in input order."""

    sample_ids: tuple[str, ...]
    features: tuple[str, ...]
    rows: tuple[tuple[float, ...], ...]
    labels: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.rows)


def load_table(job: ExportJob) -> LabeledTable:
    """Read the labeled CSV table the job points at.

    Columns are matched by header name; columns outside the feature list and
    label are ignored. Sample ids are assigned by row position so exported
    rows stay traceable to the input file.
    """
    path = Path(job.input_path)
    lines = path.read_text(encoding="utf-8").splitlines()
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise TableError(f"{path}: empty table") from None
    index = {name: i for i, name in enumerate(header)}
    if len(index) != len(header):
        raise TableError(f"{path}: duplicate column names in header")
    missing = [f for f in job.features if f not in index]
    if missing:
        raise TableError(f"{path}: missing feature columns {missing}")
    if job.label_column not in index:
        raise TableError(f"{path}: missing label column {job.label_column!r}")

    sample_ids = []
    rows = []
    labels = []
    for lineno, cells in enumerate(reader, start=2):
        if not cells:
            continue
        if len(cells) != len(header):
            raise TableError(
                f"{path} line {lineno}: {len(cells)} cells for {len(header)} columns"
            )
        values = []
        for name in job.features:
            cell = cells[index[name]]
            try:
                v = float(cell)
            except ValueError:
                raise TableError(
                    f"{path} line {lineno}: column {name!r} is not numeric: {cell!r}"
                ) from None
            if not math.isfinite(v):
                raise TableError(
                    f"{path} line {lineno}: column {name!r} is not finite: {cell!r}"
                )
            values.append(v)
        label_cell = cells[index[job.label_column]].strip()
        if label_cell not in ("0", "1"):
            raise TableError(
                f"{path} line {lineno}: label must be 0 or 1, got {label_cell!r}"
            )
        sample_ids.append(f"row{lineno - 2:04d}")
        rows.append(tuple(values))
        labels.append(int(label_cell))
    if not rows:
        raise TableError(f"{path}: table has no data rows")
    if len(set(labels)) < 2:
        raise TableError(f"{path}: label column holds a single class; need both 0 and 1")
    return LabeledTable(
        sample_ids=tuple(sample_ids),
        features=job.features,
        rows=tuple(rows),
        labels=tuple(labels),
    )
