"""Feature schema definition and loaders for teacher-exported attribution files.

All loaders are pure functions of file contents and return immutable values,
so results can be shared freely across threads.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

KIND_CONTINUOUS = "continuous"
KIND_INTEGER = "integer"
_KINDS = (KIND_CONTINUOUS, KIND_INTEGER)

LABEL_HEALTHY = 0
LABEL_UNHEALTHY = 1


class IngestError(ValueError):
    """An input file violates the schema, matrix, or case contract."""


class SchemaFormatError(IngestError):
    pass


class MatrixFormatError(IngestError):
    pass


class CaseFormatError(IngestError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    """One feature: its name, value kind, and a free-text description.

    The kind decides how raw values are discretized: continuous values land in
    half-step intervals, integer values must match a whole-number midpoint
    exactly.
    """

    name: str
    kind: str
    description: str = ""

    def __post_init__(self) -> None:
        if not self.name:
            raise SchemaFormatError("feature name must be non-empty")
        if self.kind not in _KINDS:
            raise SchemaFormatError(
                f"feature {self.name!r}: kind must be one of {_KINDS}, got {self.kind!r}"
            )


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature list plus the three-way group partition used by retrieval.

    Feature order is significant: it fixes column order in every file format
    and the default contiguous grouping.
    """

    features: tuple[FeatureSpec, ...]
    group_partition: tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]

    def __post_init__(self) -> None:
        names = [spec.name for spec in self.features]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise SchemaFormatError(f"duplicate feature names: {dupes}")
        _validate_partition(self.group_partition, len(self.features))

    def __len__(self) -> int:
        return len(self.features)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(spec.name for spec in self.features)

    @property
    def descriptions(self) -> tuple[str, ...]:
        return tuple(spec.description for spec in self.features)


def _validate_partition(groups, n_features: int) -> None:
    if len(groups) != 3:
        raise SchemaFormatError(f"group partition must have 3 groups, got {len(groups)}")
    sizes = {len(g) for g in groups}
    if len(sizes) != 1:
        raise SchemaFormatError(
            f"group sizes must be equal, got {[len(g) for g in groups]}"
        )
    flat = [i for g in groups for i in g]
    if sorted(flat) != list(range(n_features)):
        raise SchemaFormatError(
            "group partition must cover every feature index exactly once"
        )


def contiguous_partition(n_features: int) -> tuple[tuple[int, ...], ...]:
    """Default grouping: contiguous thirds in declared feature order."""
    if n_features % 3 != 0:
        raise SchemaFormatError(
            f"cannot split {n_features} features into 3 equal groups"
        )
    third = n_features // 3
    return tuple(
        tuple(range(start, start + third)) for start in (0, third, 2 * third)
    )


def make_schema(
    features: list[FeatureSpec] | tuple[FeatureSpec, ...],
    groups: tuple[tuple[int, ...], ...] | None = None,
) -> FeatureSchema:
    feats = tuple(features)
    if groups is None:
        groups = contiguous_partition(len(feats))
    return FeatureSchema(feats, tuple(tuple(g) for g in groups))


@dataclass(frozen=True)
class SampleRecord:
    """One row: raw feature values, optionally attributions and teacher output.

    New/unseen cases carry only values; training rows also carry per-feature
    attributions and the teacher probability.
    """

    sample_id: str
    values: tuple[float, ...]
    shap: tuple[float, ...] | None = None
    teacher_prob: float | None = None
    label: int | None = None


@dataclass(frozen=True)
class FeatureShapMatrix:
    """Training rows with attributions plus the single shared base value."""

    schema: FeatureSchema
    base_value: float
    rows: tuple[SampleRecord, ...]

    def __post_init__(self) -> None:
        for row in self.rows:
            if row.shap is None or row.teacher_prob is None:
                raise MatrixFormatError(
                    f"row {row.sample_id!r}: matrix rows need attributions and teacher_prob"
                )


def schema_to_dict(schema: FeatureSchema) -> dict:
    return {
        "features": [
            {"name": s.name, "kind": s.kind, "description": s.description}
            for s in schema.features
        ],
        "groups": [[schema.features[i].name for i in g] for g in schema.group_partition],
    }


def schema_from_dict(doc: dict) -> FeatureSchema:
    try:
        raw_features = doc["features"]
    except (KeyError, TypeError):
        raise SchemaFormatError("schema document missing 'features' list") from None
    if not isinstance(raw_features, list) or not raw_features:
        raise SchemaFormatError("'features' must be a non-empty list")
    features = []
    for item in raw_features:
        if not isinstance(item, dict) or "name" not in item or "kind" not in item:
            raise SchemaFormatError(f"malformed feature entry: {item!r}")
        features.append(
            FeatureSpec(
                name=str(item["name"]),
                kind=str(item["kind"]),
                description=str(item.get("description", "")),
            )
        )
    name_to_index = {spec.name: i for i, spec in enumerate(features)}
    groups_doc = doc.get("groups")
    if groups_doc is None:
        groups = None
    else:
        if not isinstance(groups_doc, list) or len(groups_doc) != 3:
            raise SchemaFormatError("'groups' must be three lists of feature names")
        groups = []
        for g in groups_doc:
            indices = []
            for name in g:
                if name not in name_to_index:
                    raise SchemaFormatError(f"group names unknown feature {name!r}")
                indices.append(name_to_index[name])
            groups.append(tuple(indices))
        groups = tuple(groups)
    return make_schema(features, groups)


def schema_fingerprint(schema: FeatureSchema) -> str:
    """Stable hash of the schema contents, recorded in downstream file headers."""
    payload = json.dumps(schema_to_dict(schema), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def load_schema(path: str | Path) -> FeatureSchema:
    """Load and validate a feature schema document.

    When the document gives no groups, features are split into contiguous
    thirds in declared order.
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaFormatError(f"{path}: not valid JSON: {exc}") from exc
    return schema_from_dict(doc)


def write_schema(schema: FeatureSchema, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(schema_to_dict(schema), indent=2) + "\n", encoding="utf-8"
    )


# -- matrix files ------------------------------------------------------------

_BASE_VALUE_PREFIX = "# base_value="


def _matrix_header(schema: FeatureSchema) -> list[str]:
    return (
        ["sample_id"]
        + [f"v_{n}" for n in schema.names]
        + [f"s_{n}" for n in schema.names]
        + ["teacher_prob", "label"]
    )


def _parse_number(cell: str, where: str) -> float:
    try:
        x = float(cell)
    except ValueError:
        raise MatrixFormatError(f"{where}: non-numeric value {cell!r}") from None
    if not math.isfinite(x):
        raise MatrixFormatError(f"{where}: non-finite value {cell!r}")
    return x


def _check_value_kinds(values: tuple[float, ...], schema: FeatureSchema, where: str, err) -> None:
    for spec, v in zip(schema.features, values):
        if spec.kind == KIND_INTEGER and not float(v).is_integer():
            raise err(
                f"{where}: integer feature {spec.name!r} holds fractional value {v!r}"
            )


def load_matrix(path: str | Path, schema: FeatureSchema) -> FeatureShapMatrix:
    """Load a teacher-exported attribution matrix and validate it row by row.

    Rejects missing columns, non-numeric cells, teacher probabilities outside
    the open interval (0, 1), and fractional values in integer-kind columns.
    Row order is preserved exactly.
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(_BASE_VALUE_PREFIX):
        raise MatrixFormatError(f"{path}: first line must carry '{_BASE_VALUE_PREFIX}<number>'")
    base_value = _parse_number(lines[0][len(_BASE_VALUE_PREFIX):].strip(), f"{path} base_value")

    reader = csv.reader(lines[1:])
    try:
        header = next(reader)
    except StopIteration:
        raise MatrixFormatError(f"{path}: missing header row") from None
    expected = _matrix_header(schema)
    if header != expected:
        missing = [c for c in expected if c not in header]
        extra = [c for c in header if c not in expected]
        detail = []
        if missing:
            detail.append(f"missing columns {missing}")
        if extra:
            detail.append(f"unexpected columns {extra}")
        if not detail:
            detail.append("columns out of order")
        raise MatrixFormatError(f"{path}: header mismatch: {'; '.join(detail)}")

    n = len(schema)
    rows = []
    for lineno, cells in enumerate(reader, start=3):
        if not cells:
            continue
        if len(cells) != len(expected):
            raise MatrixFormatError(
                f"{path} line {lineno}: expected {len(expected)} cells, got {len(cells)}"
            )
        sample_id = cells[0]
        where = f"{path} line {lineno} (sample {sample_id!r})"
        values = tuple(_parse_number(c, where) for c in cells[1 : 1 + n])
        shap = tuple(_parse_number(c, where) for c in cells[1 + n : 1 + 2 * n])
        teacher_prob = _parse_number(cells[1 + 2 * n], where)
        if not 0.0 < teacher_prob < 1.0:
            raise MatrixFormatError(
                f"{where}: teacher_prob {teacher_prob!r} not strictly inside (0, 1)"
            )
        label_cell = cells[2 + 2 * n]
        if label_cell == "":
            label = None
        elif label_cell in ("0", "1"):
            label = int(label_cell)
        else:
            raise MatrixFormatError(f"{where}: label must be 0, 1, or empty, got {label_cell!r}")
        _check_value_kinds(values, schema, where, MatrixFormatError)
        rows.append(
            SampleRecord(
                sample_id=sample_id,
                values=values,
                shap=shap,
                teacher_prob=teacher_prob,
                label=label,
            )
        )
    return FeatureShapMatrix(schema=schema, base_value=base_value, rows=tuple(rows))


def write_matrix(matrix: FeatureShapMatrix, path: str | Path) -> None:
    """Write a matrix file; numbers use shortest round-trip decimal form."""
    out = [f"{_BASE_VALUE_PREFIX}{matrix.base_value!r}"]
    out.append(",".join(_matrix_header(matrix.schema)))
    for row in matrix.rows:
        cells = [row.sample_id]
        cells += [repr(v) for v in row.values]
        cells += [repr(s) for s in row.shap]
        cells.append(repr(row.teacher_prob))
        cells.append("" if row.label is None else str(row.label))
        out.append(",".join(cells))
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


# -- case files --------------------------------------------------------------


def load_case(path: str | Path, schema: FeatureSchema) -> SampleRecord:
    """Load a single raw-valued case (no attributions, no teacher output)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise CaseFormatError(f"{path}: empty case file") from None
    expected = ["sample_id"] + [f"v_{n}" for n in schema.names]
    if header != expected:
        raise CaseFormatError(
            f"{path}: case header mismatch; expected {len(expected)} columns "
            f"({expected[:3]}...), got {len(header)}"
        )
    data = [cells for cells in reader if cells]
    if len(data) != 1:
        raise CaseFormatError(f"{path}: case file must hold exactly one record, got {len(data)}")
    cells = data[0]
    if len(cells) != len(expected):
        raise CaseFormatError(
            f"{path}: expected {len(expected)} cells, got {len(cells)}"
        )
    sample_id = cells[0]
    where = f"{path} (sample {sample_id!r})"
    try:
        values = tuple(_parse_number(c, where) for c in cells[1:])
    except MatrixFormatError as exc:
        raise CaseFormatError(str(exc)) from None
    _check_value_kinds(values, schema, where, CaseFormatError)
    return SampleRecord(sample_id=sample_id, values=values)


def write_case(record: SampleRecord, schema: FeatureSchema, path: str | Path) -> None:
    header = ",".join(["sample_id"] + [f"v_{n}" for n in schema.names])
    row = ",".join([record.sample_id] + [repr(v) for v in record.values])
    Path(path).write_text(header + "\n" + row + "\n", encoding="utf-8")
