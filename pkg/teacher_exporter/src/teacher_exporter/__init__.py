"""Gradient boosted teacher training and per-feature attribution export.

Trains a binary classifier on a labeled CSV, keeps the training rows it
classifies correctly, computes exact single-reference Shapley attributions of
the decision margin for each kept row, and writes them in the matrix format
the downstream distillation pipeline ingests.
"""

from .explain import ATTRIBUTION_TOLERANCE, margin_attributions
from .export import ExportError, ExportResult, export, split_table
from .job import ExportJob, LabeledTable, TableError, load_job, load_table

__all__ = [
    "ATTRIBUTION_TOLERANCE",
    "ExportError",
    "ExportJob",
    "ExportResult",
    "LabeledTable",
    "TableError",
    "export",
    "load_job",
    "load_table",
    "margin_attributions",
    "split_table",
]

__version__ = "0.1.0"
