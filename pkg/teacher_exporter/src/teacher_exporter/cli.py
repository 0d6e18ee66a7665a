"""Command line entry point: run one export job from a JSON config."""

from __future__ import annotations

import sys
from typing import IO

from .export import ExportError, export
from .job import TableError, load_job


def main(argv: list[str] | None = None, out: IO[str] | None = None) -> int:
    args = sys.argv[1:] if argv is None else argv
    out = sys.stdout if out is None else out
    if len(args) != 1:
        print("usage: teacher-exporter JOB_CONFIG", file=sys.stderr)
        return 1
    try:
        job = load_job(args[0])
        result = export(job)
    except (TableError, ExportError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    sizes = result.split_sizes
    print(
        f"split: train={sizes[0]} val={sizes[1]} test={sizes[2]}", file=out
    )
    print(f"train accuracy: {result.train_accuracy:.4f}", file=out)
    print(f"val accuracy: {result.val_accuracy:.4f}", file=out)
    print(f"test accuracy: {result.test_accuracy:.4f}", file=out)
    print(
        f"kept {result.kept} of {sizes[0]} training rows "
        f"(max attribution residual {result.max_residual:.2e})",
        file=out,
    )
    print(f"wrote {result.matrix_path}", file=out)
    print(f"wrote {result.schema_path}", file=out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
