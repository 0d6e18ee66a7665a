"""Command-line pipeline: synth, extract, distill, predict, evaluate.

Settings resolve in three layers: built-in defaults, then a JSON config file,
then explicit flags. Every run of a command on the same inputs and settings
produces byte-identical outputs; no timestamps or machine identifiers are
written.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

from .cacs import build_acpb, load_acpb, match_record, write_acpb
from .calibration import (
    CalibrationConfig,
    CalibrationError,
    distill_cohort,
    write_summary,
)
from .evaluation import (
    bias_stats,
    class_metrics,
    concordance,
    concordance_categories,
    confusion_from_predictions,
    default_synthetic_config,
    synth_generate,
)
from .haga import build_knowledge_base
from .knowledge_base import (
    DiagnosisKnowledgeBase,
    RemoteTextEmbedder,
    RetrievalConfig,
    RetrievalError,
    StoreError,
    open_store,
    persist,
)
from .policy import (
    PolicyError,
    RemoteChatPolicy,
    RemotePolicyConfig,
    StubPolicy,
)
from .prediction import (
    PredictionConfig,
    PredictionError,
    generate_report,
    predict_voted,
    write_report,
)
from .schema_ingest import (
    IngestError,
    load_case,
    load_matrix,
    load_schema,
    write_matrix,
    write_schema,
)

POLICY_CHOICES = ("stub", "remote")
EMBEDDER_CHOICES = ("standardized", "remote")


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the pipeline in one place, hashable for provenance."""

    step: float = 0.5
    epsilon: float = 0.05
    max_iters: int = 20
    weight_bound: float = 10.0
    damping: float = 0.7
    literal_alignment: bool = False
    include_unconverged: bool = False
    k: int = 8
    threshold: float = 0.7
    global_fallback: bool = True
    runs: int = 3
    vote_temperature: float | None = None
    policy: str = "stub"
    remote_base_url: str = ""
    remote_model: str = ""
    remote_token_env: str = "SHAPDISTILL_POLICY_TOKEN"
    remote_timeout: float = 30.0
    remote_retries: int = 3
    remote_reparse_attempts: int = 2
    remote_temperature: float = 0.0
    embedder: str = "standardized"
    embed_url: str = ""
    embed_model: str = ""
    embed_token_env: str = "SHAPDISTILL_EMBED_TOKEN"
    seed: int = 7

    def __post_init__(self) -> None:
        if self.policy not in POLICY_CHOICES:
            raise ValueError(f"policy must be one of {POLICY_CHOICES}, got {self.policy!r}")
        if self.embedder not in EMBEDDER_CHOICES:
            raise ValueError(
                f"embedder must be one of {EMBEDDER_CHOICES}, got {self.embedder!r}"
            )

    def fingerprint(self) -> str:
        payload = json.dumps(
            dataclasses.asdict(self), sort_keys=True, separators=(",", ":")
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


_CONFIG_FIELDS = {f.name for f in dataclasses.fields(PipelineConfig)}


def load_pipeline_config(
    config_path: str | None, overrides: dict
) -> PipelineConfig:
    """Defaults, overlaid by the config file, overlaid by explicit flags."""
    merged: dict = {}
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{config_path}: not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ValueError(f"{config_path}: config must be a JSON object")
        unknown = sorted(set(doc) - _CONFIG_FIELDS)
        if unknown:
            raise ValueError(f"{config_path}: unknown config keys {unknown}")
        merged.update(doc)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig(**merged)


def make_policy(cfg: PipelineConfig, feature_names: tuple[str, ...]):
    if cfg.policy == "stub":
        return StubPolicy(damping=cfg.damping)
    if not cfg.remote_base_url or not cfg.remote_model:
        raise ValueError(
            "remote policy requires --remote-base-url and --remote-model"
        )
    return RemoteChatPolicy(
        RemotePolicyConfig(
            base_url=cfg.remote_base_url,
            model=cfg.remote_model,
            token_env=cfg.remote_token_env,
            timeout=cfg.remote_timeout,
            max_retries=cfg.remote_retries,
            reparse_attempts=cfg.remote_reparse_attempts,
            temperature=cfg.remote_temperature,
        ),
        feature_names=feature_names,
        weight_bound=cfg.weight_bound,
    )


def make_embedder(cfg: PipelineConfig):
    """None means the store's own standardized embedder."""
    if cfg.embedder == "standardized":
        return None
    if not cfg.embed_url or not cfg.embed_model:
        raise ValueError("remote embedder requires --embed-url and --embed-model")
    return RemoteTextEmbedder(
        base_url=cfg.embed_url,
        model=cfg.embed_model,
        token_env=cfg.embed_token_env,
    )


def _retrieval_config(cfg: PipelineConfig) -> RetrievalConfig:
    return RetrievalConfig(
        k=cfg.k, threshold=cfg.threshold, global_fallback=cfg.global_fallback
    )


def _calibration_config(cfg: PipelineConfig) -> CalibrationConfig:
    return CalibrationConfig(
        epsilon=cfg.epsilon,
        max_iters=cfg.max_iters,
        weight_bound=cfg.weight_bound,
        literal_alignment=cfg.literal_alignment,
        include_unconverged=cfg.include_unconverged,
    )


# -- commands ------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace, cfg: PipelineConfig, out) -> int:
    synth_cfg = default_synthetic_config(
        seed=cfg.seed,
        n_features=args.features,
        n_integer=args.integer_features,
        effect_scale=args.effect_scale,
        intercept=args.intercept,
        step=cfg.step,
    )
    matrix = synth_generate(synth_cfg, args.n)
    write_matrix(matrix, args.out)
    write_schema(matrix.schema, args.out_schema)
    print(f"wrote {len(matrix.rows)} rows to {args.out}", file=out)
    print(f"wrote schema ({len(matrix.schema)} features) to {args.out_schema}", file=out)
    return 0


def cmd_extract(args: argparse.Namespace, cfg: PipelineConfig, out) -> int:
    schema = load_schema(args.schema)
    matrix = load_matrix(args.matrix, schema)
    skb = build_knowledge_base(matrix, step=cfg.step)
    acpb = build_acpb(skb)
    write_acpb(acpb, args.out)
    total = 0
    for i, spec in enumerate(schema.features):
        count = len(acpb.features[i])
        total += count
        print(f"{spec.name}: {count} intervals", file=out)
    print(
        f"wrote contribution base ({total} intervals, base value "
        f"{acpb.base_value!r}) to {args.out}",
        file=out,
    )
    return 0


def cmd_distill(args: argparse.Namespace, cfg: PipelineConfig, out) -> int:
    acpb = load_acpb(args.acpb)
    matrix = load_matrix(args.matrix, acpb.schema)
    store = DiagnosisKnowledgeBase.create(
        matrix, retrieval=_retrieval_config(cfg), embedder=make_embedder(cfg)
    )
    policy = make_policy(cfg, acpb.schema.names)
    summary = distill_cohort(
        matrix, acpb, policy, _calibration_config(cfg), store=store
    )
    persist(store, args.out_store)
    if args.out_summary:
        write_summary(summary, args.out_summary)
    print(
        f"calibrated {summary.converged_count}/{summary.total} cases "
        f"within epsilon={cfg.epsilon}",
        file=out,
    )
    if summary.unconverged_ids:
        kept = "kept" if cfg.include_unconverged else "not stored"
        print(
            f"unconverged ({kept}): {', '.join(summary.unconverged_ids)}",
            file=out,
        )
    print(f"wrote store ({len(store)} entries) to {args.out_store}", file=out)
    return 0


def cmd_predict(args: argparse.Namespace, cfg: PipelineConfig, out) -> int:
    acpb = load_acpb(args.acpb)
    store = open_store(args.store, embedder=make_embedder(cfg))
    record = load_case(args.case, acpb.schema)
    policy = make_policy(cfg, acpb.schema.names)
    pred_cfg = PredictionConfig(
        runs=cfg.runs,
        weight_bound=cfg.weight_bound,
        vote_temperature=cfg.vote_temperature,
        retrieval=_retrieval_config(cfg),
    )
    voted = predict_voted(record, acpb, store, policy, pred_cfg)
    table = match_record(record, acpb)
    report = generate_report(voted, table, config_fingerprint=cfg.fingerprint())
    text_path = args.out + ".txt"
    json_path = args.out + ".json"
    write_report(report, text_path, json_path)
    name = "unhealthy" if report.classification == 1 else "healthy"
    print(
        f"{record.sample_id}: {name} ({report.classification}), "
        f"probability {report.probability:.6f}, votes "
        f"healthy={report.tally[0]} unhealthy={report.tally[1]}, "
        f"tier {report.tier}",
        file=out,
    )
    print(f"wrote report to {text_path} and {json_path}", file=out)
    return 0


def _read_labels(path: str) -> list[int]:
    labels = []
    for lineno, line in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        line = line.strip()
        if not line:
            continue
        if line not in ("0", "1"):
            raise ValueError(f"{path} line {lineno}: label must be 0 or 1, got {line!r}")
        labels.append(int(line))
    return labels


def _read_probs(path: str) -> list[float]:
    probs = []
    for lineno, line in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        line = line.strip()
        if not line:
            continue
        try:
            probs.append(float(line))
        except ValueError:
            raise ValueError(
                f"{path} line {lineno}: not a probability: {line!r}"
            ) from None
    return probs


def _fmt(x: float | None, digits: int = 4) -> str:
    return "n/a" if x is None else f"{x:.{digits}f}"


def _print_model_metrics(name: str, cm, out) -> dict:
    metrics = class_metrics(cm)
    print(f"{name} (n={cm.total}):", file=out)
    print(
        f"  confusion: tp={cm.tp} fn={cm.fn} fp={cm.fp} tn={cm.tn}",
        file=out,
    )
    print(f"  accuracy:  {_fmt(metrics.accuracy)}", file=out)
    for label, scores in (("unhealthy", metrics.unhealthy), ("healthy", metrics.healthy)):
        print(
            f"  {label:<10} precision={_fmt(scores.precision)} "
            f"recall={_fmt(scores.recall)} f1={_fmt(scores.f1)}",
            file=out,
        )
    return {
        "confusion": {"tp": cm.tp, "fn": cm.fn, "fp": cm.fp, "tn": cm.tn},
        "accuracy": metrics.accuracy,
        "unhealthy": dataclasses.asdict(metrics.unhealthy),
        "healthy": dataclasses.asdict(metrics.healthy),
    }


def cmd_evaluate(args: argparse.Namespace, cfg: PipelineConfig, out) -> int:
    truth = _read_labels(args.truth)
    preds_a = _read_labels(args.pred_a)
    if len(preds_a) != len(truth):
        raise ValueError(
            f"{args.pred_a} has {len(preds_a)} labels, truth has {len(truth)}"
        )
    doc: dict = {}
    doc["model_a"] = _print_model_metrics(
        "model A", confusion_from_predictions(preds_a, truth), out
    )
    if args.pred_b:
        preds_b = _read_labels(args.pred_b)
        if len(preds_b) != len(truth):
            raise ValueError(
                f"{args.pred_b} has {len(preds_b)} labels, truth has {len(truth)}"
            )
        doc["model_b"] = _print_model_metrics(
            "model B", confusion_from_predictions(preds_b, truth), out
        )
        breakdown = concordance(preds_a, preds_b, truth)
        fr = breakdown.fractions
        print(f"concordance (n={breakdown.total}):", file=out)
        for label, count, frac in (
            ("both correct", breakdown.both_correct, fr[0]),
            ("both wrong", breakdown.both_wrong, fr[1]),
            ("A only correct", breakdown.a_only_correct, fr[2]),
            ("B only correct", breakdown.b_only_correct, fr[3]),
        ):
            print(f"  {label:<16} {count:>4}  ({100 * frac:.1f}%)", file=out)
        doc["concordance"] = {
            "both_correct": breakdown.both_correct,
            "both_wrong": breakdown.both_wrong,
            "a_only_correct": breakdown.a_only_correct,
            "b_only_correct": breakdown.b_only_correct,
            "fractions": list(fr),
            "categories": list(concordance_categories(preds_a, preds_b, truth)),
        }
    for tag, path in (("a", args.probs_a), ("b", args.probs_b)):
        if not path:
            continue
        if not args.teacher_probs:
            raise ValueError("--probs-a/--probs-b need --teacher-probs for bias stats")
        teacher = _read_probs(args.teacher_probs)
        model = _read_probs(path)
        stats = bias_stats(teacher, model)
        print(
            f"bias teacher-minus-{tag} (n={stats.n}): mean={stats.mean:.5f} "
            f"std={stats.std:.5f} median={stats.median:.5f} "
            f"min={stats.min:.5f} max={stats.max:.5f}",
            file=out,
        )
        doc[f"bias_{tag}"] = dataclasses.asdict(stats)
    if args.out:
        Path(args.out).write_text(
            json.dumps(doc, indent=2) + "\n", encoding="utf-8"
        )
        print(f"wrote metrics to {args.out}", file=out)
    return 0


# -- argument parsing ----------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of pipeline settings")
    p.add_argument("--step", type=float, help="interval grid step")
    p.add_argument("--epsilon", type=float, help="relative deviation threshold")
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--weight-bound", dest="weight_bound", type=float)
    p.add_argument("--damping", type=float)
    p.add_argument(
        "--literal-alignment",
        dest="literal_alignment",
        action="store_const",
        const=True,
        help="use the uncentered inferred probability in the alignment product",
    )
    p.add_argument(
        "--include-unconverged",
        dest="include_unconverged",
        action="store_const",
        const=True,
        help="store unconverged calibrations (flagged) instead of dropping them",
    )
    p.add_argument("--k", type=int, help="per-group candidate count")
    p.add_argument("--threshold", type=float, help="similarity threshold")
    p.add_argument(
        "--no-global-fallback",
        dest="global_fallback",
        action="store_const",
        const=False,
        help="error out instead of falling back to the global ranking",
    )
    p.add_argument("--runs", type=int, help="voting runs (odd)")
    p.add_argument("--vote-temperature", dest="vote_temperature", type=float)
    p.add_argument("--policy", choices=POLICY_CHOICES)
    p.add_argument("--remote-base-url", dest="remote_base_url")
    p.add_argument("--remote-model", dest="remote_model")
    p.add_argument("--remote-token-env", dest="remote_token_env")
    p.add_argument("--remote-timeout", dest="remote_timeout", type=float)
    p.add_argument("--remote-retries", dest="remote_retries", type=int)
    p.add_argument("--embedder", choices=EMBEDDER_CHOICES)
    p.add_argument("--embed-url", dest="embed_url")
    p.add_argument("--embed-model", dest="embed_model")
    p.add_argument("--seed", type=int, help="synthetic generator seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapdistill",
        description=(
            "Distill teacher attributions into interval contribution tables, "
            "calibrate per-case weights, and predict unseen cases from "
            "precedents."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic teacher cohort")
    p.add_argument("-n", type=int, default=300, help="rows to generate")
    p.add_argument("--features", type=int, default=15)
    p.add_argument("--integer-features", dest="integer_features", type=int, default=3)
    p.add_argument("--effect-scale", dest="effect_scale", type=float, default=0.3)
    p.add_argument("--intercept", type=float, default=0.0)
    p.add_argument("--out", required=True, help="matrix file to write")
    p.add_argument("--out-schema", dest="out_schema", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="build the interval contribution base")
    p.add_argument("--schema", required=True)
    p.add_argument("--matrix", required=True)
    p.add_argument("--out", required=True, help="contribution base file to write")
    _add_config_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("distill", help="calibrate weights and build the case store")
    p.add_argument("--acpb", required=True, help="contribution base file")
    p.add_argument("--matrix", required=True)
    p.add_argument("--out-store", dest="out_store", required=True)
    p.add_argument("--out-summary", dest="out_summary", default="")
    _add_config_flags(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("predict", help="classify an unseen case")
    p.add_argument("--case", required=True)
    p.add_argument("--acpb", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True, help="report path prefix (.txt/.json added)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score prediction files against truth")
    p.add_argument("--pred-a", dest="pred_a", required=True)
    p.add_argument("--pred-b", dest="pred_b", default="")
    p.add_argument("--truth", required=True)
    p.add_argument("--probs-a", dest="probs_a", default="")
    p.add_argument("--probs-b", dest="probs_b", default="")
    p.add_argument("--teacher-probs", dest="teacher_probs", default="")
    p.add_argument("--out", default="", help="metrics JSON to write")
    _add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)

    return parser


_HANDLED = (
    IngestError,
    StoreError,
    RetrievalError,
    PolicyError,
    CalibrationError,
    PredictionError,
    ValueError,
    OSError,
)


def main(argv: list[str] | None = None, out=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = out if out is not None else sys.stdout
    overrides = {
        k: v for k, v in vars(args).items() if k in _CONFIG_FIELDS
    }
    try:
        cfg = load_pipeline_config(args.config, overrides)
        return args.func(args, cfg, out)
    except _HANDLED as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
