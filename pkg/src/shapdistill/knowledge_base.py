"""Precedent store with feature-group matching retrieval.

Calibrated cases are embedded once per feature group and stored. Retrieval
embeds the query the same way, ranks stored cases per group, and tries three
tiers in order: cases ranked in all three groups, cases ranked in at least
two, then a global ranking by mean similarity. Persistence is a single file
with a checksum header so corruption is detected on open.
"""

from __future__ import annotations

import hashlib
import json
import math
import statistics
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence, runtime_checkable

from .cacs import CaseFeatureTable, FeatureMatch
from .calibration import DistillationOutcome
from .schema_ingest import (
    FeatureSchema,
    FeatureShapMatrix,
    schema_fingerprint,
    schema_from_dict,
    schema_to_dict,
)

TIER_INTERSECTION = "intersection"
TIER_MAJORITY = "majority"
TIER_GLOBAL = "global"

STANDARDIZED_EMBEDDER_ID = "standardized-v1"


class StoreError(RuntimeError):
    pass


class StoreIntegrityError(StoreError):
    """The store file is corrupt or was edited after being written."""


class RetrievalError(RuntimeError):
    pass


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    """Cosine similarity with explicit edge conventions.

    Identical vectors (zero vectors included) are exactly 1.0; a single zero
    vector has no direction to compare and scores 0.0.
    """
    if len(u) != len(v):
        raise ValueError(f"vector lengths differ: {len(u)} vs {len(v)}")
    if tuple(u) == tuple(v):
        # identical vectors are exactly self-similar; this also covers the
        # zero/zero convention without dividing by zero
        return 1.0
    nu = math.sqrt(math.fsum(x * x for x in u))
    nv = math.sqrt(math.fsum(y * y for y in v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return math.fsum(x * y for x, y in zip(u, v)) / (nu * nv)


@runtime_checkable
class Embedder(Protocol):
    embedder_id: str
    deterministic: bool

    def embed_group(
        self, table: CaseFeatureTable, group: tuple[int, ...]
    ) -> tuple[float, ...]: ...


class StandardizedValuesEmbedder:
    """Embed a feature group as its standardized raw values.

    Each coordinate is (value - training_mean) / training_std using moments
    frozen at store creation; zero-variance features map to 0 so they never
    dominate nor reorder similarities.
    """

    embedder_id = STANDARDIZED_EMBEDDER_ID
    deterministic = True

    def __init__(self, means: Sequence[float], stds: Sequence[float]):
        if len(means) != len(stds):
            raise ValueError("means and stds must have equal length")
        self.means = tuple(means)
        self.stds = tuple(stds)

    def embed_group(
        self, table: CaseFeatureTable, group: tuple[int, ...]
    ) -> tuple[float, ...]:
        out = []
        for i in group:
            std = self.stds[i]
            if std == 0.0:
                out.append(0.0)
            else:
                out.append((table.entries[i].raw_value - self.means[i]) / std)
        return tuple(out)


class RemoteTextEmbedder:
    """Embed a feature group by sending its rendered text to an embeddings API."""

    deterministic = False

    def __init__(
        self,
        base_url: str,
        model: str,
        token_env: str = "SHAPDISTILL_EMBED_TOKEN",
        timeout: float = 30.0,
        transport: Callable[[str], tuple[float, ...]] | None = None,
    ):
        self.embedder_id = f"remote-text:{model}"
        self.base_url = base_url
        self.model = model
        self.token_env = token_env
        self.timeout = timeout
        self._transport = transport if transport is not None else self._http_transport

    def _http_transport(self, text: str) -> tuple[float, ...]:
        import os

        import requests

        token = os.environ.get(self.token_env, "")
        resp = requests.post(
            self.base_url.rstrip("/") + "/embeddings",
            headers={"Authorization": f"Bearer {token}"},
            json={"model": self.model, "input": text},
            timeout=self.timeout,
        )
        resp.raise_for_status()
        body = resp.json()
        try:
            return tuple(float(x) for x in body["data"][0]["embedding"])
        except (KeyError, IndexError, TypeError) as exc:
            raise StoreError(f"malformed embedding payload: {body!r}") from exc

    def embed_group(
        self, table: CaseFeatureTable, group: tuple[int, ...]
    ) -> tuple[float, ...]:
        text = "; ".join(
            f"{table.entries[i].name}={table.entries[i].raw_value!r}" for i in group
        )
        return self._transport(text)


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 8
    threshold: float = 0.7
    global_fallback: bool = True

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k!r}")
        if not -1.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [-1, 1], got {self.threshold!r}")


@dataclass(frozen=True)
class ScoredEntry:
    entry_id: int
    similarity: float


@dataclass(frozen=True)
class RetrievalResult:
    """Per-group rankings, the final candidate list, and which tier produced it."""

    groups: tuple[tuple[ScoredEntry, ...], ...]
    final: tuple[ScoredEntry, ...]
    tier: str


@dataclass(frozen=True)
class CaseEntry:
    """One calibrated case: group vectors plus everything needed to reuse it."""

    entry_id: int
    sample_id: str
    vectors: tuple[tuple[float, ...], ...]
    table: CaseFeatureTable
    weights: tuple[float, ...]
    guidance: str
    infer_prob: float
    teacher_prob: float | None
    label: int | None
    converged: bool


class DiagnosisKnowledgeBase:
    """Mutable store of calibrated cases; appends are thread-safe."""

    def __init__(
        self,
        schema: FeatureSchema,
        means: tuple[float, ...],
        stds: tuple[float, ...],
        retrieval: RetrievalConfig = RetrievalConfig(),
        embedder: Embedder | None = None,
        entries: Sequence[CaseEntry] = (),
        next_entry_id: int = 0,
    ):
        self.schema = schema
        self.means = means
        self.stds = stds
        self.retrieval = retrieval
        self.embedder = (
            embedder
            if embedder is not None
            else StandardizedValuesEmbedder(means, stds)
        )
        self._entries: list[CaseEntry] = list(entries)
        self._by_id = {e.entry_id: e for e in self._entries}
        if len(self._by_id) != len(self._entries):
            raise StoreError("duplicate entry ids")
        floor = max((e.entry_id + 1 for e in self._entries), default=0)
        self._next_id = max(next_entry_id, floor)
        self._lock = threading.Lock()

    @classmethod
    def create(
        cls,
        matrix: FeatureShapMatrix,
        retrieval: RetrievalConfig = RetrievalConfig(),
        embedder: Embedder | None = None,
    ) -> "DiagnosisKnowledgeBase":
        """New empty store with standardization moments frozen from the cohort."""
        if not matrix.rows:
            raise StoreError("cannot create a store from an empty matrix")
        n = len(matrix.schema)
        means = []
        stds = []
        for i in range(n):
            column = [row.values[i] for row in matrix.rows]
            means.append(math.fsum(column) / len(column))
            stds.append(statistics.pstdev(column))
        return cls(
            schema=matrix.schema,
            means=tuple(means),
            stds=tuple(stds),
            retrieval=retrieval,
            embedder=embedder,
        )

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> tuple[CaseEntry, ...]:
        return tuple(self._entries)

    def get(self, entry_id: int) -> CaseEntry:
        try:
            return self._by_id[entry_id]
        except KeyError:
            raise StoreError(f"no entry with id {entry_id}") from None

    def embed_table(self, table: CaseFeatureTable) -> tuple[tuple[float, ...], ...]:
        return tuple(
            self.embedder.embed_group(table, group)
            for group in self.schema.group_partition
        )

    def save_entry(
        self, outcome: DistillationOutcome, allow_unconverged: bool = False
    ) -> int:
        """Embed and append a calibration outcome; returns its entry id."""
        if not outcome.converged and not allow_unconverged:
            raise StoreError(
                f"refusing to store unconverged outcome {outcome.sample_id!r} "
                "without the explicit flag"
            )
        vectors = self.embed_table(outcome.state.table)
        with self._lock:
            entry = CaseEntry(
                entry_id=self._next_id,
                sample_id=outcome.sample_id,
                vectors=vectors,
                table=outcome.state.table,
                weights=outcome.state.weights,
                guidance=outcome.state.guidance,
                infer_prob=outcome.state.infer_prob,
                teacher_prob=outcome.teacher_prob,
                label=outcome.label,
                converged=outcome.converged,
            )
            self._next_id += 1
            self._entries.append(entry)
            self._by_id[entry.entry_id] = entry
        return entry.entry_id


def _mean_similarity(sims_per_group: Sequence[dict[int, float]], entry_id: int) -> float:
    return math.fsum(s[entry_id] for s in sims_per_group) / len(sims_per_group)


def fgmr_retrieve(
    store: DiagnosisKnowledgeBase,
    table: CaseFeatureTable,
    config: RetrievalConfig | None = None,
) -> RetrievalResult:
    """Feature-group matching retrieval over the store.

    Each group ranks entries by cosine similarity (ties to the smaller id),
    keeps those at or above the threshold, and truncates to the top k. The
    final list is the intersection of the three groups; failing that, entries
    in at least two; failing that, a global top k by mean similarity across
    groups (unless the global tier is disabled, which is an error instead).
    Final candidates are ordered by mean similarity.
    """
    cfg = config if config is not None else store.retrieval
    if len(store) == 0:
        raise RetrievalError("store has no entries")
    queries = store.embed_table(table)
    sims_per_group: list[dict[int, float]] = []
    for g, query in enumerate(queries):
        sims = {
            e.entry_id: cosine(query, e.vectors[g]) for e in store.entries
        }
        sims_per_group.append(sims)

    group_lists = []
    for sims in sims_per_group:
        qualifying = [
            ScoredEntry(entry_id, sim)
            for entry_id, sim in sims.items()
            if sim >= cfg.threshold
        ]
        qualifying.sort(key=lambda s: (-s.similarity, s.entry_id))
        group_lists.append(tuple(qualifying[: cfg.k]))

    id_sets = [frozenset(s.entry_id for s in lst) for lst in group_lists]
    final_ids = set(id_sets[0])
    for ids in id_sets[1:]:
        final_ids &= ids
    tier = TIER_INTERSECTION
    if not final_ids:
        tier = TIER_MAJORITY
        final_ids = {
            entry_id
            for entry_id in set().union(*id_sets)
            if sum(entry_id in ids for ids in id_sets) >= 2
        }
    if not final_ids:
        if not cfg.global_fallback:
            raise RetrievalError(
                "no candidates in intersection or majority tiers and the "
                "global fallback is disabled"
            )
        tier = TIER_GLOBAL
        ranked = sorted(
            (
                ScoredEntry(e.entry_id, _mean_similarity(sims_per_group, e.entry_id))
                for e in store.entries
            ),
            key=lambda s: (-s.similarity, s.entry_id),
        )
        return RetrievalResult(
            groups=tuple(group_lists), final=tuple(ranked[: cfg.k]), tier=tier
        )

    final = sorted(
        (
            ScoredEntry(entry_id, _mean_similarity(sims_per_group, entry_id))
            for entry_id in final_ids
        ),
        key=lambda s: (-s.similarity, s.entry_id),
    )
    return RetrievalResult(groups=tuple(group_lists), final=tuple(final), tier=tier)


def brute_force_retrieve(
    store: DiagnosisKnowledgeBase,
    table: CaseFeatureTable,
    config: RetrievalConfig | None = None,
) -> RetrievalResult:
    """Reference implementation of the same retrieval contract.

    Selects by repeated maximum extraction rather than sorting and counts
    tier membership explicitly; kept deliberately separate from
    ``fgmr_retrieve`` so the two can cross-check each other.
    """
    cfg = config if config is not None else store.retrieval
    if len(store) == 0:
        raise RetrievalError("store has no entries")
    queries = store.embed_table(table)

    def pick_top(pairs: list[tuple[int, float]], k: int) -> list[tuple[int, float]]:
        remaining = list(pairs)
        out = []
        while remaining and len(out) < k:
            best = remaining[0]
            for cand in remaining[1:]:
                if cand[1] > best[1] or (cand[1] == best[1] and cand[0] < best[0]):
                    best = cand
            remaining.remove(best)
            out.append(best)
        return out

    all_sims: dict[int, list[float]] = {e.entry_id: [] for e in store.entries}
    group_lists = []
    for g in range(len(queries)):
        pairs = []
        for e in store.entries:
            sim = cosine(queries[g], e.vectors[g])
            all_sims[e.entry_id].append(sim)
            if sim >= cfg.threshold:
                pairs.append((e.entry_id, sim))
        top = pick_top(pairs, cfg.k)
        group_lists.append(tuple(ScoredEntry(i, s) for i, s in top))

    membership: dict[int, int] = {}
    for lst in group_lists:
        for s in lst:
            membership[s.entry_id] = membership.get(s.entry_id, 0) + 1

    chosen = [i for i, n in membership.items() if n == len(queries)]
    tier = TIER_INTERSECTION
    if not chosen:
        chosen = [i for i, n in membership.items() if n >= 2]
        tier = TIER_MAJORITY
    if not chosen:
        if not cfg.global_fallback:
            raise RetrievalError(
                "no candidates in intersection or majority tiers and the "
                "global fallback is disabled"
            )
        tier = TIER_GLOBAL
        pairs = [
            (i, math.fsum(sims) / len(sims)) for i, sims in all_sims.items()
        ]
        top = pick_top(pairs, cfg.k)
        return RetrievalResult(
            groups=tuple(group_lists),
            final=tuple(ScoredEntry(i, s) for i, s in top),
            tier=tier,
        )

    pairs = [(i, math.fsum(all_sims[i]) / len(all_sims[i])) for i in chosen]
    top = pick_top(pairs, len(pairs))
    return RetrievalResult(
        groups=tuple(group_lists),
        final=tuple(ScoredEntry(i, s) for i, s in top),
        tier=tier,
    )


# -- persistence -------------------------------------------------------------

_MAGIC = "dkbstore"
_VERSION = 1


def _table_to_dict(table: CaseFeatureTable) -> dict:
    return {
        "sample_id": table.sample_id,
        "entries": [
            {
                "name": e.name,
                "raw_value": e.raw_value,
                "midpoint": e.midpoint,
                "contribution_prob": e.contribution_prob,
                "exact": e.exact,
            }
            for e in table.entries
        ],
    }


def _table_from_dict(doc: dict, schema: FeatureSchema) -> CaseFeatureTable:
    entries = tuple(
        FeatureMatch(
            name=e["name"],
            raw_value=float(e["raw_value"]),
            midpoint=float(e["midpoint"]),
            contribution_prob=float(e["contribution_prob"]),
            exact=bool(e["exact"]),
        )
        for e in doc["entries"]
    )
    return CaseFeatureTable(
        schema=schema, sample_id=doc["sample_id"], entries=entries
    )


def persist(store: DiagnosisKnowledgeBase, path: str | Path) -> None:
    """Write the store as a checksummed single-file snapshot."""
    payload = {
        "format": _MAGIC,
        "version": _VERSION,
        "schema": schema_to_dict(store.schema),
        "schema_hash": schema_fingerprint(store.schema),
        "embedder_id": store.embedder.embedder_id,
        "means": list(store.means),
        "stds": list(store.stds),
        "retrieval": {
            "k": store.retrieval.k,
            "threshold": store.retrieval.threshold,
            "global_fallback": store.retrieval.global_fallback,
        },
        "next_entry_id": store._next_id,
        "entries": [
            {
                "entry_id": e.entry_id,
                "sample_id": e.sample_id,
                "vectors": [list(v) for v in e.vectors],
                "table": _table_to_dict(e.table),
                "weights": list(e.weights),
                "guidance": e.guidance,
                "infer_prob": e.infer_prob,
                "teacher_prob": e.teacher_prob,
                "label": e.label,
                "converged": e.converged,
            }
            for e in store.entries
        ],
    }
    body = json.dumps(payload, indent=2) + "\n"
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    Path(path).write_text(
        f"{_MAGIC} v{_VERSION} sha256={digest}\n{body}", encoding="utf-8"
    )


def open_store(
    path: str | Path, embedder: Embedder | None = None
) -> DiagnosisKnowledgeBase:
    """Load a store snapshot, verifying its checksum and rebuilding the embedder.

    Stores written with the standardized embedder rebuild it from the stored
    moments; any other embedder must be supplied by the caller.
    """
    text = Path(path).read_text(encoding="utf-8")
    head, sep, body = text.partition("\n")
    if not sep:
        raise StoreIntegrityError(f"{path}: missing store header line")
    parts = head.split()
    if len(parts) != 3 or parts[0] != _MAGIC:
        raise StoreIntegrityError(f"{path}: not a store file (header {head!r})")
    if parts[1] != f"v{_VERSION}":
        raise StoreIntegrityError(f"{path}: unsupported store version {parts[1]!r}")
    if not parts[2].startswith("sha256="):
        raise StoreIntegrityError(f"{path}: malformed checksum field {parts[2]!r}")
    recorded = parts[2][len("sha256="):]
    actual = hashlib.sha256(body.encode("utf-8")).hexdigest()
    if recorded != actual:
        raise StoreIntegrityError(
            f"{path}: checksum mismatch (recorded {recorded[:12]}..., "
            f"actual {actual[:12]}...)"
        )
    doc = json.loads(body)
    if doc.get("format") != _MAGIC or doc.get("version") != _VERSION:
        raise StoreIntegrityError(f"{path}: payload format/version mismatch")
    schema = schema_from_dict(doc["schema"])
    if doc.get("schema_hash") != schema_fingerprint(schema):
        raise StoreIntegrityError(f"{path}: schema hash does not match embedded schema")
    means = tuple(float(x) for x in doc["means"])
    stds = tuple(float(x) for x in doc["stds"])
    embedder_id = doc["embedder_id"]
    if embedder is None:
        if embedder_id != STANDARDIZED_EMBEDDER_ID:
            raise StoreError(
                f"{path}: store uses embedder {embedder_id!r}; pass a matching "
                "embedder to open it"
            )
        embedder = StandardizedValuesEmbedder(means, stds)
    elif embedder.embedder_id != embedder_id:
        raise StoreError(
            f"{path}: embedder mismatch: store has {embedder_id!r}, "
            f"got {embedder.embedder_id!r}"
        )
    retrieval = RetrievalConfig(
        k=int(doc["retrieval"]["k"]),
        threshold=float(doc["retrieval"]["threshold"]),
        global_fallback=bool(doc["retrieval"]["global_fallback"]),
    )
    entries = []
    for e in doc["entries"]:
        entries.append(
            CaseEntry(
                entry_id=int(e["entry_id"]),
                sample_id=e["sample_id"],
                vectors=tuple(tuple(float(x) for x in v) for v in e["vectors"]),
                table=_table_from_dict(e["table"], schema),
                weights=tuple(float(w) for w in e["weights"]),
                guidance=e["guidance"],
                infer_prob=float(e["infer_prob"]),
                teacher_prob=None if e["teacher_prob"] is None else float(e["teacher_prob"]),
                label=None if e["label"] is None else int(e["label"]),
                converged=bool(e["converged"]),
            )
        )
    return DiagnosisKnowledgeBase(
        schema=schema,
        means=means,
        stds=stds,
        retrieval=retrieval,
        embedder=embedder,
        entries=entries,
        next_entry_id=int(doc["next_entry_id"]),
    )
