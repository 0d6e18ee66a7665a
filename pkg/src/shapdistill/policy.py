"""Weight-proposal policies: a deterministic stub and a remote chat client.

A policy receives the current diagnostic state plus reward feedback and
replies with revised feature weights and a guidance paragraph. The stub is a
closed-form controller used for tests and offline runs; the remote client
speaks a chat-completions protocol and parses replies in a fenced block
grammar, falling back to the previous weights when a reply cannot be parsed.
"""

from __future__ import annotations

import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence, runtime_checkable

from .cacs import CaseFeatureTable
from .calibration import (
    DiagnosticState,
    FailureCase,
    RewardSignal,
)

log = logging.getLogger(__name__)

_ALIGNMENT_FLOOR = 1e-9


class PolicyError(RuntimeError):
    """The policy could not produce a response."""


@dataclass(frozen=True)
class PolicyRequest:
    """Everything a policy may condition on when revising weights."""

    state: DiagnosticState
    reward: RewardSignal
    failures: tuple[FailureCase, ...]
    teacher_prob: float
    feature_descriptions: tuple[str, ...] = ()


@dataclass(frozen=True)
class PolicyResponse:
    weights: tuple[float, ...]
    guidance: str


@dataclass(frozen=True)
class Precedent:
    """A stored case surfaced by retrieval, with its similarity to the query."""

    entry_id: int
    similarity: float
    weights: tuple[float, ...]
    guidance: str


@dataclass(frozen=True)
class PredictionRequest:
    """Unseen-case context: matched table plus retrieved precedents."""

    table: CaseFeatureTable
    precedents: tuple[Precedent, ...]
    feature_descriptions: tuple[str, ...] = ()


@runtime_checkable
class Policy(Protocol):
    def propose(self, request: PolicyRequest) -> PolicyResponse: ...

    def predict(
        self, request: PredictionRequest, temperature: float | None = None
    ) -> PolicyResponse: ...


def _top_features(
    table: CaseFeatureTable, weights: Sequence[float], n: int = 3
) -> list[str]:
    scored = sorted(
        zip(table.entries, weights),
        key=lambda ew: (-abs(ew[0].contribution_prob * ew[1]), ew[0].name),
    )
    return [e.name for e, _ in scored[:n]]


def stub_propose(request: PolicyRequest, damping: float = 0.7) -> PolicyResponse:
    """Closed-form weight revision.

    When direction agrees and the inferred probability is off-center, all
    weights are scaled by the ratio that would land exactly on the teacher
    value, damped. When direction disagrees, only weights whose contribution
    pushes against the teacher's side are shrunk. Anything else is left
    unchanged.
    """
    if not 0.0 < damping <= 1.0:
        raise ValueError(f"damping must be in (0, 1], got {damping!r}")
    state = request.state
    teacher = request.teacher_prob
    inferred = state.infer_prob
    weights = state.weights
    direction = teacher - 0.5

    if request.reward.alignment > 0.0 and abs(inferred - 0.5) > _ALIGNMENT_FLOOR:
        ratio = direction / (inferred - 0.5)
        scale = 1.0 + damping * (ratio - 1.0)
        new_weights = tuple(w * scale for w in weights)
        names = ", ".join(_top_features(state.table, new_weights))
        guidance = (
            f"Scaled all weights by {scale:.6f} toward the target probability "
            f"{teacher:.6f}; dominant factors: {names}."
        )
        return PolicyResponse(weights=new_weights, guidance=guidance)

    opposing = [
        i
        for i, e in enumerate(state.table.entries)
        if e.contribution_prob * direction < 0.0
    ]
    if opposing:
        new_weights = tuple(
            w * (1.0 - damping) if i in opposing else w
            for i, w in enumerate(weights)
        )
        names = ", ".join(
            state.table.entries[i].name for i in opposing[:3]
        )
        guidance = (
            f"Prediction contradicts the target direction; shrank {len(opposing)} "
            f"opposing weights by {1.0 - damping:.2f}x (strongest: {names})."
        )
        return PolicyResponse(weights=new_weights, guidance=guidance)

    return PolicyResponse(
        weights=weights,
        guidance="No actionable signal: no weight changes direction or distance.",
    )


def stub_predict(request: PredictionRequest) -> PolicyResponse:
    """Similarity-weighted mean of precedent weights; unit weights with none.

    Non-positive similarities carry no votes; if every similarity is
    non-positive the precedents are averaged unweighted.
    """
    n = len(request.table.entries)
    if not request.precedents:
        return PolicyResponse(
            weights=tuple(1.0 for _ in range(n)),
            guidance="No precedents retrieved; using unit weights.",
        )
    for p in request.precedents:
        if len(p.weights) != n:
            raise PolicyError(
                f"precedent {p.entry_id} has {len(p.weights)} weights, case has {n}"
            )
    sims = [max(p.similarity, 0.0) for p in request.precedents]
    total = math.fsum(sims)
    if total <= 1e-12:
        sims = [1.0 for _ in request.precedents]
        total = float(len(request.precedents))
    weights = tuple(
        math.fsum(s * p.weights[j] for s, p in zip(sims, request.precedents)) / total
        for j in range(n)
    )
    ids = ", ".join(str(p.entry_id) for p in request.precedents)
    guidance = (
        f"Blended weights from {len(request.precedents)} precedent case(s) "
        f"[{ids}] by similarity."
    )
    return PolicyResponse(weights=weights, guidance=guidance)


class StubPolicy:
    """Deterministic policy: same request, same response, no IO."""

    def __init__(self, damping: float = 0.7):
        if not 0.0 < damping <= 1.0:
            raise ValueError(f"damping must be in (0, 1], got {damping!r}")
        self.damping = damping

    def propose(self, request: PolicyRequest) -> PolicyResponse:
        return stub_propose(request, self.damping)

    def predict(
        self, request: PredictionRequest, temperature: float | None = None
    ) -> PolicyResponse:
        # temperature is accepted for interface parity; the stub ignores it
        return stub_predict(request)


# -- response grammar --------------------------------------------------------


@dataclass(frozen=True)
class ParseOutcome:
    response: PolicyResponse | None
    error: str = ""
    notices: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.response is not None


_BLOCK_RE = re.compile(r"```[^\S\n]*\n(.*?)```", re.DOTALL)
_WEIGHT_LINE_RE = re.compile(r"^(\S+)\s*=\s*(\S+)$")


def render_response(response: PolicyResponse, feature_names: Sequence[str]) -> str:
    """Serialize a response into the fenced block grammar the parser accepts."""
    if len(response.weights) != len(feature_names):
        raise ValueError(
            f"{len(response.weights)} weights for {len(feature_names)} names"
        )
    lines = ["```", "WEIGHTS"]
    lines += [f"{name} = {w!r}" for name, w in zip(feature_names, response.weights)]
    lines += ["```", "", "```", "GUIDANCE"]
    # nested fences would break the grammar, so soften any in the text
    lines.append(response.guidance.replace("```", "'''"))
    lines.append("```")
    return "\n".join(lines)


def parse_response(
    raw: str, feature_names: Sequence[str], weight_bound: float = 10.0
) -> ParseOutcome:
    """Extract weights and guidance from a policy reply.

    Takes the first fenced WEIGHTS block and the first fenced GUIDANCE block;
    any surrounding prose is ignored. Every feature must appear exactly once
    with a finite numeric weight. Out-of-range weights are clamped into
    [0, weight_bound] and reported as notices rather than errors.
    """
    weights_body = None
    guidance_body = None
    for m in _BLOCK_RE.finditer(raw):
        body = m.group(1)
        stripped = body.strip("\n")
        first, _, rest = stripped.partition("\n")
        tag = first.strip()
        if tag == "WEIGHTS" and weights_body is None:
            weights_body = rest
        elif tag == "GUIDANCE" and guidance_body is None:
            guidance_body = rest
    if weights_body is None:
        return ParseOutcome(None, error="no WEIGHTS block found")
    if guidance_body is None:
        return ParseOutcome(None, error="no GUIDANCE block found")

    seen: dict[str, float] = {}
    notices: list[str] = []
    for lineno, line in enumerate(weights_body.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        m = _WEIGHT_LINE_RE.match(line)
        if m is None:
            return ParseOutcome(
                None, error=f"weight line {lineno} not of the form 'name = value': {line!r}"
            )
        name, value_text = m.group(1), m.group(2)
        if name not in feature_names:
            return ParseOutcome(None, error=f"unknown feature {name!r}")
        if name in seen:
            return ParseOutcome(None, error=f"feature {name!r} listed twice")
        try:
            value = float(value_text)
        except ValueError:
            return ParseOutcome(
                None, error=f"feature {name!r}: non-numeric weight {value_text!r}"
            )
        if not math.isfinite(value):
            return ParseOutcome(
                None, error=f"feature {name!r}: non-finite weight {value_text!r}"
            )
        if value < 0.0 or value > weight_bound:
            clamped = min(weight_bound, max(0.0, value))
            notices.append(
                f"feature {name!r}: weight {value!r} outside [0, {weight_bound!r}], "
                f"clamped to {clamped!r}"
            )
            value = clamped
        seen[name] = value
    missing = [n for n in feature_names if n not in seen]
    if missing:
        return ParseOutcome(None, error=f"missing weights for {missing}")
    return ParseOutcome(
        PolicyResponse(
            weights=tuple(seen[n] for n in feature_names),
            guidance=guidance_body.strip(),
        ),
        notices=tuple(notices),
    )


# -- remote chat policy ------------------------------------------------------


@dataclass(frozen=True)
class RemotePolicyConfig:
    base_url: str
    model: str
    token_env: str = "SHAPDISTILL_POLICY_TOKEN"
    timeout: float = 30.0
    max_retries: int = 3
    reparse_attempts: int = 2
    temperature: float = 0.0
    backoff_base: float = 0.5
    max_in_flight: int = 4


@dataclass
class CallStats:
    calls: int = 0
    retries: int = 0
    reparses: int = 0
    fallbacks: int = 0


def _format_failures(failures: tuple[FailureCase, ...]) -> str:
    if not failures:
        return "none"
    lines = []
    for f in failures:
        ws = ", ".join(f"{w:.4f}" for w in f.weights)
        lines.append(
            f"- iteration {f.iteration}: weights [{ws}] gave {f.infer_prob:.4f} "
            f"(target {f.teacher_prob:.4f}, deviation {f.diff:.4f})"
        )
    return "\n".join(lines)


def render_calibration_prompt(request: PolicyRequest) -> str:
    state = request.state
    rows = []
    for i, e in enumerate(state.table.entries):
        desc = (
            request.feature_descriptions[i]
            if i < len(request.feature_descriptions) and request.feature_descriptions[i]
            else "-"
        )
        rows.append(
            f"| {e.name} | {e.raw_value!r} | {e.midpoint!r} | "
            f"{e.contribution_prob:.6f} | {state.weights[i]:.4f} | {desc} |"
        )
    table = "\n".join(rows)
    return (
        "You adjust per-feature weights so that 0.5 plus the weighted sum of "
        "contributions matches the target probability.\n\n"
        "| feature | value | interval | contribution | weight | meaning |\n"
        "|---|---|---|---|---|---|\n"
        f"{table}\n\n"
        f"Current inferred probability: {state.infer_prob:.6f}\n"
        f"Target probability: {request.teacher_prob:.6f}\n"
        f"Deviation: {request.reward.diff:.6f}, score: {request.reward.score:.4f}\n"
        f"Assessment: {request.reward.guidance}\n\n"
        f"Recent failed attempts:\n{_format_failures(request.failures)}\n\n"
        "Reply with a fenced WEIGHTS block (one 'name = value' line per "
        "feature) followed by a fenced GUIDANCE block explaining the change."
    )


def render_prediction_prompt(request: PredictionRequest) -> str:
    rows = []
    for i, e in enumerate(request.table.entries):
        desc = (
            request.feature_descriptions[i]
            if i < len(request.feature_descriptions) and request.feature_descriptions[i]
            else "-"
        )
        rows.append(
            f"| {e.name} | {e.raw_value!r} | {e.midpoint!r} | "
            f"{e.contribution_prob:.6f} | {desc} |"
        )
    table = "\n".join(rows)
    if request.precedents:
        prec_lines = []
        for p in request.precedents:
            ws = ", ".join(f"{w:.4f}" for w in p.weights)
            prec_lines.append(
                f"- case {p.entry_id} (similarity {p.similarity:.4f}), "
                f"weights [{ws}]: {p.guidance}"
            )
        precedents = "\n".join(prec_lines)
    else:
        precedents = "none"
    return (
        "Propose per-feature weights for an unseen case, guided by similar "
        "solved cases.\n\n"
        "| feature | value | interval | contribution | meaning |\n"
        "|---|---|---|---|---|\n"
        f"{table}\n\n"
        f"Similar solved cases:\n{precedents}\n\n"
        "Reply with a fenced WEIGHTS block (one 'name = value' line per "
        "feature) followed by a fenced GUIDANCE block with your reasoning."
    )


Transport = Callable[[list[dict], float], str]


class RemoteChatPolicy:
    """Chat-completions client that speaks the fenced block grammar.

    Transport failures are retried with exponential backoff. Unparseable
    replies are re-requested with the parse error appended; if every attempt
    fails, the policy falls back to the request's current weights and logs a
    warning instead of raising.
    """

    def __init__(
        self,
        config: RemotePolicyConfig,
        feature_names: Sequence[str],
        weight_bound: float = 10.0,
        transport: Transport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.feature_names = tuple(feature_names)
        self.weight_bound = weight_bound
        self._transport = transport if transport is not None else self._http_transport
        self._sleep = sleep
        self._gate = threading.BoundedSemaphore(config.max_in_flight)
        self.stats = CallStats()

    def _http_transport(self, messages: list[dict], temperature: float) -> str:
        import requests

        token = os.environ.get(self.config.token_env, "")
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        resp = requests.post(
            url,
            headers={"Authorization": f"Bearer {token}"},
            json={
                "model": self.config.model,
                "messages": messages,
                "temperature": temperature,
            },
            timeout=self.config.timeout,
        )
        resp.raise_for_status()
        body = resp.json()
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise PolicyError(f"malformed completion payload: {body!r}") from exc

    def _complete(self, messages: list[dict], temperature: float) -> str:
        last: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self.stats.retries += 1
                self._sleep(self.config.backoff_base * (2 ** (attempt - 1)))
            try:
                with self._gate:
                    self.stats.calls += 1
                    return self._transport(messages, temperature)
            except Exception as exc:
                last = exc
                log.warning("transport attempt %d failed: %s", attempt + 1, exc)
        raise PolicyError(
            f"transport failed after {self.config.max_retries + 1} attempts: {last}"
        ) from last

    def _converse(
        self, prompt: str, fallback_weights: tuple[float, ...], temperature: float
    ) -> PolicyResponse:
        messages = [{"role": "user", "content": prompt}]
        outcome: ParseOutcome | None = None
        for attempt in range(self.config.reparse_attempts + 1):
            if attempt:
                self.stats.reparses += 1
            raw = self._complete(messages, temperature)
            outcome = parse_response(raw, self.feature_names, self.weight_bound)
            if outcome.ok:
                for notice in outcome.notices:
                    log.info("reply notice: %s", notice)
                return outcome.response
            log.warning("unparseable policy reply: %s", outcome.error)
            messages = messages + [
                {"role": "assistant", "content": raw},
                {
                    "role": "user",
                    "content": (
                        f"Your previous reply could not be parsed ({outcome.error}). "
                        "Reply again with exactly one fenced WEIGHTS block and one "
                        "fenced GUIDANCE block."
                    ),
                },
            ]
        self.stats.fallbacks += 1
        log.warning(
            "falling back to previous weights after %d unparseable replies: %s",
            self.config.reparse_attempts + 1,
            outcome.error if outcome else "no reply",
        )
        return PolicyResponse(
            weights=fallback_weights,
            guidance="Weight update unavailable; previous weights retained.",
        )

    def propose(self, request: PolicyRequest) -> PolicyResponse:
        prompt = render_calibration_prompt(request)
        return self._converse(
            prompt, request.state.weights, self.config.temperature
        )

    def predict(
        self, request: PredictionRequest, temperature: float | None = None
    ) -> PolicyResponse:
        prompt = render_prediction_prompt(request)
        unit = tuple(1.0 for _ in request.table.entries)
        t = self.config.temperature if temperature is None else temperature
        return self._converse(prompt, unit, t)
