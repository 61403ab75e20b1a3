"""Streaming guardrail scheduler for incrementally generated text.

The scheduler watches per-step generation output across many concurrent
requests, batches typicality evaluations on a word-count cadence, aborts
streams the detector flags, and emits terminal records.  A step processes
four phases in order:

1. ingest:   append new segments, register new requests, record engine
             finishes; an event for a terminal request is a protocol error.
2. assemble: pick the evaluation batch.  Requests whose unscored word gap
             reached the interval are due; if the batch is short it expands
             with near-threshold requests and engine-finished requests that
             still have unscored text.  A still-short batch either defers
             (bounded rounds) or fires reduced, per configuration.
3. apply:    record scores, advance the scored watermark, abort flagged
             requests (their text freezes at the abort snapshot).
4. emit:     hand back records for terminal requests and drop them from
             live tracking (tombstoned so stray later events still error).

``run_simulation`` replays a JSONL trace through these phases with a
pluggable scorer and reports abort latency, batch statistics, and scorer
overhead.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .detectors import (
    DetectorBundle,
    anomaly_score,
    normalize_score,
    predict_label,
)
from .embedding_store import EmbeddingView, MultiViewDataset, normalize_rows
from .errors import (
    ContractError,
    ParameterError,
    ProtocolError,
    TraceParseError,
)
from .neighborhood import ReferenceIndex
from .prdc import (
    FeatureSubset,
    compute_prdc_batch,
    feature_matrix,
)

FINISH_REASONS = ("stop", "length")


class RequestStatus(Enum):
    RUNNING = "running"
    FINISHED = "finished"
    ABORTED = "aborted"


class FallbackPolicy(Enum):
    DEFER = "defer"
    REDUCED_BATCH = "reduced_batch"

    @classmethod
    def parse(cls, name: str) -> "FallbackPolicy":
        for member in cls:
            if member.value == name:
                return member
        raise ParameterError(
            f"unknown fallback policy {name!r}; expected one of "
            f"{[m.value for m in cls]}"
        )


@dataclass(frozen=True)
class SchedulerConfig:
    interval_words: int = 20
    min_batch_size: int = 32
    near_slack_words: int = 5
    max_defer_rounds: int = 2
    fallback: FallbackPolicy = FallbackPolicy.DEFER
    threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.interval_words < 1:
            raise ParameterError("interval_words must be >= 1")
        if self.min_batch_size < 1:
            raise ParameterError("min_batch_size must be >= 1")
        if self.near_slack_words < 0:
            raise ParameterError("near_slack_words must be >= 0")
        if self.max_defer_rounds < 0:
            raise ParameterError("max_defer_rounds must be >= 0")
        if not 0.0 <= self.threshold <= 1.0:
            raise ParameterError("threshold must lie in [0, 1]")


@dataclass(frozen=True)
class RequestSnapshot:
    """A request's accumulated text and latest embeddings at one step."""

    req_id: str
    word_count: int
    text: str
    views: dict[str, np.ndarray]


@dataclass
class RequestState:
    req_id: str
    text: str = ""
    word_count: int = 0
    last_predicted_at: int = 0
    status: RequestStatus = RequestStatus.RUNNING
    finish_reason: str | None = None
    views: dict[str, np.ndarray] = field(default_factory=dict)
    snapshots: list[RequestSnapshot] = field(default_factory=list)

    @property
    def unscored_gap(self) -> int:
        return self.word_count - self.last_predicted_at

    def snapshot(self) -> RequestSnapshot:
        return RequestSnapshot(
            req_id=self.req_id,
            word_count=self.word_count,
            text=self.text,
            views=dict(self.views),
        )


@dataclass(frozen=True)
class SegmentOutput:
    """One request's output for one step, as handed in by the engine."""

    req_id: str
    segment: str = ""
    views: dict[str, np.ndarray] | None = None
    engine_finish: str | None = None


@dataclass(frozen=True)
class BatchDecision:
    fired: bool
    req_ids: tuple[str, ...]
    reason: str
    defer_rounds: int


@dataclass(frozen=True)
class FinalRecord:
    req_id: str
    reason: str  # "abort" | "stop" | "length"
    text: str
    word_count: int

    def to_json_dict(self) -> dict:
        return {
            "req_id": self.req_id,
            "reason": self.reason,
            "text": self.text,
            "word_count": self.word_count,
        }


# A scorer maps a batch of snapshots to (score, label) pairs, where the
# score is in [0, 1] with higher = more anomalous and label 0 aborts.
Scorer = Callable[[Sequence[RequestSnapshot]], Sequence[tuple[float, int]]]


class GuardrailScheduler:
    """Tracks request state and drives the four evaluation phases."""

    def __init__(self, config: SchedulerConfig | None = None) -> None:
        self.config = config or SchedulerConfig()
        self._states: dict[str, RequestState] = {}
        self._tombstones: set[str] = set()
        self._archive: dict[str, list[RequestSnapshot]] = {}
        self._defer_rounds = 0

    # ---------------------------------------------------------- phase 1
    def ingest_outputs(self, outputs: Iterable[SegmentOutput]) -> None:
        touched: set[str] = set()
        for out in outputs:
            rid = out.req_id
            if rid in self._tombstones:
                raise ProtocolError(
                    f"request {rid!r} already reached a terminal state"
                )
            state = self._states.get(rid)
            if state is None:
                state = RequestState(req_id=rid)
                self._states[rid] = state
            if state.status is not RequestStatus.RUNNING:
                raise ProtocolError(
                    f"request {rid!r} already reached a terminal state"
                )
            if out.segment:
                state.text += out.segment
                state.word_count = len(state.text.split())
            if out.views:
                state.views.update(out.views)
            if out.engine_finish is not None:
                if out.engine_finish not in FINISH_REASONS:
                    raise ProtocolError(
                        f"unknown engine finish reason {out.engine_finish!r}"
                    )
                state.status = RequestStatus.FINISHED
                state.finish_reason = out.engine_finish
            touched.add(rid)
        for rid in touched:
            self._states[rid].snapshots.append(self._states[rid].snapshot())

    # ---------------------------------------------------------- phase 2
    def assemble_evaluation_batch(self) -> BatchDecision:
        cfg = self.config
        running = [
            s for s in self._states.values()
            if s.status is RequestStatus.RUNNING
        ]
        # an engine finish does not waive a due check: any request whose
        # unscored tail reached a full interval must be scored before it
        # can be emitted, finished or not
        primary = [
            s for s in self._states.values()
            if s.status is not RequestStatus.ABORTED
            and s.unscored_gap >= cfg.interval_words
        ]
        if not primary:
            return BatchDecision(False, (), "idle", self._defer_rounds)

        pool = list(primary)
        reason = "due"
        if len(pool) < cfg.min_batch_size:
            pooled_ids = {s.req_id for s in pool}
            near = [
                s for s in running
                if s.req_id not in pooled_ids
                and 0 < s.unscored_gap
                >= cfg.interval_words - cfg.near_slack_words
            ]
            finished_unscored = [
                s for s in self._states.values()
                if s.status is RequestStatus.FINISHED
                and s.req_id not in pooled_ids
                and s.unscored_gap > 0
            ]
            pool += near + finished_unscored
            reason = "expanded"

        if len(pool) < cfg.min_batch_size:
            if cfg.fallback is FallbackPolicy.REDUCED_BATCH:
                reason = "reduced"
            elif self._defer_rounds >= cfg.max_defer_rounds:
                reason = "forced"
            else:
                self._defer_rounds += 1
                return BatchDecision(False, (), "deferred", self._defer_rounds)

        pool.sort(key=lambda s: (-s.unscored_gap, s.req_id))
        self._defer_rounds = 0
        return BatchDecision(
            True, tuple(s.req_id for s in pool), reason, self._defer_rounds
        )

    def snapshot(self, req_id: str) -> RequestSnapshot:
        state = self._states.get(req_id)
        if state is None:
            raise ProtocolError(f"unknown request {req_id!r}")
        return state.snapshot()

    # ---------------------------------------------------------- phase 3
    def apply_predictions(
        self, scored: Iterable[tuple[str, float, int]]
    ) -> list[str]:
        """Record (req_id, score, label) results; return newly aborted ids."""
        aborted: list[str] = []
        for rid, _score, label in scored:
            state = self._states.get(rid)
            if state is None:
                raise ProtocolError(f"unknown request {rid!r}")
            if state.status is RequestStatus.ABORTED:
                raise ProtocolError(f"request {rid!r} was already aborted")
            state.last_predicted_at = state.word_count
            if label < 1:
                state.status = RequestStatus.ABORTED
                state.finish_reason = "abort"
                aborted.append(rid)
        return aborted

    # ---------------------------------------------------------- phase 4
    def emit_outputs(self) -> list[FinalRecord]:
        records: list[FinalRecord] = []
        for rid in sorted(self._states):
            state = self._states[rid]
            if state.status is RequestStatus.RUNNING:
                continue
            if (
                state.status is RequestStatus.FINISHED
                and state.unscored_gap >= self.config.interval_words
            ):
                # finished but overdue for a check: hold it back until a
                # batch (possibly a forced one) delivers the verdict
                continue
            records.append(
                FinalRecord(
                    req_id=rid,
                    reason=state.finish_reason or "stop",
                    text=state.text,
                    word_count=state.word_count,
                )
            )
            self._tombstones.add(rid)
            self._archive[rid] = state.snapshots
            del self._states[rid]
        return records

    def archived_history(self, req_id: str) -> list[RequestSnapshot]:
        if req_id in self._archive:
            return self._archive[req_id]
        state = self._states.get(req_id)
        if state is not None:
            return state.snapshots
        raise ProtocolError(f"no history for request {req_id!r}")

    @property
    def live_request_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self._states))


# --------------------------------------------------------------- scorers
class MarkerScorer:
    """Oracle scorer for tests: a marker substring means toxic."""

    def __init__(self, marker: str = "<<TOXIC>>") -> None:
        self.marker = marker

    def __call__(
        self, snapshots: Sequence[RequestSnapshot]
    ) -> list[tuple[float, int]]:
        out = []
        for snap in snapshots:
            if self.marker in snap.text:
                out.append((0.95, 0))
            else:
                out.append((0.05, 1))
        return out


class PipelineScorer:
    """Scores snapshots with a fitted detector bundle over checkpoint
    embeddings.

    Each snapshot must carry an embedding for every view the bundle was
    fitted on (the latest checkpoint embedding seen for that request).
    Batches shorter than max(k)+1 cannot form within-batch neighbor radii,
    so they fall back to the density/precision feature subset and its
    separately fitted detector.
    """

    def __init__(
        self,
        bundle: DetectorBundle,
        indexes: Sequence[ReferenceIndex],
    ) -> None:
        if len(indexes) != len(bundle.view_ids):
            raise ContractError(
                f"bundle lists {len(bundle.view_ids)} views but "
                f"{len(indexes)} indexes were supplied"
            )
        for index, vid in zip(indexes, bundle.view_ids):
            if index.view_id != vid:
                raise ContractError(
                    f"index for view {index.view_id!r} does not match "
                    f"bundle view {vid!r}"
                )
        self.bundle = bundle
        self.indexes = list(indexes)

    def __call__(
        self, snapshots: Sequence[RequestSnapshot]
    ) -> list[tuple[float, int]]:
        if not snapshots:
            return []
        views = []
        for vid in self.bundle.view_ids:
            rows = []
            for snap in snapshots:
                vec = snap.views.get(vid)
                if vec is None:
                    raise ContractError(
                        f"request {snap.req_id!r} has no checkpoint "
                        f"embedding for view {vid!r}"
                    )
                rows.append(np.asarray(vec, dtype=np.float32))
            stacked = np.vstack(rows)
            views.append(
                normalize_rows(EmbeddingView(vid, stacked, normalized=False))
            )
        dataset = MultiViewDataset(views=views)
        k_max = max(self.bundle.k_list)
        subset = (
            FeatureSubset.FULL
            if len(snapshots) >= k_max + 1
            else FeatureSubset.PD
        )
        vectors = compute_prdc_batch(
            self.indexes, dataset, list(self.bundle.k_list), subset
        )
        feats = feature_matrix(vectors)
        entry = self.bundle.find(self.bundle.default_kind, subset)
        raw = anomaly_score(entry.model, feats)
        scores = normalize_score(entry.calibration, raw)
        return [
            (float(s), predict_label(float(s), self.bundle.threshold))
            for s in np.atleast_1d(scores)
        ]


# ------------------------------------------------------------ simulation
@dataclass(frozen=True)
class TraceEvent:
    step: int
    req_id: str
    segment: str
    views: dict[str, np.ndarray] | None
    engine_finish: str | None
    line_number: int


def parse_trace(source: str | Path | Iterable[str]) -> list[TraceEvent]:
    """Parse a JSONL trace; every malformed line is an error with its
    line number.

    Required keys per line: "step" (non-negative integer) and "req"
    (non-empty string).  Optional: "segment" (string), "checkpoint_embeddings"
    (view id -> float list), "engine_finish" ("stop" or "length").
    """
    if isinstance(source, (str, Path)):
        lines = Path(source).read_text(encoding="utf-8").splitlines()
    else:
        lines = [str(line).rstrip("\n") for line in source]

    events: list[TraceEvent] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(f"invalid JSON: {exc}", lineno) from exc
        if not isinstance(obj, dict):
            raise TraceParseError("trace line must be a JSON object", lineno)
        step = obj.get("step")
        if not isinstance(step, int) or isinstance(step, bool) or step < 0:
            raise TraceParseError(
                f"'step' must be a non-negative integer, got {step!r}", lineno
            )
        rid = obj.get("req")
        if not isinstance(rid, str) or not rid:
            raise TraceParseError(
                f"'req' must be a non-empty string, got {rid!r}", lineno
            )
        segment = obj.get("segment", "")
        if not isinstance(segment, str):
            raise TraceParseError("'segment' must be a string", lineno)
        views = None
        raw_views = obj.get("checkpoint_embeddings")
        if raw_views is not None:
            if not isinstance(raw_views, dict):
                raise TraceParseError(
                    "'checkpoint_embeddings' must map view id to a float "
                    "list", lineno
                )
            views = {}
            for vid, vec in raw_views.items():
                try:
                    arr = np.asarray(vec, dtype=np.float32)
                except (TypeError, ValueError) as exc:
                    raise TraceParseError(
                        f"embedding for view {vid!r} is not numeric", lineno
                    ) from exc
                if arr.ndim != 1 or arr.size == 0:
                    raise TraceParseError(
                        f"embedding for view {vid!r} must be a non-empty "
                        "flat list", lineno
                    )
                views[str(vid)] = arr
        finish = obj.get("engine_finish")
        if finish is not None and finish not in FINISH_REASONS:
            raise TraceParseError(
                f"'engine_finish' must be one of {list(FINISH_REASONS)}, "
                f"got {finish!r}", lineno
            )
        events.append(TraceEvent(step, rid, segment, views, finish, lineno))
    return events


@dataclass(frozen=True)
class SimulationResult:
    summary: dict
    decisions: list[dict]
    scored: list[dict]
    finals: list[FinalRecord]

    def to_json_dict(self) -> dict:
        return {
            "summary": self.summary,
            "decisions": self.decisions,
            "scored": self.scored,
            "finals": [f.to_json_dict() for f in self.finals],
        }


def _abort_onset(
    scorer: Scorer, history: Sequence[RequestSnapshot]
) -> int | None:
    """Earliest snapshot word count the scorer flags as toxic, if any.

    Snapshots the scorer cannot evaluate (for example, taken before the
    request's first checkpoint embedding arrived) are skipped.
    """
    for snap in history:
        try:
            results = scorer([snap])
        except ContractError:
            continue
        if results and results[0][1] < 1:
            return snap.word_count
    return None


def run_simulation(
    trace: str | Path | Iterable[str] | Sequence[TraceEvent],
    scorer: Scorer,
    config: SchedulerConfig | None = None,
) -> SimulationResult:
    """Replay a trace through the scheduler with the given scorer.

    Events are processed in ascending step order.  Events for a request
    the guardrail already aborted are dropped silently — the engine that
    produced the trace could not know about the abort — while events for
    requests the engine itself finished still raise a protocol error.

    Abort latency counts the words generated between the first snapshot
    the scorer flags (found by re-scoring the request's snapshot history
    after the run) and the abort itself.  The overhead ratio divides the
    wall-clock time spent inside the scorer during the run by all other
    simulation time; the post-run latency analysis is excluded.
    """
    if isinstance(trace, (str, Path)):
        events = parse_trace(trace)
    else:
        trace_list = list(trace)
        if trace_list and isinstance(trace_list[0], TraceEvent):
            events = trace_list  # type: ignore[assignment]
        else:
            events = parse_trace(trace_list)  # type: ignore[arg-type]

    events = sorted(events, key=lambda e: e.step)
    scheduler = GuardrailScheduler(config)
    aborted_ids: set[str] = set()
    abort_word_counts: dict[str, int] = {}
    decisions: list[dict] = []
    scored_log: list[dict] = []
    finals: list[FinalRecord] = []
    fired_sizes: list[int] = []

    scorer_seconds = 0.0
    run_start = time.perf_counter()

    idx = 0
    while idx < len(events):
        step = events[idx].step
        group = []
        while idx < len(events) and events[idx].step == step:
            group.append(events[idx])
            idx += 1
        live = [e for e in group if e.req_id not in aborted_ids]
        scheduler.ingest_outputs(
            SegmentOutput(e.req_id, e.segment, e.views, e.engine_finish)
            for e in live
        )
        decision = scheduler.assemble_evaluation_batch()
        decisions.append(
            {
                "step": step,
                "fired": decision.fired,
                "reason": decision.reason,
                "req_ids": list(decision.req_ids),
                "defer_rounds": decision.defer_rounds,
            }
        )
        if decision.fired:
            fired_sizes.append(len(decision.req_ids))
            snapshots = [scheduler.snapshot(r) for r in decision.req_ids]
            t0 = time.perf_counter()
            results = list(scorer(snapshots))
            scorer_seconds += time.perf_counter() - t0
            if len(results) != len(snapshots):
                raise ContractError(
                    f"scorer returned {len(results)} results for a batch "
                    f"of {len(snapshots)}"
                )
            scored = [
                (snap.req_id, float(score), int(label))
                for snap, (score, label) in zip(snapshots, results)
            ]
            newly_aborted = scheduler.apply_predictions(scored)
            aborted_ids.update(newly_aborted)
            for snap, (score, label) in zip(snapshots, results):
                scored_log.append(
                    {
                        "step": step,
                        "req_id": snap.req_id,
                        "word_count": snap.word_count,
                        "score": float(score),
                        "label": int(label),
                    }
                )
                if snap.req_id in newly_aborted:
                    abort_word_counts[snap.req_id] = snap.word_count
        finals.extend(scheduler.emit_outputs())

    total_seconds = time.perf_counter() - run_start

    latencies: list[float] = []
    for rid, abort_wc in sorted(abort_word_counts.items()):
        history = scheduler.archived_history(rid)
        onset = _abort_onset(scorer, history)
        if onset is not None:
            latencies.append(float(abort_wc - onset))

    other_seconds = max(total_seconds - scorer_seconds, 1e-12)
    summary = {
        "aborts": len(abort_word_counts),
        "mean_abort_latency_words": (
            float(np.mean(latencies)) if latencies else 0.0
        ),
        "evaluations": len(fired_sizes),
        "mean_batch": float(np.mean(fired_sizes)) if fired_sizes else 0.0,
        "overhead_ratio": scorer_seconds / other_seconds,
    }
    return SimulationResult(
        summary=summary, decisions=decisions, scored=scored_log, finals=finals
    )
