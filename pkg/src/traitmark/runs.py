"""Scoring-run orchestration: creation, bounded-concurrency execution,
ordered gap-free event streams with reconnect cursors, and crash recovery.

Every event is persisted before any subscriber sees it, so replay after a
dropped connection is exact: a client reconnecting with the last seq it saw
receives the remainder with no gaps and no duplicates.
"""

from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Iterator, Mapping, Sequence

from . import domain
from .registry import (
    ModelDisabledError,
    Registry,
    ScoreContext,
    UnknownModelError,
    score as score_op,
)
from .store import UnknownEntity, Workspace, new_id

PENDING = "pending"
RUNNING = "running"
COMPLETED = "completed"
FAILED = "failed"
PARTIALLY_FAILED = "partially_failed"
TERMINAL_STATES = (COMPLETED, FAILED, PARTIALLY_FAILED)

EV_RUN_STARTED = "run_started"
EV_TRAIT_SCORED = "trait_scored"
EV_ESSAY_COMPLETED = "essay_completed"
EV_RUN_COMPLETED = "run_completed"
EV_RUN_FAILED = "run_failed"
TERMINAL_EVENTS = (EV_RUN_COMPLETED, EV_RUN_FAILED)

DERIVED_MODEL_ID = "derived"


class UnknownRun(KeyError):
    def __init__(self, run_id: str):
        super().__init__(run_id)
        self.run_id = run_id

    def __str__(self) -> str:
        return f"unknown run {self.run_id!r}"


class UnauthorizedRun(PermissionError):
    pass


class RunValidationError(ValueError):
    pass


@dataclass(frozen=True)
class RunEvent:
    seq: int
    kind: str
    payload: dict[str, Any]
    emitted_at: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "seq": self.seq,
            "kind": self.kind,
            "payload": self.payload,
            "emitted_at": self.emitted_at,
        }


@dataclass(frozen=True)
class RunFailure:
    essay_id: str
    trait: str
    reason: str

    def to_dict(self) -> dict[str, str]:
        return {"essay_id": self.essay_id, "trait": self.trait, "reason": self.reason}


@dataclass(frozen=True)
class RunRequest:
    """What to score: inline essays or stored assignment essays."""

    traits: tuple[str, ...]
    assignment_id: str | None = None
    essay_ids: tuple[str, ...] | None = None  # subset of assignment essays
    inline_essays: tuple[domain.Essay, ...] = ()
    model_overrides: tuple[tuple[str, str], ...] = ()  # trait -> model id


@dataclass
class ScoringRun:
    run_id: str
    assignment_id: str | None
    requested: tuple[tuple[str, tuple[str, ...]], ...]  # (essay_id, traits)
    model_binding: dict[str, str]
    state: str
    created_by: str
    created_at: str
    started_at: str = ""
    finished_at: str = ""
    results: list[domain.TraitScore] = field(default_factory=list)
    failures: list[RunFailure] = field(default_factory=list)

    @property
    def pair_count(self) -> int:
        return sum(len(traits) for _, traits in self.requested)

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "assignment_id": self.assignment_id,
            "requested": [
                {"essay_id": e, "traits": list(ts)} for e, ts in self.requested
            ],
            "model_binding": dict(sorted(self.model_binding.items())),
            "state": self.state,
            "created_by": self.created_by,
            "created_at": self.created_at,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "results": [
                s.to_dict()
                for s in sorted(self.results, key=lambda s: (s.essay_id, s.trait))
            ],
            "failures": [
                f.to_dict()
                for f in sorted(self.failures, key=lambda f: (f.essay_id, f.trait))
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ScoringRun":
        return cls(
            run_id=str(d["run_id"]),
            assignment_id=d.get("assignment_id"),
            requested=tuple(
                (str(r["essay_id"]), tuple(r["traits"])) for r in d["requested"]
            ),
            model_binding=dict(d["model_binding"]),
            state=str(d["state"]),
            created_by=str(d["created_by"]),
            created_at=str(d["created_at"]),
            started_at=str(d.get("started_at", "")),
            finished_at=str(d.get("finished_at", "")),
            results=[domain.TraitScore.from_dict(s) for s in d.get("results", [])],
            failures=[
                RunFailure(f["essay_id"], f["trait"], f["reason"])
                for f in d.get("failures", [])
            ],
        )


class _LiveRun:
    """In-memory coordination state for a non-terminal run."""

    def __init__(self, run: ScoringRun, essays: dict[str, domain.Essay], contexts: dict[str, ScoreContext]):
        self.run = run
        self.essays = essays
        self.contexts = contexts  # per-trait score context
        self.lock = threading.Lock()
        self.cond = threading.Condition(self.lock)
        self.seq = 0
        self.done = threading.Event()


class RunManager:
    """Accepts concurrent run creations; executes each on a bounded pool."""

    def __init__(
        self,
        store: Workspace,
        registry: Registry,
        *,
        worker_budget: int = 4,
        wall_clock=None,
    ):
        self.store = store
        self.registry = registry
        self.worker_budget = max(1, worker_budget)
        self._now = wall_clock or _iso_now
        self._live: dict[str, _LiveRun] = {}
        self._live_lock = threading.Lock()
        self._runner = ThreadPoolExecutor(max_workers=8, thread_name_prefix="run")
        self.recover()

    def shutdown(self) -> None:
        self._runner.shutdown(wait=True)

    # ------------------------------------------------------------------
    # Creation
    # ------------------------------------------------------------------

    def create_run(self, request: RunRequest, principal_owner: str) -> str:
        if not request.traits:
            raise RunValidationError("trait set must be non-empty")
        schema = self.registry.schema
        for trait in request.traits:
            schema.spec(trait)  # raises SchemaError for unknown traits
        if len(set(request.traits)) != len(request.traits):
            raise RunValidationError("duplicate traits in request")

        essays: dict[str, domain.Essay] = {}
        assignment = None
        if request.assignment_id:
            record = self.store.get_entity("assignment", request.assignment_id)
            assignment = domain.Assignment.from_dict(record.payload)
            stored = {e.id: e for e in self.store.list_essays(request.assignment_id)}
            wanted = request.essay_ids if request.essay_ids is not None else tuple(stored)
            for essay_id in wanted:
                if essay_id not in stored:
                    raise UnknownEntity(
                        f"unknown essay {essay_id!r} in assignment {request.assignment_id}"
                    )
                essays[essay_id] = stored[essay_id]
        for essay in request.inline_essays:
            domain.validate_essay(essay)
            if essay.id in essays:
                raise RunValidationError(f"duplicate essay id {essay.id!r}")
            essays[essay.id] = essay
        if not essays:
            raise RunValidationError("no essays to score")

        binding = self._resolve_binding(request, assignment)

        contexts = self._build_contexts(request.traits, assignment, binding)
        run = ScoringRun(
            run_id=new_id("run"),
            assignment_id=request.assignment_id,
            requested=tuple((essay_id, tuple(request.traits)) for essay_id in essays),
            model_binding=binding,
            state=PENDING,
            created_by=principal_owner,
            created_at=self._now(),
        )
        self.store.put_entity("run", run.run_id, run.to_dict(), expected_version=-1)
        live = _LiveRun(run, essays, contexts)
        with self._live_lock:
            self._live[run.run_id] = live
        self._runner.submit(self._execute, live)
        return run.run_id

    def _resolve_binding(
        self, request: RunRequest, assignment: domain.Assignment | None
    ) -> dict[str, str]:
        overrides = dict(request.model_overrides)
        config = assignment.config_map() if assignment else {}
        binding: dict[str, str] = {}
        for trait in request.traits:
            if trait in overrides:
                model_id = overrides[trait]
            elif trait in config:
                model_id = config[trait][1]
            else:
                model_id = self.registry.default_model_id(trait)
            desc = self.registry.config.descriptor(model_id)  # raises UnknownModelError
            if not desc.enabled:
                raise ModelDisabledError(model_id)
            if trait not in desc.supported_traits:
                raise RunValidationError(f"model {model_id} does not support trait {trait}")
            binding[trait] = model_id
        return binding

    def _build_contexts(
        self,
        traits: Sequence[str],
        assignment: domain.Assignment | None,
        binding: Mapping[str, str],
    ) -> dict[str, ScoreContext]:
        prompt_text = ""
        language = "arabic"
        rubric_texts: dict[str, str] = {}
        if assignment is not None:
            language = assignment.language
            try:
                prompt_text = self.store.get_entity("prompt", assignment.prompt_id).payload["body"]
            except UnknownEntity:
                prompt_text = ""
            for trait, (rubric_id, _) in assignment.trait_config:
                if rubric_id:
                    try:
                        payload = self.store.get_entity("rubric", rubric_id).payload
                        rubric_texts[trait] = domain.Rubric.from_dict(payload).text()
                    except UnknownEntity:
                        pass
        return {
            trait: ScoreContext(
                assignment_id=assignment.id if assignment else "",
                language=language,
                prompt_text=prompt_text,
                rubric_text=rubric_texts.get(trait, ""),
            )
            for trait in traits
        }

    # ------------------------------------------------------------------
    # Execution
    # ------------------------------------------------------------------

    def _emit(self, live: _LiveRun, kind: str, payload: dict[str, Any]) -> None:
        with live.lock:
            live.seq += 1
            seq = live.seq
            emitted_at = self._now()
            # persist first: reconnect replay must be exact
            self.store.append_event(live.run.run_id, seq, kind, payload, emitted_at)
            live.cond.notify_all()

    def _persist_run(self, live: _LiveRun) -> None:
        self.store.put_entity("run", live.run.run_id, live.run.to_dict(), expected_version=-1)

    def _execute(self, live: _LiveRun) -> None:
        run = live.run
        schema = self.registry.schema
        with live.lock:
            run.state = RUNNING
            run.started_at = self._now()
        self._persist_run(live)
        self._emit(
            live,
            EV_RUN_STARTED,
            {
                "run_id": run.run_id,
                "essay_count": len(run.requested),
                "pair_count": run.pair_count,
                "traits": list(run.requested[0][1]) if run.requested else [],
                "model_binding": dict(sorted(run.model_binding.items())),
            },
        )

        try:
            pool_size = min(self.worker_budget, len(run.requested))
            with ThreadPoolExecutor(max_workers=pool_size, thread_name_prefix="essay") as pool:
                futures = [
                    pool.submit(self._score_essay, live, essay_id, traits)
                    for essay_id, traits in run.requested
                ]
                for future in futures:
                    future.result()
        except Exception as exc:  # defensive: per-pair errors are handled inside
            with live.lock:
                for essay_id, traits in run.requested:
                    scored = {(s.essay_id, s.trait) for s in run.results}
                    failed = {(f.essay_id, f.trait) for f in run.failures}
                    for trait in traits:
                        if (essay_id, trait) not in scored and (essay_id, trait) not in failed:
                            run.failures.append(RunFailure(essay_id, trait, f"internal: {exc}"))

        with live.lock:
            n_results = len(run.results)
            n_failures = len(run.failures)
            if n_failures == 0:
                run.state = COMPLETED
            elif n_results == 0:
                run.state = FAILED
            else:
                run.state = PARTIALLY_FAILED
            run.finished_at = self._now()
            results_snapshot = list(run.results)
            state = run.state
        self._persist_run(live)
        if results_snapshot:
            self.store.record_results(run.run_id, run.assignment_id, results_snapshot)
        if state == FAILED:
            self._emit(
                live,
                EV_RUN_FAILED,
                {
                    "run_id": run.run_id,
                    "state": state,
                    "reason": "all pairs failed",
                    "failure_count": n_failures,
                },
            )
        else:
            self._emit(
                live,
                EV_RUN_COMPLETED,
                {
                    "run_id": run.run_id,
                    "state": state,
                    "result_count": n_results,
                    "failure_count": n_failures,
                },
            )
        live.done.set()
        with self._live_lock:
            self._live.pop(run.run_id, None)

    def _score_essay(self, live: _LiveRun, essay_id: str, traits: tuple[str, ...]) -> None:
        run = live.run
        schema = self.registry.schema
        essay = live.essays[essay_id]
        holistic = schema.holistic
        components = set(schema.component_traits)
        derive_hol = (
            holistic is not None
            and holistic in traits
            and components <= set(traits)
        )
        ordered = [t for t in traits if not (derive_hol and t == holistic)]

        essay_scores: dict[str, int] = {}
        essay_failures: list[dict[str, str]] = []

        for trait in ordered:
            result = self._score_pair(live, essay, trait)
            if isinstance(result, domain.TraitScore):
                essay_scores[trait] = result.value
            else:
                essay_failures.append({"trait": trait, "reason": result})

        if derive_hol:
            missing = [t for t in schema.component_traits if t not in essay_scores]
            if missing:
                reason = f"holistic underivable: missing component scores {missing}"
                with live.lock:
                    run.failures.append(RunFailure(essay_id, holistic, reason))
                essay_failures.append({"trait": holistic, "reason": reason})
            else:
                total = domain.holistic_score(
                    {t: essay_scores[t] for t in schema.component_traits}, schema
                )
                score = domain.TraitScore(
                    essay_id=essay_id,
                    trait=holistic,
                    raw_value=float(total),
                    value=total,
                    model_id=DERIVED_MODEL_ID,
                    run_id=run.run_id,
                    elapsed_ms=0,
                )
                with live.lock:
                    run.results.append(score)
                essay_scores[holistic] = total
                self._emit(
                    live,
                    EV_TRAIT_SCORED,
                    {
                        "run_id": run.run_id,
                        "essay_id": essay_id,
                        "trait": holistic,
                        "value": total,
                        "model_id": DERIVED_MODEL_ID,
                        "elapsed_ms": 0,
                    },
                )

        self._emit(
            live,
            EV_ESSAY_COMPLETED,
            {
                "run_id": run.run_id,
                "essay_id": essay_id,
                "scores": {t: essay_scores[t] for t in sorted(essay_scores)},
                "failures": sorted(essay_failures, key=lambda f: f["trait"]),
            },
        )

    def _score_pair(self, live: _LiveRun, essay: domain.Essay, trait: str):
        """Score one pair; returns the TraitScore or a failure reason string."""
        run = live.run
        schema = self.registry.schema
        try:
            handle = self.registry.get_model(run.model_binding[trait])
            context = replace(live.contexts[trait], run_id=run.run_id)
            score = score_op(handle, essay, trait, context, schema=schema)
        except Exception as exc:
            reason = f"{type(exc).__name__}: {exc}"
            with live.lock:
                run.failures.append(RunFailure(essay.id, trait, reason))
            return reason
        with live.lock:
            run.results.append(score)
        self._emit(
            live,
            EV_TRAIT_SCORED,
            {
                "run_id": run.run_id,
                "essay_id": essay.id,
                "trait": trait,
                "value": score.value,
                "model_id": score.model_id,
                "elapsed_ms": score.elapsed_ms,
            },
        )
        return score

    # ------------------------------------------------------------------
    # Queries and streams
    # ------------------------------------------------------------------

    def _load_run(self, run_id: str) -> ScoringRun:
        with self._live_lock:
            live = self._live.get(run_id)
        if live is not None:
            with live.lock:
                return ScoringRun.from_dict(live.run.to_dict())
        try:
            record = self.store.get_entity("run", run_id)
        except UnknownEntity:
            raise UnknownRun(run_id) from None
        return ScoringRun.from_dict(record.payload)

    @staticmethod
    def _authorize(run: ScoringRun, principal_owner: str | None, is_admin: bool) -> None:
        if principal_owner is None or is_admin:
            return
        if run.created_by != principal_owner:
            raise UnauthorizedRun(f"run {run.run_id} belongs to another principal")

    def get_run(
        self, run_id: str, principal_owner: str | None = None, *, is_admin: bool = False
    ) -> ScoringRun:
        run = self._load_run(run_id)
        self._authorize(run, principal_owner, is_admin)
        return run

    def list_runs(
        self,
        *,
        assignment_id: str | None = None,
        principal_owner: str | None = None,
        is_admin: bool = False,
    ) -> list[ScoringRun]:
        runs = []
        for record in self.store.list_entities("run"):
            run = ScoringRun.from_dict(record.payload)
            if assignment_id is not None and run.assignment_id != assignment_id:
                continue
            if principal_owner is not None and not is_admin and run.created_by != principal_owner:
                continue
            runs.append(run)
        runs.sort(key=lambda r: r.run_id)
        return runs

    def wait(self, run_id: str, timeout: float = 30.0) -> ScoringRun:
        """Block until the run reaches a terminal state (test/CLI convenience)."""
        deadline = time.monotonic() + timeout
        with self._live_lock:
            live = self._live.get(run_id)
        if live is not None:
            live.done.wait(timeout)
        while time.monotonic() < deadline:
            run = self._load_run(run_id)
            if run.state in TERMINAL_STATES:
                return run
            time.sleep(0.01)
        raise TimeoutError(f"run {run_id} not terminal after {timeout}s")

    def stream_events(
        self,
        run_id: str,
        from_seq: int = 0,
        *,
        principal_owner: str | None = None,
        is_admin: bool = False,
        heartbeat: float | None = None,
        poll_interval: float = 0.2,
    ) -> Iterator[RunEvent | None]:
        """Replay persisted events after ``from_seq``, then follow live ones.

        Yields None on heartbeat timeouts when ``heartbeat`` is set. The
        stream ends after the terminal event (or immediately, if the cursor
        is already past it).
        """
        run = self._load_run(run_id)
        self._authorize(run, principal_owner, is_admin)
        cursor = int(from_seq)
        last_beat = time.monotonic()
        while True:
            events = self.store.events_after(run_id, cursor)
            if events:
                for raw in events:
                    event = RunEvent(
                        seq=raw["seq"],
                        kind=raw["kind"],
                        payload=raw["payload"],
                        emitted_at=raw["emitted_at"],
                    )
                    yield event
                    cursor = event.seq
                    last_beat = time.monotonic()
                    if event.kind in TERMINAL_EVENTS:
                        return
                continue
            with self._live_lock:
                live = self._live.get(run_id)
            if live is None:
                # no live state and no new events: terminal event already
                # replayed (cursor past it) or recovery wrote one; re-check
                state = self._load_run(run_id).state
                if state in TERMINAL_STATES:
                    return
                time.sleep(poll_interval)
            else:
                with live.cond:
                    if live.seq <= cursor and not live.done.is_set():
                        live.cond.wait(timeout=poll_interval)
            if heartbeat is not None and time.monotonic() - last_beat >= heartbeat:
                last_beat = time.monotonic()
                yield None

    # ------------------------------------------------------------------
    # Recovery
    # ------------------------------------------------------------------

    def recover(self) -> list[str]:
        """Mark non-terminal runs from a previous process as failed.

        Their streams then terminate cleanly; no automatic re-execution.
        """
        interrupted = []
        for record in self.store.list_entities("run"):
            run = ScoringRun.from_dict(record.payload)
            if run.state in TERMINAL_STATES:
                continue
            with self._live_lock:
                if run.run_id in self._live:
                    continue  # owned by this process
            run.state = FAILED
            run.finished_at = self._now()
            scored = {(s.essay_id, s.trait) for s in run.results}
            for essay_id, traits in run.requested:
                for trait in traits:
                    if (essay_id, trait) not in scored:
                        run.failures.append(RunFailure(essay_id, trait, "interrupted"))
            self.store.put_entity("run", run.run_id, run.to_dict(), expected_version=-1)
            seq = self.store.last_seq(run.run_id) + 1
            self.store.append_event(
                run.run_id,
                seq,
                EV_RUN_FAILED,
                {"run_id": run.run_id, "state": FAILED, "reason": "interrupted"},
                self._now(),
            )
            interrupted.append(run.run_id)
        return interrupted


def _iso_now() -> str:
    from datetime import datetime, timezone

    return datetime.now(timezone.utc).isoformat()
