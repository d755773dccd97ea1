"""Workspace persistence: entities, batch essay ingestion, scoring history,
refinement overlays, finalized-score resolution, and report generation.

Backed by an embedded sqlite database (file path or ":memory:") with one
connection serialized behind a lock; every logical operation is one
transaction. Model scores are append-only history keyed by run; manual
refinements live in a separate overlay table and never mutate model output.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import secrets
import sqlite3
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Callable, Iterable, Mapping

from . import domain

ENTITY_KINDS = ("prompt", "rubric", "assignment", "essay", "run", "key")

_counter = itertools.count()


def new_id(prefix: str) -> str:
    """Time-ordered unique id: ms timestamp, process counter, random suffix."""
    ms = time.time_ns() // 1_000_000
    return f"{prefix}-{ms:013d}-{next(_counter) % 10000:04d}{secrets.token_hex(3)}"


def iso_now() -> str:
    return datetime.now(timezone.utc).isoformat()


class StoreError(RuntimeError):
    code = "store_error"


class UnknownEntity(StoreError):
    code = "unknown_entity"


class VersionConflict(StoreError):
    code = "version_conflict"


class IntegrityViolation(StoreError):
    code = "integrity_violation"


class DuplicateRun(StoreError):
    code = "duplicate_run"


class IngestError(StoreError):
    code = "ingest_failed"


class RefinementError(StoreError):
    code = "refinement_failed"


@dataclass(frozen=True)
class EntityRecord:
    kind: str
    id: str
    payload: dict[str, Any]
    version: int
    created_at: str
    updated_at: str


@dataclass(frozen=True)
class IngestResult:
    batch_id: str
    accepted: int
    rejects: tuple[tuple[int, str], ...]  # (row number, reason code)

    def to_dict(self) -> dict[str, Any]:
        return {
            "batch_id": self.batch_id,
            "accepted": self.accepted,
            "rejects": [{"line": line, "reason": reason} for line, reason in self.rejects],
        }


@dataclass(frozen=True)
class RefinementOverlay:
    assignment_id: str
    essay_id: str
    trait: str
    value: int
    actor: str
    at: str
    note: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "assignment_id": self.assignment_id,
            "essay_id": self.essay_id,
            "trait": self.trait,
            "value": self.value,
            "actor": self.actor,
            "at": self.at,
            "note": self.note,
        }


@dataclass(frozen=True)
class FinalScore:
    value: int
    source: str  # "refined" | "derived" | run id


_SCHEMA_SQL = """
CREATE TABLE IF NOT EXISTS entities (
    kind TEXT NOT NULL,
    id TEXT NOT NULL,
    version INTEGER NOT NULL,
    payload TEXT NOT NULL,
    created_at TEXT NOT NULL,
    updated_at TEXT NOT NULL,
    deleted INTEGER NOT NULL DEFAULT 0,
    PRIMARY KEY (kind, id)
);
CREATE TABLE IF NOT EXISTS events (
    run_id TEXT NOT NULL,
    seq INTEGER NOT NULL,
    kind TEXT NOT NULL,
    payload TEXT NOT NULL,
    emitted_at TEXT NOT NULL,
    PRIMARY KEY (run_id, seq)
);
CREATE TABLE IF NOT EXISTS scores (
    run_id TEXT NOT NULL,
    assignment_id TEXT,
    essay_id TEXT NOT NULL,
    trait TEXT NOT NULL,
    raw_value REAL NOT NULL,
    value INTEGER NOT NULL,
    model_id TEXT NOT NULL,
    elapsed_ms INTEGER NOT NULL,
    recorded_at TEXT NOT NULL,
    PRIMARY KEY (run_id, essay_id, trait)
);
CREATE TABLE IF NOT EXISTS runs_recorded (
    run_id TEXT PRIMARY KEY,
    assignment_id TEXT,
    recorded_at TEXT NOT NULL,
    deleted INTEGER NOT NULL DEFAULT 0
);
CREATE TABLE IF NOT EXISTS refinements (
    rowid_auto INTEGER PRIMARY KEY AUTOINCREMENT,
    assignment_id TEXT NOT NULL,
    essay_id TEXT NOT NULL,
    trait TEXT NOT NULL,
    value INTEGER NOT NULL,
    actor TEXT NOT NULL,
    at TEXT NOT NULL,
    note TEXT NOT NULL DEFAULT '',
    active INTEGER NOT NULL DEFAULT 1
);
CREATE INDEX IF NOT EXISTS idx_scores_assignment ON scores (assignment_id, essay_id, trait);
CREATE INDEX IF NOT EXISTS idx_refinements_key ON refinements (assignment_id, essay_id, trait, active);
"""


def _essay_key(assignment_id: str, essay_id: str) -> str:
    return f"{assignment_id}::{essay_id}"


class Workspace:
    """All persistent workspace state behind one transactional interface."""

    def __init__(
        self,
        path: str = ":memory:",
        *,
        schema: domain.TraitSchema = domain.DEFAULT_SCHEMA,
        model_checker: Callable[[str], bool] | None = None,
        wall_clock: Callable[[], str] = iso_now,
    ):
        self.path = path
        self.schema = schema
        self.model_checker = model_checker
        self._now = wall_clock
        self._lock = threading.RLock()
        self._conn = sqlite3.connect(path, check_same_thread=False)
        self._conn.row_factory = sqlite3.Row
        self._conn.isolation_level = None  # manual transactions
        with self._lock:
            self._conn.executescript(_SCHEMA_SQL)

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    @contextmanager
    def _tx(self):
        with self._lock:
            self._conn.execute("BEGIN IMMEDIATE")
            try:
                yield self._conn
            except Exception:
                self._conn.execute("ROLLBACK")
                raise
            self._conn.execute("COMMIT")

    def _query(self, sql: str, args: tuple = ()) -> list[sqlite3.Row]:
        with self._lock:
            return self._conn.execute(sql, args).fetchall()

    # ------------------------------------------------------------------
    # Generic entity CRUD
    # ------------------------------------------------------------------

    def _validate_payload(self, kind: str, entity_id: str, payload: Mapping[str, Any]) -> None:
        if kind == "prompt":
            domain.validate_prompt(domain.Prompt.from_dict(payload))
        elif kind == "rubric":
            rubric = domain.Rubric.from_dict(payload)
            result = domain.validate_rubric(rubric, self.schema)
            if not result.ok:
                raise domain.ValidationError(
                    f"rubric {entity_id}: " + "; ".join(result.violations)
                )
        elif kind == "assignment":
            assignment = domain.Assignment.from_dict(payload)
            domain.validate_assignment(assignment, self.schema)
            self._check_assignment_refs(assignment)
        elif kind == "essay":
            domain.validate_essay(domain.Essay.from_dict(payload))
        elif kind not in ENTITY_KINDS:
            raise domain.ValidationError(f"unknown entity kind {kind!r}")

    def _check_assignment_refs(self, assignment: domain.Assignment) -> None:
        self.get_entity("prompt", assignment.prompt_id)  # raises UnknownEntity
        for trait, (rubric_id, model_id) in assignment.trait_config:
            if rubric_id:
                record = self.get_entity("rubric", rubric_id)
                if record.payload.get("trait") != trait:
                    raise domain.ValidationError(
                        f"rubric {rubric_id} scores trait {record.payload.get('trait')}, "
                        f"not {trait}"
                    )
            if self.model_checker is not None and not self.model_checker(model_id):
                raise domain.ValidationError(f"unknown model {model_id!r} for trait {trait}")

    def put_entity(
        self,
        kind: str,
        entity_id: str,
        payload: Mapping[str, Any],
        expected_version: int | None = None,
    ) -> EntityRecord:
        """Create or update. ``expected_version`` of 0/None creates; a positive
        value must match the stored version (optimistic concurrency). Internal
        single-writer paths may pass -1 to force an upsert."""
        self._validate_payload(kind, entity_id, payload)
        now = self._now()
        data = json.dumps(dict(payload), ensure_ascii=False, sort_keys=True)
        with self._tx() as conn:
            row = conn.execute(
                "SELECT version, created_at, deleted FROM entities WHERE kind=? AND id=?",
                (kind, entity_id),
            ).fetchone()
            if row is None or row["deleted"]:
                if expected_version not in (None, 0, -1):
                    raise VersionConflict(
                        f"{kind} {entity_id}: expected version {expected_version}, entity absent"
                    )
                conn.execute(
                    "INSERT OR REPLACE INTO entities (kind,id,version,payload,created_at,updated_at,deleted)"
                    " VALUES (?,?,?,?,?,?,0)",
                    (kind, entity_id, 1, data, now, now),
                )
                return EntityRecord(kind, entity_id, dict(payload), 1, now, now)
            current = row["version"]
            if expected_version is None:
                raise VersionConflict(
                    f"{kind} {entity_id} already exists at version {current}; "
                    f"pass expected_version to update"
                )
            if expected_version != -1 and expected_version != current:
                raise VersionConflict(
                    f"{kind} {entity_id}: expected version {expected_version}, stored {current}"
                )
            conn.execute(
                "UPDATE entities SET version=?, payload=?, updated_at=? WHERE kind=? AND id=?",
                (current + 1, data, now, kind, entity_id),
            )
            return EntityRecord(kind, entity_id, dict(payload), current + 1, row["created_at"], now)

    def get_entity(self, kind: str, entity_id: str) -> EntityRecord:
        rows = self._query(
            "SELECT * FROM entities WHERE kind=? AND id=? AND deleted=0", (kind, entity_id)
        )
        if not rows:
            raise UnknownEntity(f"unknown {kind} {entity_id!r}")
        row = rows[0]
        return EntityRecord(
            kind=row["kind"],
            id=row["id"],
            payload=json.loads(row["payload"]),
            version=row["version"],
            created_at=row["created_at"],
            updated_at=row["updated_at"],
        )

    def list_entities(
        self,
        kind: str,
        *,
        owner: str | None = None,
        limit: int | None = None,
        offset: int = 0,
    ) -> list[EntityRecord]:
        rows = self._query(
            "SELECT * FROM entities WHERE kind=? AND deleted=0 ORDER BY id", (kind,)
        )
        records = [
            EntityRecord(
                kind=r["kind"],
                id=r["id"],
                payload=json.loads(r["payload"]),
                version=r["version"],
                created_at=r["created_at"],
                updated_at=r["updated_at"],
            )
            for r in rows
        ]
        if owner is not None:
            records = [r for r in records if r.payload.get("owner") == owner]
        if offset:
            records = records[offset:]
        if limit is not None:
            records = records[:limit]
        return records

    def _referrers(self, kind: str, entity_id: str) -> list[str]:
        refs: list[str] = []
        if kind == "prompt":
            for record in self.list_entities("assignment"):
                if record.payload.get("prompt_id") == entity_id:
                    refs.append(f"assignment {record.id}")
        elif kind == "rubric":
            for record in self.list_entities("assignment"):
                for trait, pair in record.payload.get("trait_config", {}).items():
                    if pair and pair[0] == entity_id:
                        refs.append(f"assignment {record.id}")
        elif kind == "assignment":
            if self.list_essays(entity_id):
                refs.append("essays")
            rows = self._query(
                "SELECT run_id FROM runs_recorded WHERE assignment_id=? AND deleted=0", (entity_id,)
            )
            refs.extend(f"run {r['run_id']}" for r in rows)
        elif kind == "essay":
            rows = self._query(
                "SELECT DISTINCT s.run_id FROM scores s JOIN runs_recorded rr ON rr.run_id = s.run_id"
                " WHERE rr.deleted=0 AND s.assignment_id || '::' || s.essay_id = ?",
                (entity_id,),
            )
            refs.extend(f"run {r['run_id']}" for r in rows)
        return refs

    def delete_entity(self, kind: str, entity_id: str) -> None:
        """Hard delete; rejected while anything still references the entity."""
        if kind == "run":
            raise StoreError("runs are deleted via delete_run (soft) or purge_run")
        self.get_entity(kind, entity_id)
        referrers = self._referrers(kind, entity_id)
        if referrers:
            raise IntegrityViolation(
                f"{kind} {entity_id} is referenced by: " + ", ".join(sorted(set(referrers)))
            )
        with self._tx() as conn:
            conn.execute("DELETE FROM entities WHERE kind=? AND id=?", (kind, entity_id))

    # ------------------------------------------------------------------
    # Essays
    # ------------------------------------------------------------------

    def add_essay(self, assignment_id: str, essay: domain.Essay) -> None:
        self.get_entity("assignment", assignment_id)
        key = _essay_key(assignment_id, essay.id)
        try:
            self.get_entity("essay", key)
        except UnknownEntity:
            self.put_entity("essay", key, essay.to_dict())
            return
        raise IntegrityViolation(f"essay {essay.id!r} already exists in assignment {assignment_id}")

    def list_essays(self, assignment_id: str) -> list[domain.Essay]:
        prefix = _essay_key(assignment_id, "")
        rows = self._query(
            "SELECT payload FROM entities WHERE kind='essay' AND deleted=0 AND id LIKE ? ORDER BY id",
            (prefix + "%",),
        )
        return [domain.Essay.from_dict(json.loads(r["payload"])) for r in rows]

    def get_essay(self, assignment_id: str, essay_id: str) -> domain.Essay:
        record = self.get_entity("essay", _essay_key(assignment_id, essay_id))
        return domain.Essay.from_dict(record.payload)

    # ------------------------------------------------------------------
    # Batch ingestion
    # ------------------------------------------------------------------

    def ingest_batch(self, data: bytes, fmt: str, assignment_id: str) -> IngestResult:
        """Parse a CSV (header ``essay_id,text``) or JSONL batch; persist valid
        rows atomically, reporting per-row rejects by reason code. Row numbers
        count the header as line 1 for CSV and are physical lines for JSONL."""
        self.get_entity("assignment", assignment_id)
        try:
            text = data.decode("utf-8-sig")
        except UnicodeDecodeError as exc:
            raise IngestError(f"batch not decodable as UTF-8: {exc}") from exc

        if fmt == "csv":
            rows, parse_rejects = self._parse_csv(text)
        elif fmt == "jsonl":
            rows, parse_rejects = self._parse_jsonl(text)
        else:
            raise IngestError(f"unknown batch format {fmt!r} (expected csv or jsonl)")
        if not rows and not parse_rejects:
            raise IngestError("empty batch: no data rows")

        batch_id = new_id("batch")
        now = self._now()
        existing = {e.id for e in self.list_essays(assignment_id)}
        seen: set[str] = set()
        accepted: list[domain.Essay] = []
        rejects: list[tuple[int, str]] = list(parse_rejects)
        for line, essay_id, essay_text, metadata in rows:
            if not essay_id:
                rejects.append((line, "missing_essay_id"))
                continue
            if not essay_text or not essay_text.strip():
                rejects.append((line, "empty_text"))
                continue
            if essay_id in seen or essay_id in existing:
                rejects.append((line, "duplicate_id"))
                continue
            seen.add(essay_id)
            accepted.append(
                domain.Essay(
                    id=essay_id,
                    text=essay_text,
                    upload_batch=batch_id,
                    created_at=now,
                    metadata=tuple(sorted(metadata.items())),
                )
            )

        with self._tx() as conn:
            for essay in accepted:
                conn.execute(
                    "INSERT INTO entities (kind,id,version,payload,created_at,updated_at,deleted)"
                    " VALUES ('essay',?,?,?,?,?,0)",
                    (
                        _essay_key(assignment_id, essay.id),
                        1,
                        json.dumps(essay.to_dict(), ensure_ascii=False, sort_keys=True),
                        now,
                        now,
                    ),
                )
        rejects.sort(key=lambda r: r[0])
        return IngestResult(batch_id=batch_id, accepted=len(accepted), rejects=tuple(rejects))

    @staticmethod
    def _parse_csv(text: str):
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError("missing header row") from None
        header = [h.strip() for h in header]
        if "essay_id" not in header or "text" not in header:
            raise IngestError(f"header must contain essay_id and text, got {header}")
        id_idx = header.index("essay_id")
        text_idx = header.index("text")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            essay_id = row[id_idx].strip() if id_idx < len(row) else ""
            essay_text = row[text_idx] if text_idx < len(row) else ""
            metadata = {
                header[i]: row[i]
                for i in range(len(header))
                if i not in (id_idx, text_idx) and i < len(row) and row[i]
            }
            rows.append((line_no, essay_id, essay_text, metadata))
        return rows, []

    @staticmethod
    def _parse_jsonl(text: str):
        rows = []
        rejects: list[tuple[int, str]] = []
        for line_no, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                rejects.append((line_no, "bad_json"))
                continue
            if not isinstance(obj, dict):
                rejects.append((line_no, "bad_json"))
                continue
            essay_id = str(obj.get("essay_id", "") or "")
            essay_text = obj.get("text", "")
            metadata = {k: str(v) for k, v in obj.items() if k not in ("essay_id", "text")}
            rows.append(
                (line_no, essay_id, str(essay_text) if essay_text is not None else "", metadata)
            )
        return rows, rejects

    # ------------------------------------------------------------------
    # Scoring history
    # ------------------------------------------------------------------

    def record_results(
        self,
        run_id: str,
        assignment_id: str | None,
        results: Iterable[domain.TraitScore],
    ) -> None:
        """Append one terminal run's scores; history is immutable per run."""
        rows = self._query("SELECT run_id FROM runs_recorded WHERE run_id=?", (run_id,))
        if rows:
            raise DuplicateRun(f"results for run {run_id} already recorded")
        now = self._now()
        with self._tx() as conn:
            conn.execute(
                "INSERT INTO runs_recorded (run_id, assignment_id, recorded_at, deleted) VALUES (?,?,?,0)",
                (run_id, assignment_id, now),
            )
            for score in results:
                conn.execute(
                    "INSERT INTO scores (run_id,assignment_id,essay_id,trait,raw_value,value,"
                    "model_id,elapsed_ms,recorded_at) VALUES (?,?,?,?,?,?,?,?,?)",
                    (
                        run_id,
                        assignment_id,
                        score.essay_id,
                        score.trait,
                        score.raw_value,
                        score.value,
                        score.model_id,
                        score.elapsed_ms,
                        now,
                    ),
                )

    def run_recorded(self, run_id: str) -> bool:
        return bool(self._query("SELECT 1 FROM runs_recorded WHERE run_id=? AND deleted=0", (run_id,)))

    def scores_for_run(self, run_id: str) -> list[domain.TraitScore]:
        rows = self._query("SELECT * FROM scores WHERE run_id=? ORDER BY essay_id, trait", (run_id,))
        return [
            domain.TraitScore(
                essay_id=r["essay_id"],
                trait=r["trait"],
                raw_value=r["raw_value"],
                value=r["value"],
                model_id=r["model_id"],
                run_id=r["run_id"],
                elapsed_ms=r["elapsed_ms"],
            )
            for r in rows
        ]

    def delete_run(self, run_id: str) -> None:
        """Soft delete: the run disappears from history and finalization, but
        rows survive for audit until purge_run."""
        if not self._query("SELECT 1 FROM runs_recorded WHERE run_id=?", (run_id,)):
            if not self._query(
                "SELECT 1 FROM entities WHERE kind='run' AND id=? AND deleted=0", (run_id,)
            ):
                raise UnknownEntity(f"unknown run {run_id!r}")
        with self._tx() as conn:
            conn.execute("UPDATE runs_recorded SET deleted=1 WHERE run_id=?", (run_id,))
            conn.execute("UPDATE entities SET deleted=1 WHERE kind='run' AND id=?", (run_id,))

    def purge_run(self, run_id: str) -> None:
        """Admin-only hard removal of a tombstoned run's rows."""
        with self._tx() as conn:
            conn.execute("DELETE FROM scores WHERE run_id=?", (run_id,))
            conn.execute("DELETE FROM events WHERE run_id=?", (run_id,))
            conn.execute("DELETE FROM runs_recorded WHERE run_id=?", (run_id,))
            conn.execute("DELETE FROM entities WHERE kind='run' AND id=?", (run_id,))

    # ------------------------------------------------------------------
    # Run events
    # ------------------------------------------------------------------

    def append_event(self, run_id: str, seq: int, kind: str, payload: Mapping[str, Any], emitted_at: str) -> None:
        with self._tx() as conn:
            conn.execute(
                "INSERT INTO events (run_id, seq, kind, payload, emitted_at) VALUES (?,?,?,?,?)",
                (run_id, seq, kind, json.dumps(dict(payload), ensure_ascii=False, sort_keys=True), emitted_at),
            )

    def events_after(self, run_id: str, after_seq: int = 0) -> list[dict[str, Any]]:
        rows = self._query(
            "SELECT seq, kind, payload, emitted_at FROM events WHERE run_id=? AND seq>? ORDER BY seq",
            (run_id, after_seq),
        )
        return [
            {
                "seq": r["seq"],
                "kind": r["kind"],
                "payload": json.loads(r["payload"]),
                "emitted_at": r["emitted_at"],
            }
            for r in rows
        ]

    def last_seq(self, run_id: str) -> int:
        rows = self._query("SELECT MAX(seq) AS m FROM events WHERE run_id=?", (run_id,))
        return int(rows[0]["m"] or 0)

    # ------------------------------------------------------------------
    # Refinement overlays
    # ------------------------------------------------------------------

    def refine_score(
        self,
        assignment_id: str,
        essay_id: str,
        trait: str,
        value: int,
        actor: str,
        note: str = "",
    ) -> RefinementOverlay:
        spec = self.schema.spec(trait)
        if not spec.contains(int(value)):
            raise RefinementError(
                f"value {value} outside {trait} range [{spec.min_score},{spec.max_score}]"
            )
        underlying = self._query(
            "SELECT 1 FROM scores s JOIN runs_recorded rr ON rr.run_id = s.run_id"
            " WHERE rr.deleted=0 AND s.assignment_id=? AND s.essay_id=? AND s.trait=? LIMIT 1",
            (assignment_id, essay_id, trait),
        )
        if not underlying:
            raise RefinementError(
                f"no model score exists for {essay_id}/{trait} in assignment {assignment_id}"
            )
        at = self._now()
        with self._tx() as conn:
            conn.execute(
                "UPDATE refinements SET active=0 WHERE assignment_id=? AND essay_id=? AND trait=?",
                (assignment_id, essay_id, trait),
            )
            conn.execute(
                "INSERT INTO refinements (assignment_id,essay_id,trait,value,actor,at,note,active)"
                " VALUES (?,?,?,?,?,?,?,1)",
                (assignment_id, essay_id, trait, int(value), actor, at, note),
            )
        return RefinementOverlay(
            assignment_id=assignment_id,
            essay_id=essay_id,
            trait=trait,
            value=int(value),
            actor=actor,
            at=at,
            note=note,
        )

    def active_refinements(self, assignment_id: str) -> list[RefinementOverlay]:
        rows = self._query(
            "SELECT * FROM refinements WHERE assignment_id=? AND active=1 ORDER BY essay_id, trait",
            (assignment_id,),
        )
        return [
            RefinementOverlay(
                assignment_id=r["assignment_id"],
                essay_id=r["essay_id"],
                trait=r["trait"],
                value=r["value"],
                actor=r["actor"],
                at=r["at"],
                note=r["note"],
            )
            for r in rows
        ]

    def refinement_history(self, assignment_id: str, essay_id: str, trait: str) -> list[RefinementOverlay]:
        rows = self._query(
            "SELECT * FROM refinements WHERE assignment_id=? AND essay_id=? AND trait=?"
            " ORDER BY rowid_auto",
            (assignment_id, essay_id, trait),
        )
        return [
            RefinementOverlay(
                assignment_id=r["assignment_id"],
                essay_id=r["essay_id"],
                trait=r["trait"],
                value=r["value"],
                actor=r["actor"],
                at=r["at"],
                note=r["note"],
            )
            for r in rows
        ]

    # ------------------------------------------------------------------
    # Finalization and reports
    # ------------------------------------------------------------------

    def finalized_scores(self, assignment_id: str) -> dict[str, dict[str, FinalScore]]:
        """Resolve each (essay, trait) to its finalized value.

        Resolution order: active overlay, else the most recent non-deleted
        run containing the pair. The holistic value is recomputed from the
        finalized component values when all of them are present (an explicit
        holistic overlay still dominates), else taken from its source run.
        """
        self.get_entity("assignment", assignment_id)
        rows = self._query(
            "SELECT s.*, rr.recorded_at AS rec FROM scores s"
            " JOIN runs_recorded rr ON rr.run_id = s.run_id"
            " WHERE rr.deleted=0 AND s.assignment_id=?"
            " ORDER BY rr.recorded_at, s.run_id",
            (assignment_id,),
        )
        latest: dict[str, dict[str, FinalScore]] = {}
        for r in rows:  # later rows overwrite: recency rule
            latest.setdefault(r["essay_id"], {})[r["trait"]] = FinalScore(
                value=r["value"], source=r["run_id"]
            )
        for overlay in self.active_refinements(assignment_id):
            latest.setdefault(overlay.essay_id, {})[overlay.trait] = FinalScore(
                value=overlay.value, source="refined"
            )
        holistic = self.schema.holistic
        if holistic is not None:
            components = self.schema.component_traits
            for essay_id, traits in latest.items():
                hol = traits.get(holistic)
                if hol is not None and hol.source == "refined":
                    continue  # overlay dominance
                if all(t in traits for t in components):
                    total = sum(traits[t].value for t in components)
                    traits[holistic] = FinalScore(value=total, source="derived")
        return latest

    def generate_report(self, assignment_id: str) -> "Report":
        record = self.get_entity("assignment", assignment_id)
        assignment = domain.Assignment.from_dict(record.payload)
        runs = self._query(
            "SELECT run_id, recorded_at FROM runs_recorded WHERE assignment_id=? AND deleted=0",
            (assignment_id,),
        )
        if not runs:
            raise StoreError(f"no recorded runs for assignment {assignment_id}")
        finalized = self.finalized_scores(assignment_id)
        essays = self.list_essays(assignment_id)

        configured = [t for t, _ in assignment.trait_config]
        trait_order = [t for t in self.schema.trait_names if t in configured]
        holistic = self.schema.holistic
        if holistic and holistic not in trait_order:
            if any(holistic in traits for traits in finalized.values()):
                trait_order.append(holistic)

        essay_rows = []
        unscored: list[dict[str, str]] = []
        stats_values: dict[str, list[int]] = {t: [] for t in trait_order}
        for essay in essays:
            traits_out = {}
            for trait in trait_order:
                final = finalized.get(essay.id, {}).get(trait)
                if final is None:
                    unscored.append({"essay_id": essay.id, "trait": trait})
                else:
                    traits_out[trait] = {"value": final.value, "source": final.source}
                    stats_values[trait].append(final.value)
            essay_rows.append(
                {"essay_id": essay.id, "word_count": essay.word_count, "scores": traits_out}
            )

        stats = {}
        for trait in trait_order:
            values = stats_values[trait]
            if values:
                stats[trait] = {
                    "count": len(values),
                    "mean": sum(values) / len(values),
                    "min": min(values),
                    "max": max(values),
                }
            else:
                stats[trait] = {"count": 0, "mean": None, "min": None, "max": None}

        # deterministic timestamp: the newest contributing record, not the wall clock
        candidates = [record.updated_at] + [r["recorded_at"] for r in runs]
        candidates += [o.at for o in self.active_refinements(assignment_id)]
        generated_at = max(candidates)

        return Report(
            assignment={
                "id": assignment.id,
                "title": assignment.title,
                "language": assignment.language,
                "essay_type": assignment.essay_type,
                "grade_level": assignment.grade_level,
                "prompt_id": assignment.prompt_id,
                "owner": assignment.owner,
            },
            trait_order=tuple(trait_order),
            essays=tuple(essay_rows),
            stats=stats,
            unscored=tuple(unscored),
            generated_at=generated_at,
        )


@dataclass(frozen=True)
class Report:
    """Finalized-score summary; serialization is byte-deterministic."""

    assignment: dict[str, Any]
    trait_order: tuple[str, ...]
    essays: tuple[dict[str, Any], ...]
    stats: dict[str, Any]
    unscored: tuple[dict[str, str], ...]
    generated_at: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "assignment": self.assignment,
            "trait_order": list(self.trait_order),
            "essays": [dict(e) for e in self.essays],
            "stats": self.stats,
            "unscored": [dict(u) for u in self.unscored],
            "generated_at": self.generated_at,
        }

    def to_json_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True, indent=2).encode("utf-8")

    def to_text(self) -> str:
        lines = []
        a = self.assignment
        lines.append(f"Assignment report: {a['title'] or a['id']}")
        lines.append(
            f"  id={a['id']}  language={a['language']}  type={a['essay_type']}"
            f"  grade={a['grade_level']}"
        )
        lines.append(f"  generated_at={self.generated_at}")
        lines.append("")
        width = max([8] + [len(e["essay_id"]) for e in self.essays])
        header = f"{'essay':<{width}}  " + "  ".join(f"{t:>9}" for t in self.trait_order)
        lines.append(header)
        lines.append("-" * len(header))
        for e in self.essays:
            cells = []
            for t in self.trait_order:
                s = e["scores"].get(t)
                if s is None:
                    cells.append(f"{'-':>9}")
                else:
                    marker = "*" if s["source"] == "refined" else ""
                    cells.append(f"{str(s['value']) + marker:>9}")
            lines.append(f"{e['essay_id']:<{width}}  " + "  ".join(cells))
        lines.append("-" * len(header))
        mean_cells = []
        for t in self.trait_order:
            st = self.stats[t]
            mean_cells.append(f"{'-':>9}" if st["mean"] is None else f"{st['mean']:>9.2f}")
        lines.append(f"{'mean':<{width}}  " + "  ".join(mean_cells))
        if self.unscored:
            lines.append("")
            lines.append("Unscored pairs:")
            for u in self.unscored:
                lines.append(f"  {u['essay_id']}/{u['trait']}")
        lines.append("")
        lines.append("* manually refined")
        return "\n".join(lines) + "\n"
