"""REST + SSE scoring service behind the API-key gateway.

Every endpoint except /healthz requires ``Authorization: Bearer <secret>``
and passes the key's token bucket. Errors are machine-readable
``{code, message, details}`` bodies with stable code strings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

from fastapi import Depends, FastAPI, Header, Query, Request, Response
from fastapi.responses import JSONResponse, PlainTextResponse, StreamingResponse
from pydantic import BaseModel

from . import domain
from .auth import ApiKey, AuthError, ForbiddenScope, KeyManager, Principal
from .evaluation import star_rating
from .registry import (
    ConfigError,
    ModelDisabledError,
    Registry,
    RegistryConfig,
    UnknownModelError,
    load_config,
)
from .runs import (
    RunManager,
    RunRequest,
    RunValidationError,
    TERMINAL_STATES,
    UnauthorizedRun,
    UnknownRun,
)
from .store import (
    DuplicateRun,
    IngestError,
    IntegrityViolation,
    RefinementError,
    StoreError,
    UnknownEntity,
    VersionConflict,
    Workspace,
    new_id,
)

HEARTBEAT_SECONDS = 15.0


class RateLimited(Exception):
    def __init__(self, retry_after: int):
        super().__init__(f"rate limited; retry after {retry_after}s")
        self.retry_after = retry_after


@dataclass
class Components:
    config: RegistryConfig
    registry: Registry
    store: Workspace
    keys: KeyManager
    runs: RunManager
    bootstrap_secret: str | None = None  # set only when generated at first start


def build_components(
    config_path: str | Path,
    *,
    store_path: str | None = None,
    run_workers: int | None = None,
) -> Components:
    """Wire the full service from one config file."""
    config = load_config(config_path)
    registry = Registry(config)
    server_extras = dict(config.extras.get("server") or {})
    if store_path is None:
        store_path = server_extras.get("store_path", "workspace.db")
        if store_path != ":memory:" and not Path(store_path).is_absolute():
            store_path = str(config.base_dir / store_path)
    if run_workers is None:
        run_workers = int(server_extras.get("run_workers", 4))

    def model_exists(model_id: str) -> bool:
        try:
            config.descriptor(model_id)
            return True
        except UnknownModelError:
            return model_id == "derived"

    store = Workspace(store_path, schema=config.schema, model_checker=model_exists)
    keys = KeyManager(
        persist=lambda key: store.put_entity("key", key.key_id, key.to_dict(), expected_version=-1)
    )
    keys.load(ApiKey.from_dict(r.payload) for r in store.list_entities("key"))

    bootstrap_secret = None
    auth_extras = dict(config.extras.get("auth") or {})
    if not keys.list_keys():
        owner = str(auth_extras.get("bootstrap_owner", "admin"))
        configured = auth_extras.get("bootstrap_admin_secret")
        _, secret = keys.issue_key(
            owner,
            scopes=("admin", "score", "read"),
            rate_limit=int(auth_extras.get("bootstrap_rate_limit", 600)),
            secret=str(configured) if configured else None,
        )
        if not configured:
            bootstrap_secret = secret

    runs = RunManager(store, registry, worker_budget=run_workers)
    return Components(
        config=config,
        registry=registry,
        store=store,
        keys=keys,
        runs=runs,
        bootstrap_secret=bootstrap_secret,
    )


# ---------------------------------------------------------------------------
# Request bodies
# ---------------------------------------------------------------------------


class InlineEssay(BaseModel):
    essay_id: str
    text: str


class CreateRunBody(BaseModel):
    traits: list[str]
    assignment_id: str | None = None
    essay_ids: list[str] | None = None
    essays: list[InlineEssay] | None = None
    model_overrides: dict[str, str] | None = None


class RefinementBody(BaseModel):
    essay_id: str
    trait: str
    value: int
    note: str = ""


class IssueKeyBody(BaseModel):
    owner: str
    scopes: list[str] = ["score", "read"]
    rate_limit: int = 60


def _error_response(status: int, code: str, message: str, details: dict[str, Any] | None = None,
                    headers: dict[str, str] | None = None) -> JSONResponse:
    return JSONResponse(
        status_code=status,
        content={"code": code, "message": message, "details": details or {}},
        headers=headers,
    )


_ERROR_MAP: list[tuple[type, int, str]] = [
    (UnknownRun, 404, "unknown_run"),
    (UnknownEntity, 404, "unknown_entity"),
    (UnknownModelError, 404, "unknown_model"),
    (ModelDisabledError, 409, "model_disabled"),
    (UnauthorizedRun, 403, "unauthorized"),
    (VersionConflict, 409, "version_conflict"),
    (IntegrityViolation, 409, "integrity_violation"),
    (DuplicateRun, 409, "duplicate_run"),
    (IngestError, 400, "ingest_failed"),
    (RefinementError, 400, "refinement_failed"),
    (RunValidationError, 400, "validation_failed"),
    (domain.ValidationError, 400, "validation_failed"),
    (domain.SchemaError, 400, "validation_failed"),
    (domain.ScoringError, 500, "scoring_failed"),
    (ConfigError, 400, "config_invalid"),
    (StoreError, 409, "store_error"),
    (ValueError, 400, "validation_failed"),
]


def create_app(components: Components) -> FastAPI:
    app = FastAPI(title="traitmark scoring server", version="1")
    app.state.components = components
    c = components

    def require(scope: str):
        def dependency(authorization: str | None = Header(default=None)) -> Principal:
            principal = c.keys.authorize(authorization)
            decision = c.keys.rate_check(principal.key_id)
            if not decision.allowed:
                raise RateLimited(decision.retry_after)
            if not principal.allows(scope):
                raise ForbiddenScope(f"scope {scope!r} required")
            return principal

        return dependency

    @app.exception_handler(AuthError)
    def _auth_error(request: Request, exc: AuthError):
        status = 403 if isinstance(exc, ForbiddenScope) else 401
        return _error_response(status, "unauthorized", str(exc), {"reason": exc.reason})

    @app.exception_handler(RateLimited)
    def _rate_limited(request: Request, exc: RateLimited):
        return _error_response(
            429,
            "rate_limited",
            str(exc),
            {"retry_after": exc.retry_after},
            headers={"Retry-After": str(exc.retry_after)},
        )

    from fastapi.exceptions import RequestValidationError

    @app.exception_handler(RequestValidationError)
    def _body_invalid(request: Request, exc: RequestValidationError):
        return _error_response(400, "validation_failed", "invalid request body", {"errors": exc.errors()})

    def _register_handler(exc_type: type, status: int, code: str) -> None:
        @app.exception_handler(exc_type)
        def handler(request: Request, exc: Exception, _status=status, _code=code):
            return _error_response(_status, _code, str(exc))

    for _exc_type, _status, _code in _ERROR_MAP:
        _register_handler(_exc_type, _status, _code)

    # ------------------------------------------------------------------
    # Service description
    # ------------------------------------------------------------------

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    def _describe() -> dict[str, Any]:
        schema = c.registry.schema
        return {
            "languages": list(c.registry.config.languages),
            "grade_levels": list(c.registry.config.grade_levels),
            "essay_types": list(c.registry.config.essay_types),
            "traits": [
                {
                    "name": spec.name,
                    "min": spec.min_score,
                    "max": spec.max_score,
                    "rubric_required": spec.rubric_required,
                    "derived": spec.name == schema.holistic,
                }
                for spec in schema
            ],
            "models": [m.to_dict() for m in c.registry.descriptors()],
        }

    @app.get("/v1/config")
    def get_config(principal: Principal = Depends(require("read"))):
        return _describe()

    @app.get("/v1/models")
    def get_models(principal: Principal = Depends(require("read"))):
        return {"models": _describe()["models"]}

    # ------------------------------------------------------------------
    # Runs
    # ------------------------------------------------------------------

    @app.post("/v1/runs", status_code=201)
    def create_run(body: CreateRunBody, principal: Principal = Depends(require("score"))):
        inline = tuple(
            domain.Essay(id=e.essay_id, text=e.text) for e in (body.essays or [])
        )
        request = RunRequest(
            traits=tuple(body.traits),
            assignment_id=body.assignment_id,
            essay_ids=tuple(body.essay_ids) if body.essay_ids is not None else None,
            inline_essays=inline,
            model_overrides=tuple((body.model_overrides or {}).items()),
        )
        run_id = c.runs.create_run(request, principal.owner)
        return {"run_id": run_id}

    @app.get("/v1/runs")
    def list_runs(
        assignment_id: str | None = Query(default=None),
        principal: Principal = Depends(require("read")),
    ):
        runs = c.runs.list_runs(
            assignment_id=assignment_id,
            principal_owner=principal.owner,
            is_admin=principal.allows("admin"),
        )
        return {"runs": [r.to_dict() for r in runs]}

    @app.get("/v1/runs/{run_id}")
    def get_run(run_id: str, principal: Principal = Depends(require("read"))):
        run = c.runs.get_run(run_id, principal.owner, is_admin=principal.allows("admin"))
        return run.to_dict()

    @app.delete("/v1/runs/{run_id}")
    def delete_run(run_id: str, principal: Principal = Depends(require("score"))):
        run = c.runs.get_run(run_id, principal.owner, is_admin=principal.allows("admin"))
        if run.state not in TERMINAL_STATES:
            raise RunValidationError(f"run {run_id} is still {run.state}")
        c.store.delete_run(run_id)
        return {"deleted": run_id}

    @app.get("/v1/runs/{run_id}/stream")
    def stream_run(
        run_id: str,
        from_seq: int = Query(default=0, ge=0),
        last_event_id: str | None = Header(default=None),
        principal: Principal = Depends(require("read")),
    ):
        # EventSource reconnects carry Last-Event-ID automatically; an explicit
        # from_seq query parameter wins
        cursor = from_seq
        if cursor == 0 and last_event_id:
            try:
                cursor = max(0, int(last_event_id))
            except ValueError:
                cursor = 0
        # authorization happens before the stream starts
        c.runs.get_run(run_id, principal.owner, is_admin=principal.allows("admin"))

        def sse() -> Iterator[str]:
            for event in c.runs.stream_events(
                run_id,
                cursor,
                principal_owner=principal.owner,
                is_admin=principal.allows("admin"),
                heartbeat=HEARTBEAT_SECONDS,
            ):
                if event is None:
                    yield ": keep-alive\n\n"
                    continue
                data = json.dumps(event.payload, ensure_ascii=False, sort_keys=True)
                yield f"id: {event.seq}\nevent: {event.kind}\ndata: {data}\n\n"

        return StreamingResponse(
            sse(),
            media_type="text/event-stream",
            headers={"Cache-Control": "no-cache", "X-Accel-Buffering": "no"},
        )

    # ------------------------------------------------------------------
    # Workspace entities
    # ------------------------------------------------------------------

    def _entity_routes(kind: str, prefix: str):
        @app.post(f"/v1/{prefix}", status_code=201, name=f"create_{kind}")
        def create(payload: dict, principal: Principal = Depends(require("score"))):
            entity_id = str(payload.get("id") or new_id(kind))
            payload = {**payload, "id": entity_id}
            if kind == "assignment":
                payload.setdefault("owner", principal.owner)
            record = c.store.put_entity(kind, entity_id, payload)
            return {"id": record.id, "version": record.version}

        @app.get(f"/v1/{prefix}", name=f"list_{kind}")
        def list_all(
            owner: str | None = Query(default=None),
            principal: Principal = Depends(require("read")),
        ):
            records = c.store.list_entities(kind, owner=owner)
            return {prefix: [dict(r.payload, _version=r.version) for r in records]}

        @app.get(f"/v1/{prefix}/{{entity_id}}", name=f"get_{kind}")
        def get_one(entity_id: str, principal: Principal = Depends(require("read"))):
            record = c.store.get_entity(kind, entity_id)
            return dict(record.payload, _version=record.version)

        @app.put(f"/v1/{prefix}/{{entity_id}}", name=f"update_{kind}")
        def update(
            entity_id: str,
            payload: dict,
            expected_version: int = Query(...),
            principal: Principal = Depends(require("score")),
        ):
            payload = {**payload, "id": entity_id}
            record = c.store.put_entity(kind, entity_id, payload, expected_version=expected_version)
            return {"id": record.id, "version": record.version}

        @app.delete(f"/v1/{prefix}/{{entity_id}}", name=f"delete_{kind}")
        def delete(entity_id: str, principal: Principal = Depends(require("score"))):
            c.store.delete_entity(kind, entity_id)
            return {"deleted": entity_id}

    _entity_routes("prompt", "prompts")
    _entity_routes("rubric", "rubrics")
    _entity_routes("assignment", "assignments")

    @app.post("/v1/assignments/{assignment_id}/essays")
    async def ingest_essays(
        assignment_id: str,
        request: Request,
        format: str = Query(default=""),
        principal: Principal = Depends(require("score")),
    ):
        body = await request.body()
        fmt = format
        if not fmt:
            content_type = request.headers.get("content-type", "")
            fmt = "jsonl" if "ndjson" in content_type or "jsonl" in content_type else "csv"
        result = c.store.ingest_batch(body, fmt, assignment_id)
        return result.to_dict()

    @app.get("/v1/assignments/{assignment_id}/essays")
    def list_essays(assignment_id: str, principal: Principal = Depends(require("read"))):
        c.store.get_entity("assignment", assignment_id)
        return {"essays": [e.to_dict() for e in c.store.list_essays(assignment_id)]}

    @app.post("/v1/assignments/{assignment_id}/refinements")
    def refine(
        assignment_id: str,
        body: RefinementBody,
        principal: Principal = Depends(require("score")),
    ):
        overlay = c.store.refine_score(
            assignment_id, body.essay_id, body.trait, body.value,
            actor=principal.owner, note=body.note,
        )
        return overlay.to_dict()

    @app.get("/v1/assignments/{assignment_id}/finalized")
    def finalized(assignment_id: str, principal: Principal = Depends(require("read"))):
        scores = c.store.finalized_scores(assignment_id)
        return {
            "assignment_id": assignment_id,
            "essays": {
                essay_id: {
                    trait: {"value": fs.value, "source": fs.source}
                    for trait, fs in sorted(traits.items())
                }
                for essay_id, traits in sorted(scores.items())
            },
        }

    @app.get("/v1/assignments/{assignment_id}/report")
    def report(
        assignment_id: str,
        format: str = Query(default="json"),
        principal: Principal = Depends(require("read")),
    ):
        document = c.store.generate_report(assignment_id)
        if format == "text":
            return PlainTextResponse(document.to_text())
        return Response(content=document.to_json_bytes(), media_type="application/json")

    # ------------------------------------------------------------------
    # Key management (admin)
    # ------------------------------------------------------------------

    @app.post("/v1/keys", status_code=201)
    def issue_key(body: IssueKeyBody, principal: Principal = Depends(require("admin"))):
        key, secret = c.keys.issue_key(body.owner, body.scopes, body.rate_limit)
        return {
            "key_id": key.key_id,
            "secret": secret,  # shown exactly once
            "owner": key.owner,
            "scopes": sorted(key.scopes),
            "rate_limit": key.rate_limit,
        }

    @app.get("/v1/keys")
    def list_keys(principal: Principal = Depends(require("admin"))):
        return {
            "keys": [
                {
                    "key_id": k.key_id,
                    "owner": k.owner,
                    "scopes": sorted(k.scopes),
                    "rate_limit": k.rate_limit,
                    "created_at": k.created_at,
                    "revoked": k.revoked,
                }
                for k in c.keys.list_keys()
            ]
        }

    @app.delete("/v1/keys/{key_id}")
    def revoke_key(key_id: str, principal: Principal = Depends(require("admin"))):
        c.keys.revoke_key(key_id)
        return {"revoked": key_id}

    return app


def create_app_from_config(config_path: str | Path, **kwargs) -> FastAPI:
    return create_app(build_components(config_path, **kwargs))
