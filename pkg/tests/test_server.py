import json

import pytest
import yaml
from fastapi.testclient import TestClient

from traitmark import domain
from traitmark.server import build_components, create_app

from conftest import write_config

ADMIN_SECRET = "adminkey0001.test-secret-value-with-enough-entropy-0123456789abcdef"


@pytest.fixture
def service(tmp_path, trained_artifact_path):
    config_path = write_config(
        tmp_path / "config.yaml",
        trained_artifact_path,
        extras={
            "auth": {"bootstrap_admin_secret": ADMIN_SECRET, "bootstrap_owner": "root"},
            "server": {"store_path": ":memory:", "run_workers": 4},
        },
    )
    components = build_components(config_path)
    app = create_app(components)
    client = TestClient(app, raise_server_exceptions=False)
    yield client, components
    components.runs.shutdown()
    components.store.close()


def auth(secret=ADMIN_SECRET):
    return {"Authorization": f"Bearer {secret}"}


def seed_workspace(client):
    r = client.post(
        "/v1/prompts",
        json={
            "id": "p1",
            "title": "هل تتفق؟",
            "body": "اكتب مقالا من خمسمئة كلمة لإقناع القارئ برأيك.",
            "language": "arabic",
            "essay_type": "persuasive",
            "grade_level": "10",
        },
        headers=auth(),
    )
    assert r.status_code == 201, r.text
    for trait in ("DEV", "REL", "STY"):
        lo, hi = domain.trait_range(trait)
        r = client.post(
            "/v1/rubrics",
            json={
                "id": f"rub-{trait}",
                "trait": trait,
                "levels": [[i, f"وصف {i}"] for i in range(lo, hi + 1)],
                "language": "arabic",
                "title": trait,
            },
            headers=auth(),
        )
        assert r.status_code == 201, r.text
    r = client.post(
        "/v1/assignments",
        json={
            "id": "a1",
            "title": "واجب",
            "language": "arabic",
            "essay_type": "persuasive",
            "grade_level": "10",
            "prompt_id": "p1",
            "trait_config": {t: [f"rub-{t}", "builtin-linear"] for t in ("DEV", "REL", "STY")},
        },
        headers=auth(),
    )
    assert r.status_code == 201, r.text
    csv_body = "essay_id,text\n" + "".join(
        f"e{i},نص المقال رقم {i} بكلمات كافية للتقييم الكامل.\n" for i in range(1, 6)
    )
    r = client.post(
        "/v1/assignments/a1/essays?format=csv",
        content=csv_body.encode(),
        headers={**auth(), "Content-Type": "text/csv"},
    )
    assert r.status_code == 200, r.text
    assert r.json()["accepted"] == 5


def parse_sse(text):
    events = []
    for block in text.split("\n\n"):
        if not block.strip() or block.startswith(":"):
            continue
        event = {}
        for line in block.splitlines():
            if line.startswith("id: "):
                event["id"] = int(line[4:])
            elif line.startswith("event: "):
                event["event"] = line[7:]
            elif line.startswith("data: "):
                event["data"] = json.loads(line[6:])
        if event:
            events.append(event)
    return events


def test_healthz_open(service):
    client, _ = service
    assert client.get("/healthz").json() == {"status": "ok"}


def test_missing_key_unauthorized(service):
    client, _ = service
    r = client.get("/v1/models")
    assert r.status_code == 401
    body = r.json()
    assert body["code"] == "unauthorized"
    assert body["details"]["reason"] == "missing_credentials"


def test_unknown_key_unauthorized(service):
    client, _ = service
    r = client.get("/v1/models", headers=auth("bogus.secret"))
    assert r.status_code == 401
    assert r.json()["details"]["reason"] == "unknown_key"


def test_config_and_models(service):
    client, _ = service
    r = client.get("/v1/config", headers=auth())
    assert r.status_code == 200
    body = r.json()
    assert len(body["traits"]) == 8
    rel = next(t for t in body["traits"] if t["name"] == "REL")
    assert (rel["min"], rel["max"]) == (0, 2)
    hol = next(t for t in body["traits"] if t["name"] == "HOL")
    assert hol["derived"] is True
    models = client.get("/v1/models", headers=auth()).json()["models"]
    assert models[0]["id"] == "builtin-linear"
    assert 0 <= models[0]["stars"] <= 5


def test_scope_enforcement(service):
    client, _ = service
    r = client.post("/v1/keys", json={"owner": "reader", "scopes": ["read"]}, headers=auth())
    assert r.status_code == 201
    reader_secret = r.json()["secret"]
    r = client.post(
        "/v1/runs",
        json={"traits": ["DEV"], "essays": [{"essay_id": "x", "text": "نص"}]},
        headers=auth(reader_secret),
    )
    assert r.status_code == 403
    assert r.json()["code"] == "unauthorized"


def test_rate_limited_request(service):
    client, _ = service
    r = client.post(
        "/v1/keys", json={"owner": "busy", "scopes": ["read"], "rate_limit": 2}, headers=auth()
    )
    secret = r.json()["secret"]
    assert client.get("/v1/models", headers=auth(secret)).status_code == 200
    assert client.get("/v1/models", headers=auth(secret)).status_code == 200
    r = client.get("/v1/models", headers=auth(secret))
    assert r.status_code == 429
    assert r.json()["code"] == "rate_limited"
    assert int(r.headers["Retry-After"]) == r.json()["details"]["retry_after"] == 30


def test_revoked_key_denied(service):
    client, _ = service
    r = client.post("/v1/keys", json={"owner": "gone"}, headers=auth())
    key_id, secret = r.json()["key_id"], r.json()["secret"]
    assert client.get("/v1/models", headers=auth(secret)).status_code == 200
    assert client.delete(f"/v1/keys/{key_id}", headers=auth()).status_code == 200
    r = client.get("/v1/models", headers=auth(secret))
    assert r.status_code == 401
    assert r.json()["details"]["reason"] == "revoked_key"


def test_run_lifecycle_over_http(service):
    client, _ = service
    seed_workspace(client)
    r = client.post(
        "/v1/runs",
        json={"assignment_id": "a1", "traits": ["DEV", "REL", "STY"]},
        headers=auth(),
    )
    assert r.status_code == 201, r.text
    run_id = r.json()["run_id"]

    with client.stream("GET", f"/v1/runs/{run_id}/stream", headers=auth()) as resp:
        assert resp.status_code == 200
        assert resp.headers["content-type"].startswith("text/event-stream")
        text = "".join(chunk for chunk in resp.iter_text())
    events = parse_sse(text)
    assert events[0]["event"] == "run_started"
    assert events[-1]["event"] == "run_completed"
    assert [e["id"] for e in events] == list(range(1, len(events) + 1))
    assert sum(1 for e in events if e["event"] == "trait_scored") == 15
    assert sum(1 for e in events if e["event"] == "essay_completed") == 5

    snapshot = client.get(f"/v1/runs/{run_id}", headers=auth()).json()
    assert snapshot["state"] == "completed"
    assert len(snapshot["results"]) == 15

    # reconnect from a mid-stream cursor: exact tail, no duplicates
    cut = events[6]["id"]
    with client.stream(
        "GET", f"/v1/runs/{run_id}/stream?from_seq={cut}", headers=auth()
    ) as resp:
        tail_text = "".join(chunk for chunk in resp.iter_text())
    tail = parse_sse(tail_text)
    assert [e["id"] for e in tail] == [e["id"] for e in events[7:]]


def test_unknown_run_error_code(service):
    client, _ = service
    r = client.get("/v1/runs/run-does-not-exist", headers=auth())
    assert r.status_code == 404
    assert r.json()["code"] == "unknown_run"


def test_validation_error_code(service):
    client, _ = service
    r = client.post(
        "/v1/runs",
        json={"traits": [], "essays": [{"essay_id": "x", "text": "نص"}]},
        headers=auth(),
    )
    assert r.status_code == 400
    assert r.json()["code"] == "validation_failed"


def test_model_disabled_error_code(tmp_path, trained_artifact_path):
    config_path = write_config(
        tmp_path / "config.yaml",
        trained_artifact_path,
        extra_models=[
            {
                "id": "retired",
                "kind": "external",
                "endpoint": "http://127.0.0.1:9/x",
                "supported_traits": ["DEV"],
                "enabled": False,
            }
        ],
        extras={
            "auth": {"bootstrap_admin_secret": ADMIN_SECRET},
            "server": {"store_path": ":memory:"},
        },
    )
    components = build_components(config_path)
    client = TestClient(create_app(components), raise_server_exceptions=False)
    try:
        r = client.post(
            "/v1/runs",
            json={
                "traits": ["DEV"],
                "essays": [{"essay_id": "x", "text": "نص"}],
                "model_overrides": {"DEV": "retired"},
            },
            headers=auth(),
        )
        assert r.status_code == 409
        assert r.json()["code"] == "model_disabled"
    finally:
        components.runs.shutdown()
        components.store.close()


def test_refinement_and_report_flow(service):
    client, _ = service
    seed_workspace(client)
    run_id = client.post(
        "/v1/runs", json={"assignment_id": "a1", "traits": ["DEV"]}, headers=auth()
    ).json()["run_id"]
    with client.stream("GET", f"/v1/runs/{run_id}/stream", headers=auth()) as resp:
        for _ in resp.iter_text():
            pass
    r = client.post(
        "/v1/assignments/a1/refinements",
        json={"essay_id": "e1", "trait": "DEV", "value": 5, "note": "مراجعة يدوية"},
        headers=auth(),
    )
    assert r.status_code == 200, r.text
    finalized = client.get("/v1/assignments/a1/finalized", headers=auth()).json()
    assert finalized["essays"]["e1"]["DEV"] == {"value": 5, "source": "refined"}
    report = client.get("/v1/assignments/a1/report", headers=auth())
    assert report.status_code == 200
    body = json.loads(report.content)
    e1 = next(e for e in body["essays"] if e["essay_id"] == "e1")
    assert e1["scores"]["DEV"] == {"value": 5, "source": "refined"}
    text_report = client.get("/v1/assignments/a1/report?format=text", headers=auth())
    assert "manually refined" in text_report.text


def test_refinement_out_of_range_revalidated(service):
    client, _ = service
    seed_workspace(client)
    run_id = client.post(
        "/v1/runs", json={"assignment_id": "a1", "traits": ["REL"]}, headers=auth()
    ).json()["run_id"]
    with client.stream("GET", f"/v1/runs/{run_id}/stream", headers=auth()) as resp:
        for _ in resp.iter_text():
            pass
    r = client.post(
        "/v1/assignments/a1/refinements",
        json={"essay_id": "e1", "trait": "REL", "value": 3},
        headers=auth(),
    )
    assert r.status_code == 400
    assert r.json()["code"] == "refinement_failed"


def test_entity_crud_and_version_conflict(service):
    client, _ = service
    seed_workspace(client)
    r = client.put(
        "/v1/prompts/p1?expected_version=1",
        json={
            "title": "عنوان جديد",
            "body": "نص جديد للموضوع.",
            "language": "arabic",
            "essay_type": "explanatory",
            "grade_level": "11",
        },
        headers=auth(),
    )
    assert r.status_code == 200
    assert r.json()["version"] == 2
    r = client.put(
        "/v1/prompts/p1?expected_version=1",
        json={
            "title": "قديم",
            "body": "نص.",
            "language": "arabic",
            "essay_type": "explanatory",
            "grade_level": "11",
        },
        headers=auth(),
    )
    assert r.status_code == 409
    assert r.json()["code"] == "version_conflict"


def test_delete_referenced_prompt_integrity(service):
    client, _ = service
    seed_workspace(client)
    r = client.delete("/v1/prompts/p1", headers=auth())
    assert r.status_code == 409
    assert r.json()["code"] == "integrity_violation"


def test_run_list_and_delete(service):
    client, _ = service
    seed_workspace(client)
    run_id = client.post(
        "/v1/runs", json={"assignment_id": "a1", "traits": ["DEV"]}, headers=auth()
    ).json()["run_id"]
    with client.stream("GET", f"/v1/runs/{run_id}/stream", headers=auth()) as resp:
        for _ in resp.iter_text():
            pass
    runs = client.get("/v1/runs?assignment_id=a1", headers=auth()).json()["runs"]
    assert [r["run_id"] for r in runs] == [run_id]
    assert client.delete(f"/v1/runs/{run_id}", headers=auth()).status_code == 200
    assert client.get(f"/v1/runs/{run_id}", headers=auth()).status_code == 404
    assert client.get("/v1/runs?assignment_id=a1", headers=auth()).json()["runs"] == []


def test_keys_listing_never_exposes_secrets(service):
    client, _ = service
    created = client.post("/v1/keys", json={"owner": "x"}, headers=auth()).json()
    listing = client.get("/v1/keys", headers=auth()).json()["keys"]
    dumped = json.dumps(listing)
    assert created["secret"] not in dumped
    assert "secret_hash" not in dumped
