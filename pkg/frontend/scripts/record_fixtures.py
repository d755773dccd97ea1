#!/usr/bin/env python3
"""Record real server traffic for the frontend contract tests.

Drives the scoring server through the 5-essay x 3-trait scenario and dumps
every response the UI consumes (config, models, entities, run snapshot, the
full SSE event sequence, finalized maps, refinement, report) into
tests/fixtures/recorded.json. Rerun after server-side wire changes.
"""

import json
import sys
from pathlib import Path

from fastapi.testclient import TestClient

from traitmark import domain
from traitmark.server import build_components, create_app
from traitmark.training import TrainConfig, train_builtin
from traitmark.artifacts import save_artifact
from traitmark.datasets import load_labeled

SECRET = "uibackend0001.recorded-fixture-secret-0123456789abcdefghijklmnop"
OUT = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "recorded.json"

ESSAY_TEXTS = {
    "e1": "التواصل وجها لوجه يبقى الأعمق لأن نبرة الصوت وتعابير الوجه تحمل معاني لا تنقلها الرسائل.",
    "e2": "أرى أن الهاتف قرب البعيد لكنه أبعد القريب، فصار الجالسون معا غرباء في مكان واحد.",
    "e3": "البريد الإلكتروني وسيلة عمل سريعة غير أنها لا تغني عن اللقاء المباشر في المناسبات المهمة.",
    "e4": "أتفق جزئيا، فالتقنية خيار بيد المستخدم، ومن ينظم وقته يجمع بين الوسيلتين دون خسارة.",
    "e5": "لا أتفق، لأن وسائل الاتصال الحديثة زادت اللقاءات تنظيما وسهلت الاتفاق على مواعيد الاجتماع.",
}


def record(tmp_dir: Path) -> dict:
    import numpy as np

    rng = np.random.default_rng(11)
    words = ["كتب", "قرأ", "درس", "فهم", "شرح", "علم", "نظر", "بحث"]
    import csv as _csv

    corpus_path = tmp_dir / "corpus.csv"
    components_traits = list(domain.DEFAULT_SCHEMA.component_traits)
    with open(corpus_path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.DictWriter(fh, fieldnames=["essay_id", "prompt_id", "text"] + components_traits)
        writer.writeheader()
        lengths = np.linspace(8, 60, 30).astype(int)
        for i, length in enumerate(lengths):
            frac = (length - 8) / 52
            row = {
                "essay_id": f"c{i}",
                "prompt_id": f"p{i % 2}",
                "text": " ".join(rng.choice(words, size=int(length))) + ".",
            }
            for trait in components_traits:
                lo, hi = domain.trait_range(trait)
                row[trait] = int(round(lo + frac * (hi - lo)))
            writer.writerow(row)

    artifact = train_builtin(
        load_labeled(corpus_path),
        TrainConfig(kind="builtin_linear", selection_threshold=0.3, seed=11),
        model_id="builtin-linear",
        trained_at="2026-01-01T00:00:00+00:00",
    )
    artifact_path = tmp_dir / "builtin-linear.qym"
    save_artifact(artifact, str(artifact_path))

    all_traits = list(domain.TRAIT_ORDER)
    config = {
        "languages": ["arabic", "english"],
        "grade_levels": ["10", "11", "12"],
        "essay_types": ["persuasive", "explanatory", "argumentative"],
        "models": [
            {
                "id": "builtin-linear",
                "display_name": "Builtin linear scorer",
                "description": "Feature-based ridge regression over handcrafted text features",
                "stars": 3,
                "kind": "builtin_linear",
                "supported_traits": all_traits,
                "load_policy": "eager",
                "enabled": True,
                "artifact_path": "builtin-linear.qym",
                "default_for": all_traits,
            },
            {
                "id": "trates-remote",
                "display_name": "TRATES (remote)",
                "description": "LLM trait-feature pipeline behind the external adapter",
                "stars": 3,
                "kind": "external",
                "endpoint": "http://models.internal/trates",
                "supported_traits": all_traits,
                "load_policy": "on_demand",
                "enabled": False,
            },
        ],
        "auth": {"bootstrap_admin_secret": SECRET},
        "server": {"store_path": ":memory:", "run_workers": 4},
    }
    config_path = tmp_dir / "config.yaml"
    import yaml

    config_path.write_text(yaml.safe_dump(config, allow_unicode=True, sort_keys=False), encoding="utf-8")

    components = build_components(config_path)
    client = TestClient(create_app(components), raise_server_exceptions=False)
    headers = {"Authorization": f"Bearer {SECRET}"}
    recorded: dict = {"traits_under_test": ["DEV", "REL", "STY"]}

    try:
        recorded["config"] = client.get("/v1/config", headers=headers).json()
        recorded["models"] = client.get("/v1/models", headers=headers).json()

        prompt = {
            "id": "p1",
            "title": "التواصل في العصر الرقمي",
            "body": "هل تتفق مع أن الهاتف والبريد الإلكتروني قللا التواصل المباشر بين الناس؟ اكتب مقالا من خمسمئة كلمة لإقناع القارئ برأيك.",
            "language": "arabic",
            "essay_type": "persuasive",
            "grade_level": "10",
        }
        client.post("/v1/prompts", json=prompt, headers=headers).raise_for_status()
        recorded["prompt"] = client.get("/v1/prompts/p1", headers=headers).json()

        rubric_ids = {}
        for trait in recorded["traits_under_test"]:
            lo, hi = domain.trait_range(trait)
            rubric = {
                "id": f"rub-{trait}",
                "trait": trait,
                "levels": [[i, f"وصف المستوى {i} لسمة {trait}"] for i in range(lo, hi + 1)],
                "language": "arabic",
                "title": f"سلم تقدير {trait}",
            }
            client.post("/v1/rubrics", json=rubric, headers=headers).raise_for_status()
            rubric_ids[trait] = rubric["id"]
        recorded["rubrics"] = client.get("/v1/rubrics", headers=headers).json()

        assignment = {
            "id": "a1",
            "title": "واجب الإقناع الأول",
            "language": "arabic",
            "essay_type": "persuasive",
            "grade_level": "10",
            "prompt_id": "p1",
            "trait_config": {t: [rubric_ids[t], "builtin-linear"] for t in recorded["traits_under_test"]},
        }
        client.post("/v1/assignments", json=assignment, headers=headers).raise_for_status()
        recorded["assignment"] = client.get("/v1/assignments/a1", headers=headers).json()

        csv_body = "essay_id,text\n" + "".join(
            f'{eid},"{text}"\n' for eid, text in ESSAY_TEXTS.items()
        )
        ingest = client.post(
            "/v1/assignments/a1/essays?format=csv",
            content=csv_body.encode(),
            headers={**headers, "Content-Type": "text/csv"},
        )
        ingest.raise_for_status()
        recorded["ingest"] = ingest.json()
        recorded["essays"] = client.get("/v1/assignments/a1/essays", headers=headers).json()

        run_id = client.post(
            "/v1/runs",
            json={"assignment_id": "a1", "traits": recorded["traits_under_test"]},
            headers=headers,
        ).json()["run_id"]
        recorded["run_id"] = run_id

        with client.stream("GET", f"/v1/runs/{run_id}/stream", headers=headers) as resp:
            sse_text = "".join(resp.iter_text())
        events = []
        for block in sse_text.split("\n\n"):
            if not block.strip() or block.startswith(":"):
                continue
            event = {}
            for line in block.splitlines():
                if line.startswith("id: "):
                    event["seq"] = int(line[4:])
                elif line.startswith("event: "):
                    event["kind"] = line[7:]
                elif line.startswith("data: "):
                    event["payload"] = json.loads(line[6:])
            events.append(event)
        recorded["events"] = events
        recorded["run_snapshot"] = client.get(f"/v1/runs/{run_id}", headers=headers).json()
        recorded["runs_list"] = client.get("/v1/runs?assignment_id=a1", headers=headers).json()

        recorded["finalized_before"] = client.get(
            "/v1/assignments/a1/finalized", headers=headers
        ).json()

        model_value = recorded["finalized_before"]["essays"]["e3"]["DEV"]["value"]
        refined_value = 5 if model_value != 5 else 4
        refinement = {"essay_id": "e3", "trait": "DEV", "value": refined_value, "note": "مراجعة المعلم"}
        refine_resp = client.post("/v1/assignments/a1/refinements", json=refinement, headers=headers)
        refine_resp.raise_for_status()
        recorded["refinement_request"] = refinement
        recorded["refinement_response"] = refine_resp.json()
        recorded["finalized_after"] = client.get(
            "/v1/assignments/a1/finalized", headers=headers
        ).json()
        recorded["report_after"] = json.loads(
            client.get("/v1/assignments/a1/report", headers=headers).content
        )
        recorded["report_text_after"] = client.get(
            "/v1/assignments/a1/report?format=text", headers=headers
        ).text

        # an out-of-range refinement is rejected server-side: the UI must
        # block it client-side and can rely on this re-validation
        bad = client.post(
            "/v1/assignments/a1/refinements",
            json={"essay_id": "e3", "trait": "REL", "value": 3},
            headers=headers,
        )
        recorded["refinement_rejected"] = {"status": bad.status_code, "body": bad.json()}
    finally:
        components.runs.shutdown()
        components.store.close()
    return recorded


def main():
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        recorded = record(Path(tmp))
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(recorded, ensure_ascii=False, indent=2), encoding="utf-8")
    n_events = len(recorded["events"])
    print(f"recorded {n_events} events, {len(recorded['essays']['essays'])} essays -> {OUT}")


if __name__ == "__main__":
    sys.exit(main())
