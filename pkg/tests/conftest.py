import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
import yaml

from traitmark import domain
from traitmark.artifacts import save_artifact
from traitmark.training import LabeledEssay, TrainConfig, train_builtin

WORDS = ["كتب", "قرأ", "درس", "فهم", "شرح", "علم", "نظر", "بحث", "سأل", "وجد"]
ALL_TRAITS = list(domain.TRAIT_ORDER)
COMPONENTS = list(domain.DEFAULT_SCHEMA.component_traits)


def make_corpus(n, seed=0, prompt_ids=("p1",), traits=COMPONENTS):
    """Synthetic corpus whose labels are a deterministic function of word count."""
    rng = np.random.default_rng(seed)
    essays = []
    lengths = np.linspace(8, 60, n).astype(int)
    for i, length in enumerate(lengths):
        text = " ".join(rng.choice(WORDS, size=length)) + "."
        frac = (length - 8) / (60 - 8)
        labels = {}
        for trait in traits:
            lo, hi = domain.trait_range(trait)
            labels[trait] = int(round(lo + frac * (hi - lo)))
        essays.append(
            LabeledEssay(
                essay_id=f"e{i}",
                text=text,
                prompt_id=prompt_ids[i % len(prompt_ids)],
                labels=labels,
            )
        )
    return essays


@pytest.fixture(scope="session")
def trained_artifact_path(tmp_path_factory):
    """A small linear artifact covering all eight traits."""
    corpus = make_corpus(24, seed=42)
    cfg = TrainConfig(kind="builtin_linear", selection_threshold=0.2, ridge_lambda=1.0, seed=1)
    artifact = train_builtin(corpus, cfg, model_id="builtin-linear", trained_at="2026-01-01T00:00:00+00:00")
    path = tmp_path_factory.mktemp("artifacts") / "builtin-linear.qym"
    save_artifact(artifact, str(path))
    return path


def write_config(path, artifact_path, extra_models=(), extras=None):
    config = {
        "languages": ["arabic", "english"],
        "grade_levels": ["10", "11", "12"],
        "essay_types": ["persuasive", "explanatory", "argumentative"],
        "models": [
            {
                "id": "builtin-linear",
                "display_name": "Builtin linear scorer",
                "description": "Feature-based ridge regression, all traits",
                "stars": 3,
                "kind": "builtin_linear",
                "supported_traits": ALL_TRAITS,
                "load_policy": "eager",
                "enabled": True,
                "artifact_path": str(artifact_path),
                "default_for": ALL_TRAITS,
            },
            *extra_models,
        ],
    }
    if extras:
        config.update(extras)
    path.write_text(yaml.safe_dump(config, allow_unicode=True), encoding="utf-8")
    return path


@pytest.fixture
def config_path(tmp_path, trained_artifact_path):
    return write_config(tmp_path / "config.yaml", trained_artifact_path)


class _StubHandler(BaseHTTPRequestHandler):
    server_version = "stub"

    def log_message(self, *args):
        pass

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length) or b"{}")
        self.server.requests.append((self.path, body))
        if self.path == "/echo3":
            self._reply({"raw_value": 3.0, "model_version": "stub-1"})
        elif self.path == "/nan":
            self._reply({"raw_value": float("nan"), "model_version": "stub-1"})
        elif self.path == "/slow":
            time.sleep(self.server.slow_delay)
            self._reply({"raw_value": 2.0, "model_version": "stub-1"})
        elif self.path == "/flaky":
            self.server.flaky_hits += 1
            if self.server.flaky_hits == 1:
                # drop the connection: transport failure, retried once
                self.connection.close()
                return
            self._reply({"raw_value": 4.0, "model_version": "stub-1"})
        elif self.path == "/malformed":
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.end_headers()
            self.wfile.write(b"not json at all")
        elif self.path == "/apperror":
            self.server.app_error_hits += 1
            self.send_response(500)
            self.end_headers()
        else:
            self.send_response(404)
            self.end_headers()

    def _reply(self, payload):
        data = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


@pytest.fixture
def stub_scorer_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
    server.requests = []
    server.flaky_hits = 0
    server.app_error_hits = 0
    server.slow_delay = 1.0
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server
    server.shutdown()
    server.server_close()


def stub_url(server, path):
    host, port = server.server_address
    return f"http://{host}:{port}{path}"
