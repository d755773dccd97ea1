import threading

import numpy as np
import pytest
import yaml

from traitmark import domain
from traitmark.artifacts import save_artifact
from traitmark.features import builtin_registry, extract
from traitmark.registry import (
    ConfigError,
    ExternalScorerError,
    ModelDisabledError,
    Registry,
    ScoreContext,
    UnknownModelError,
    external_score,
    load_config,
    score,
)
from traitmark.training import TrainConfig, train_builtin

from conftest import ALL_TRAITS, make_corpus, stub_url, write_config


def test_load_config_five_models(tmp_path, trained_artifact_path):
    extra = [
        {
            "id": name,
            "kind": "external",
            "endpoint": f"http://models.internal/{name}",
            "supported_traits": ALL_TRAITS,
            "stars": stars,
            "load_policy": "on_demand",
        }
        for name, stars in (("rf-ext", 3), ("xgb-ext", 3), ("moose-ext", 3), ("trates-ext", 3))
    ]
    path = write_config(tmp_path / "c.yaml", trained_artifact_path, extra_models=extra)
    config = load_config(path)
    assert len(config.models) == 5
    assert {m.id for m in config.models} == {
        "builtin-linear",
        "rf-ext",
        "xgb-ext",
        "moose-ext",
        "trates-ext",
    }


def test_load_config_missing_default_for_trait(tmp_path, trained_artifact_path):
    path = write_config(tmp_path / "c.yaml", trained_artifact_path)
    data = yaml.safe_load(path.read_text())
    data["models"][0]["default_for"] = [t for t in ALL_TRAITS if t != "GRM"]
    path.write_text(yaml.safe_dump(data))
    with pytest.raises(ConfigError, match="no default model for GRM"):
        load_config(path)


def test_load_config_two_defaults_rejected(tmp_path, trained_artifact_path):
    extra = [
        {
            "id": "second",
            "kind": "external",
            "endpoint": "http://x/y",
            "supported_traits": ALL_TRAITS,
            "default_for": ["ORG"],
        }
    ]
    path = write_config(tmp_path / "c.yaml", trained_artifact_path, extra_models=extra)
    with pytest.raises(ConfigError, match="two defaults for ORG"):
        load_config(path)


def test_load_config_duplicate_id(tmp_path, trained_artifact_path):
    path = write_config(tmp_path / "c.yaml", trained_artifact_path)
    data = yaml.safe_load(path.read_text())
    data["models"].append(dict(data["models"][0]))
    data["models"][1]["default_for"] = []
    path.write_text(yaml.safe_dump(data))
    with pytest.raises(ConfigError, match="duplicate model id"):
        load_config(path)


def test_load_config_dangling_artifact(tmp_path, trained_artifact_path):
    path = write_config(tmp_path / "c.yaml", tmp_path / "missing.qym")
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(path)


def test_load_config_idempotent(config_path):
    c1 = load_config(config_path)
    c2 = load_config(config_path)
    assert [m.to_dict() for m in c1.models] == [m.to_dict() for m in c2.models]
    assert c1.schema.trait_names == c2.schema.trait_names


def test_registry_eager_handle_immediate(config_path):
    registry = Registry(load_config(config_path))
    handle = registry.get_model("builtin-linear")
    assert handle.model_id == "builtin-linear"
    assert registry.load_count("builtin-linear") == 1


def test_registry_unknown_and_disabled(tmp_path, trained_artifact_path):
    extra = [
        {
            "id": "retired",
            "kind": "external",
            "endpoint": "http://x/y",
            "supported_traits": ["ORG"],
            "enabled": False,
        }
    ]
    path = write_config(tmp_path / "c.yaml", trained_artifact_path, extra_models=extra)
    registry = Registry(load_config(path))
    with pytest.raises(UnknownModelError):
        registry.get_model("nope")
    with pytest.raises(ModelDisabledError):
        registry.get_model("retired")


def test_on_demand_single_flight(tmp_path, trained_artifact_path):
    path = write_config(tmp_path / "c.yaml", trained_artifact_path)
    data = yaml.safe_load(path.read_text())
    data["models"][0]["load_policy"] = "on_demand"
    path.write_text(yaml.safe_dump(data))
    registry = Registry(load_config(path))
    assert registry.load_count("builtin-linear") == 0

    handles = []
    barrier = threading.Barrier(8)

    def worker():
        barrier.wait()
        handles.append(registry.get_model("builtin-linear"))

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert registry.load_count("builtin-linear") == 1
    assert all(h is handles[0] for h in handles)


def test_registry_reload_swaps_catalog(tmp_path, trained_artifact_path):
    path = write_config(tmp_path / "c.yaml", trained_artifact_path)
    registry = Registry(load_config(path))
    data = yaml.safe_load(path.read_text())
    data["models"].append(
        {
            "id": "late-arrival",
            "kind": "external",
            "endpoint": "http://x/y",
            "supported_traits": ["ORG"],
        }
    )
    path.write_text(yaml.safe_dump(data))
    registry.reload(path)
    assert {m.id for m in registry.descriptors()} == {"builtin-linear", "late-arrival"}


# ---------------------------------------------------------------------------
# score()
# ---------------------------------------------------------------------------


def zero_model_config(tmp_path, weights_value=0.0, bias=0.0, traits=("ORG", "VOC")):
    corpus = make_corpus(12, seed=3, traits=list(traits))
    cfg = TrainConfig(kind="builtin_linear", selection_threshold=0.2)
    artifact = train_builtin(corpus, cfg, model_id="m-fixed", trained_at="t0")
    artifact.weights[:] = weights_value
    artifact.biases[:] = bias
    path = tmp_path / "m-fixed.qym"
    save_artifact(artifact, str(path))
    config_path = tmp_path / "fixed.yaml"
    config = {
        "models": [
            {
                "id": "m-fixed",
                "kind": "builtin_linear",
                "supported_traits": list(traits),
                "artifact_path": str(path),
                "default_for": list(traits),
            }
        ],
        "traits": [
            {"name": t, "min": domain.trait_range(t)[0], "max": domain.trait_range(t)[1]}
            for t in traits
        ],
    }
    config_path.write_text(yaml.safe_dump(config))
    return config_path


def test_score_zero_model_gives_zero(tmp_path):
    config_path = zero_model_config(tmp_path)
    config = load_config(config_path)
    registry = Registry(config)
    handle = registry.get_model("m-fixed")
    essay = domain.Essay(id="e1", text="أي نص هنا يعطي صفرا.")
    result = score(handle, essay, "ORG", schema=config.schema)
    assert result.value == 0
    assert result.raw_value == 0.0
    assert result.elapsed_ms >= 0


def test_score_bias_only_rounds_then_clamps(tmp_path):
    config_path = zero_model_config(tmp_path, weights_value=0.0, bias=4.7)
    config = load_config(config_path)
    registry = Registry(config)
    handle = registry.get_model("m-fixed")
    essay = domain.Essay(id="e1", text="نص قصير.")
    result = score(handle, essay, "VOC", schema=config.schema)
    assert result.raw_value == pytest.approx(4.7)
    assert result.value == 5


def test_score_unsupported_trait_rejected(tmp_path):
    config_path = zero_model_config(tmp_path)
    config = load_config(config_path)
    registry = Registry(config)
    handle = registry.get_model("m-fixed")
    with pytest.raises(domain.ValidationError, match="does not support"):
        score(handle, domain.Essay(id="e", text="نص"), "GRM", schema=config.schema)


def test_score_pipeline_matches_dot_product_oracle():
    """score() raw output equals the independent masked-standardized dot product."""
    rng = np.random.default_rng(2024)
    reg = builtin_registry()
    corpus = make_corpus(16, seed=5)
    cfg = TrainConfig(kind="builtin_linear", selection_threshold=0.2)
    artifact = train_builtin(corpus, cfg, model_id="m", trained_at="t0")

    for trial in range(100):
        artifact.weights[:] = rng.normal(size=artifact.weights.shape)
        artifact.biases[:] = rng.normal(size=artifact.biases.shape)
        length = int(rng.integers(5, 80))
        text = " ".join(rng.choice(["كلمة", "نص", "فكرة", "جملة", "رأي"], size=length)) + "."

        # independent oracle: plain python mask -> standardize -> dot
        full = extract(text, reg).values
        masked = [v for v, keep in zip(full, artifact.mask.retained) if keep]
        standardized = []
        for v, m, s in zip(masked, artifact.scaler.mean, artifact.scaler.std):
            standardized.append(0.0 if s == 0.0 else (v - m) / s)
        trait_i = int(rng.integers(0, len(artifact.trait_order)))
        trait = artifact.trait_order[trait_i]
        expected = sum(w * x for w, x in zip(artifact.weights[trait_i], standardized))
        expected += artifact.biases[trait_i]

        from traitmark.training import predict_raw

        got = predict_raw(artifact, full)[trait_i]
        assert abs(got - expected) < 1e-8, f"trial {trial} trait {trait}"


def test_score_registry_version_mismatch(tmp_path):
    corpus = make_corpus(12, seed=3, traits=["ORG"])
    cfg = TrainConfig(kind="builtin_linear", selection_threshold=0.2)
    artifact = train_builtin(corpus, cfg, model_id="m", trained_at="t0")
    path = tmp_path / "m.qym"
    save_artifact(artifact, str(path))
    config_path = tmp_path / "c.yaml"
    config = {
        "models": [
            {
                "id": "m",
                "kind": "builtin_linear",
                "supported_traits": ["ORG"],
                "artifact_path": str(path),
                "default_for": ["ORG"],
            }
        ],
        "traits": [{"name": "ORG", "min": 0, "max": 5}],
    }
    config_path.write_text(yaml.safe_dump(config))
    live = builtin_registry().extended([], version="builtin-v2")
    registry = Registry(load_config(config_path), features=live)
    handle = registry.get_model("m")
    with pytest.raises(domain.ScoringError, match="builtin-v2"):
        score(handle, domain.Essay(id="e", text="نص"), "ORG")


# ---------------------------------------------------------------------------
# external adapter
# ---------------------------------------------------------------------------


def test_external_stub_echo(stub_scorer_server):
    url = stub_url(stub_scorer_server, "/echo3")
    result = external_score(
        url,
        {
            "essay_id": "e1",
            "text": "نص",
            "trait": "STY",
            "range": {"min": 0, "max": 5},
            "rubric": "",
            "prompt": "",
            "language": "arabic",
        },
    )
    assert result["raw_value"] == 3.0
    assert result["model_version"] == "stub-1"
    # the request carried the full wire schema
    path, body = stub_scorer_server.requests[-1]
    assert body["trait"] == "STY"
    assert body["range"] == {"min": 0, "max": 5}


def test_external_nan_is_out_of_contract(stub_scorer_server):
    url = stub_url(stub_scorer_server, "/nan")
    with pytest.raises(ExternalScorerError) as exc_info:
        external_score(url, {"essay_id": "e", "text": "x", "trait": "STY"})
    assert exc_info.value.kind == "out_of_contract"


def test_external_timeout(stub_scorer_server):
    stub_scorer_server.slow_delay = 2.0
    url = stub_url(stub_scorer_server, "/slow")
    with pytest.raises(ExternalScorerError) as exc_info:
        external_score(url, {"essay_id": "e", "text": "x", "trait": "STY"}, timeout_s=0.3)
    assert exc_info.value.kind == "timeout"
    assert url in str(exc_info.value) or exc_info.value.endpoint == url


def test_external_transport_failure_retried_once(stub_scorer_server):
    url = stub_url(stub_scorer_server, "/flaky")
    result = external_score(url, {"essay_id": "e", "text": "x", "trait": "STY"})
    assert result["raw_value"] == 4.0
    assert stub_scorer_server.flaky_hits == 2


def test_external_application_error_not_retried(stub_scorer_server):
    url = stub_url(stub_scorer_server, "/apperror")
    with pytest.raises(ExternalScorerError):
        external_score(url, {"essay_id": "e", "text": "x", "trait": "STY"})
    assert stub_scorer_server.app_error_hits == 1


def test_external_malformed_response(stub_scorer_server):
    url = stub_url(stub_scorer_server, "/malformed")
    with pytest.raises(ExternalScorerError) as exc_info:
        external_score(url, {"essay_id": "e", "text": "x", "trait": "STY"})
    assert exc_info.value.kind == "malformed"
