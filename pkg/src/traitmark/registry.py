"""Configuration-driven catalog of scoring models.

The registry reads a YAML/JSON config naming every model, loads eager
builtin artifacts at startup, defers on_demand ones behind a single-flight
latch, and exposes uniform scorer handles. External models sit behind a
small HTTP adapter speaking a fixed JSON wire schema.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import httpx
import yaml

from . import domain
from .artifacts import KIND_LINEAR, KIND_MLP, ModelArtifact, load_artifact
from .features import FeatureRegistry, builtin_registry, extract
from .training import predict_raw

KIND_EXTERNAL = "external"
VALID_KINDS = (KIND_LINEAR, KIND_MLP, KIND_EXTERNAL)
LOAD_POLICIES = ("eager", "on_demand")

DEFAULT_EXTERNAL_TIMEOUT_S = 120.0


class ConfigError(ValueError):
    """Config file unreadable or violating a registry invariant."""


class UnknownModelError(KeyError):
    def __init__(self, model_id: str):
        super().__init__(model_id)
        self.model_id = model_id

    def __str__(self) -> str:
        return f"unknown model {self.model_id!r}"


class ModelDisabledError(RuntimeError):
    """Distinct from unknown so callers can explain retained historical models."""

    def __init__(self, model_id: str):
        super().__init__(f"model {model_id!r} is disabled")
        self.model_id = model_id


class ExternalScorerError(RuntimeError):
    """External endpoint failure: transport, timeout, or out-of-contract response."""

    def __init__(self, message: str, *, endpoint: str = "", kind: str = "transport"):
        super().__init__(message)
        self.endpoint = endpoint
        self.kind = kind  # transport | timeout | malformed | out_of_contract


@dataclass(frozen=True)
class ModelDescriptor:
    id: str
    display_name: str = ""
    description: str = ""
    stars: int = 0
    kind: str = KIND_LINEAR
    supported_traits: frozenset[str] = frozenset()
    language: str = "arabic"
    load_policy: str = "eager"
    enabled: bool = True
    endpoint: str | None = None
    artifact_path: str | None = None
    default_for: frozenset[str] = frozenset()
    hyperparameters: dict[str, Any] = field(default_factory=dict, hash=False)
    timeout_s: float = DEFAULT_EXTERNAL_TIMEOUT_S

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "display_name": self.display_name,
            "description": self.description,
            "stars": self.stars,
            "kind": self.kind,
            "supported_traits": sorted(self.supported_traits),
            "language": self.language,
            "load_policy": self.load_policy,
            "enabled": self.enabled,
            "endpoint": self.endpoint,
            "default_for": sorted(self.default_for),
            "hyperparameters": self.hyperparameters,
        }


@dataclass
class RegistryConfig:
    languages: tuple[str, ...]
    grade_levels: tuple[str, ...]
    essay_types: tuple[str, ...]
    schema: domain.TraitSchema
    models: tuple[ModelDescriptor, ...]
    base_dir: Path
    extras: dict[str, Any] = field(default_factory=dict)

    def descriptor(self, model_id: str) -> ModelDescriptor:
        for m in self.models:
            if m.id == model_id:
                return m
        raise UnknownModelError(model_id)

    def default_model(self, trait: str) -> ModelDescriptor:
        for m in self.models:
            if m.enabled and trait in m.default_for:
                return m
        raise ConfigError(f"no default model for {trait}")


def _descriptor_from_entry(entry: Mapping[str, Any], where: str) -> ModelDescriptor:
    try:
        model_id = str(entry["id"])
    except KeyError:
        raise ConfigError(f"{where}: model entry missing 'id'") from None
    kind = str(entry.get("kind", KIND_LINEAR))
    if kind not in VALID_KINDS:
        raise ConfigError(f"{where}: unknown kind {kind!r}")
    load_policy = str(entry.get("load_policy", "eager"))
    if load_policy not in LOAD_POLICIES:
        raise ConfigError(f"{where}: unknown load_policy {load_policy!r}")
    stars = int(entry.get("stars", 0))
    if not 0 <= stars <= 5:
        raise ConfigError(f"{where}: stars must be in [0,5], got {stars}")
    endpoint = entry.get("endpoint")
    if kind == KIND_EXTERNAL and not endpoint:
        raise ConfigError(f"{where}: external model requires an endpoint")
    if kind != KIND_EXTERNAL and endpoint:
        raise ConfigError(f"{where}: endpoint only valid for external models")
    return ModelDescriptor(
        id=model_id,
        display_name=str(entry.get("display_name", model_id)),
        description=str(entry.get("description", "")),
        stars=stars,
        kind=kind,
        supported_traits=frozenset(str(t) for t in entry.get("supported_traits", [])),
        language=str(entry.get("language", "arabic")),
        load_policy=load_policy,
        enabled=bool(entry.get("enabled", True)),
        endpoint=str(endpoint) if endpoint else None,
        artifact_path=str(entry["artifact_path"]) if entry.get("artifact_path") else None,
        default_for=frozenset(str(t) for t in entry.get("default_for", [])),
        hyperparameters=dict(entry.get("hyperparameters", {})),
        timeout_s=float(entry.get("timeout_s", DEFAULT_EXTERNAL_TIMEOUT_S)),
    )


def load_config(path: str | Path) -> RegistryConfig:
    """Parse and validate a registry config file (YAML; JSON parses too)."""
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from exc
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")

    if "traits" in data and data["traits"]:
        try:
            schema = domain.TraitSchema.from_config(data["traits"])
        except (domain.SchemaError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: traits: {exc}") from exc
    else:
        schema = domain.DEFAULT_SCHEMA

    models: list[ModelDescriptor] = []
    seen: set[str] = set()
    for i, entry in enumerate(data.get("models", []) or []):
        where = f"{path}: models[{i}]"
        desc = _descriptor_from_entry(entry, where)
        if desc.id in seen:
            raise ConfigError(f"{where}: duplicate model id {desc.id!r}")
        seen.add(desc.id)
        for trait in desc.supported_traits | desc.default_for:
            if trait not in schema:
                raise ConfigError(f"{where}: unknown trait {trait!r}")
        if not desc.default_for <= desc.supported_traits:
            raise ConfigError(f"{where}: default_for must be a subset of supported_traits")
        if desc.kind in (KIND_LINEAR, KIND_MLP) and desc.enabled:
            if not desc.artifact_path:
                raise ConfigError(f"{where}: enabled builtin model requires artifact_path")
            artifact_file = (path.parent / desc.artifact_path).resolve()
            if not artifact_file.is_file():
                raise ConfigError(f"{where}: artifact_path {artifact_file} does not exist")
        models.append(desc)

    # exactly one enabled default per schema trait
    for trait in schema.trait_names:
        defaults = [m.id for m in models if m.enabled and trait in m.default_for]
        if len(defaults) == 0:
            raise ConfigError(f"{path}: no default model for {trait}")
        if len(defaults) > 1:
            raise ConfigError(f"{path}: two defaults for {trait}: {defaults}")

    known = {"languages", "grade_levels", "essay_types", "traits", "models"}
    extras = {k: v for k, v in data.items() if k not in known}

    return RegistryConfig(
        languages=tuple(str(x) for x in data.get("languages", list(domain.LANGUAGES))),
        grade_levels=tuple(str(x) for x in data.get("grade_levels", [])),
        essay_types=tuple(str(x) for x in data.get("essay_types", list(domain.ESSAY_TYPES))),
        schema=schema,
        models=tuple(models),
        base_dir=path.parent,
        extras=extras,
    )


@dataclass(frozen=True)
class ScoreContext:
    """Assignment metadata carried into a single score call."""

    run_id: str = ""
    assignment_id: str = ""
    language: str = "arabic"
    prompt_text: str = ""
    rubric_text: str = ""


class BuiltinScorer:
    """Handle over a loaded artifact; immutable after construction."""

    def __init__(self, descriptor: ModelDescriptor, artifact: ModelArtifact, features: FeatureRegistry):
        self.descriptor = descriptor
        self.artifact = artifact
        self.features = features

    @property
    def model_id(self) -> str:
        return self.descriptor.id

    @property
    def supported_traits(self) -> frozenset[str]:
        return self.descriptor.supported_traits

    def raw_score(self, text: str, trait: str, context: ScoreContext) -> float:
        if self.artifact.registry_version != self.features.version:
            raise domain.ScoringError(
                f"model {self.model_id}: artifact built against feature registry "
                f"{self.artifact.registry_version!r} but live registry is "
                f"{self.features.version!r}"
            )
        vec = extract(text, self.features)
        outputs = predict_raw(self.artifact, vec.values)
        return float(outputs[self.artifact.trait_index(trait)])


def external_score(
    endpoint: str,
    request: Mapping[str, Any],
    *,
    timeout_s: float = DEFAULT_EXTERNAL_TIMEOUT_S,
    client: httpx.Client | None = None,
) -> dict[str, Any]:
    """POST one scoring request to an external model endpoint.

    One retry on transport failure, none on application errors. The response
    must carry a finite numeric ``raw_value``.
    """
    owned = client is None
    client = client or httpx.Client(timeout=timeout_s)
    try:
        last_exc: Exception | None = None
        for attempt in range(2):
            try:
                resp = client.post(endpoint, json=dict(request), timeout=timeout_s)
                break
            except httpx.TimeoutException as exc:
                raise ExternalScorerError(
                    f"timeout after {timeout_s}s calling {endpoint}", endpoint=endpoint, kind="timeout"
                ) from exc
            except httpx.TransportError as exc:
                last_exc = exc
        else:
            raise ExternalScorerError(
                f"transport failure calling {endpoint}: {last_exc}", endpoint=endpoint, kind="transport"
            ) from last_exc

        if resp.status_code != 200:
            raise ExternalScorerError(
                f"endpoint {endpoint} returned HTTP {resp.status_code}",
                endpoint=endpoint,
                kind="malformed",
            )
        try:
            body = resp.json()
        except ValueError as exc:
            raise ExternalScorerError(
                f"endpoint {endpoint} returned non-JSON body", endpoint=endpoint, kind="malformed"
            ) from exc
        if not isinstance(body, Mapping) or "raw_value" not in body:
            raise ExternalScorerError(
                f"endpoint {endpoint} response missing raw_value", endpoint=endpoint, kind="malformed"
            )
        try:
            raw_value = float(body["raw_value"])
        except (TypeError, ValueError) as exc:
            raise ExternalScorerError(
                f"endpoint {endpoint} raw_value not numeric: {body['raw_value']!r}",
                endpoint=endpoint,
                kind="malformed",
            ) from exc
        if not math.isfinite(raw_value):
            raise ExternalScorerError(
                f"endpoint {endpoint} returned non-finite raw_value {raw_value!r}",
                endpoint=endpoint,
                kind="out_of_contract",
            )
        return {
            "raw_value": raw_value,
            "model_version": str(body.get("model_version", "")),
            "diagnostics": str(body.get("diagnostics", "")),
        }
    finally:
        if owned:
            client.close()


class ExternalScorer:
    """Adapter handle mirroring the server's own scoring contract."""

    def __init__(
        self,
        descriptor: ModelDescriptor,
        schema: domain.TraitSchema,
        client: httpx.Client | None = None,
    ):
        self.descriptor = descriptor
        self.schema = schema
        self._client = client

    @property
    def model_id(self) -> str:
        return self.descriptor.id

    @property
    def supported_traits(self) -> frozenset[str]:
        return self.descriptor.supported_traits

    def raw_score(self, text: str, trait: str, context: ScoreContext, essay_id: str = "") -> float:
        lo, hi = self.schema.spec(trait).range
        request = {
            "essay_id": essay_id,
            "text": text,
            "trait": trait,
            "range": {"min": lo, "max": hi},
            "rubric": context.rubric_text,
            "prompt": context.prompt_text,
            "language": context.language or self.descriptor.language,
        }
        result = external_score(
            self.descriptor.endpoint,
            request,
            timeout_s=self.descriptor.timeout_s,
            client=self._client,
        )
        return result["raw_value"]


ScorerHandle = BuiltinScorer | ExternalScorer


def score(
    handle: ScorerHandle,
    essay: domain.Essay,
    trait: str,
    context: ScoreContext = ScoreContext(),
    *,
    schema: domain.TraitSchema = domain.DEFAULT_SCHEMA,
    clock=time.perf_counter,
) -> domain.TraitScore:
    """Run one (essay, trait) through a handle: raw output, then clamp/round.

    ``raw_value`` is recorded untouched; ``value`` is the post-processed
    integer on the trait's rubric range.
    """
    if trait not in handle.supported_traits:
        raise domain.ValidationError(
            f"model {handle.model_id} does not support trait {trait}"
        )
    t0 = clock()
    if isinstance(handle, ExternalScorer):
        raw = handle.raw_score(essay.text, trait, context, essay_id=essay.id)
    else:
        raw = handle.raw_score(essay.text, trait, context)
    elapsed_ms = max(0, int(round((clock() - t0) * 1000.0)))
    value = domain.clamp_round_score(raw, trait, schema)
    return domain.TraitScore(
        essay_id=essay.id,
        trait=trait,
        raw_value=raw,
        value=value,
        model_id=handle.model_id,
        run_id=context.run_id,
        elapsed_ms=elapsed_ms,
    )


class Registry:
    """Live model catalog: many concurrent readers, atomic reload swaps.

    On-demand loading is single-flight: concurrent first callers share one
    load and receive the same handle.
    """

    def __init__(
        self,
        config: RegistryConfig,
        *,
        features: FeatureRegistry | None = None,
        http_client: httpx.Client | None = None,
    ):
        self.features = features or builtin_registry()
        self._http_client = http_client
        self._swap_lock = threading.Lock()
        self._catalog_lock = threading.Lock()
        self._config = config
        self._handles: dict[str, ScorerHandle] = {}
        self._loading: dict[str, threading.Event] = {}
        self._load_counts: dict[str, int] = {}
        self._install(config)

    @property
    def config(self) -> RegistryConfig:
        return self._config

    @property
    def schema(self) -> domain.TraitSchema:
        return self._config.schema

    def _install(self, config: RegistryConfig) -> None:
        handles: dict[str, ScorerHandle] = {}
        for desc in config.models:
            if desc.enabled and desc.load_policy == "eager":
                handles[desc.id] = self._build_handle(desc, config)
        with self._catalog_lock:
            self._config = config
            self._handles = handles
            self._loading = {}

    def _build_handle(self, desc: ModelDescriptor, config: RegistryConfig) -> ScorerHandle:
        self._load_counts[desc.id] = self._load_counts.get(desc.id, 0) + 1
        if desc.kind == KIND_EXTERNAL:
            return ExternalScorer(desc, config.schema, client=self._http_client)
        artifact = load_artifact(str((config.base_dir / desc.artifact_path).resolve()))
        return BuiltinScorer(desc, artifact, self.features)

    def reload(self, path: str | Path) -> None:
        """Parse, validate, and atomically swap in a new catalog."""
        with self._swap_lock:
            config = load_config(path)
            self._install(config)

    def descriptors(self) -> tuple[ModelDescriptor, ...]:
        return self._config.models

    def default_model_id(self, trait: str) -> str:
        return self._config.default_model(trait).id

    def get_model(self, model_id: str) -> ScorerHandle:
        with self._catalog_lock:
            desc = self._config.descriptor(model_id)  # raises UnknownModelError
            if not desc.enabled:
                raise ModelDisabledError(model_id)
            handle = self._handles.get(model_id)
            if handle is not None:
                return handle
            latch = self._loading.get(model_id)
            if latch is None:
                latch = threading.Event()
                self._loading[model_id] = latch
                leader = True
            else:
                leader = False
            config = self._config
        if leader:
            try:
                handle = self._build_handle(desc, config)
                with self._catalog_lock:
                    self._handles[model_id] = handle
            finally:
                latch.set()
                with self._catalog_lock:
                    self._loading.pop(model_id, None)
            return handle
        latch.wait()
        with self._catalog_lock:
            handle = self._handles.get(model_id)
        if handle is None:
            raise domain.ScoringError(f"load of model {model_id!r} failed in another caller")
        return handle

    def load_count(self, model_id: str) -> int:
        """How many times a handle was constructed (single-flight instrumentation)."""
        return self._load_counts.get(model_id, 0)
