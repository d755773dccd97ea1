"""Canonical trait schema, score arithmetic, and workspace entity types.

Everything here is pure data plus pure functions; instances are safe to
share across threads. The built-in schema scores essays on seven writing
traits plus a holistic score defined as the sum of the seven.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

TRAIT_ORDER = ("REL", "ORG", "VOC", "STY", "DEV", "MEC", "GRM", "HOL")
HOLISTIC = "HOL"

LANGUAGES = ("arabic", "english")
ESSAY_TYPES = ("persuasive", "explanatory", "argumentative")


class SchemaError(ValueError):
    """Unknown trait name or malformed trait schema."""


class ValidationError(ValueError):
    """Entity or score-map payload violates a domain invariant."""


class ScoringError(RuntimeError):
    """A score value cannot be produced (non-finite input, bad pipeline state)."""


def round_half_away(x: float) -> int:
    """Round to the nearest integer, halves away from zero.

    Python's built-in round() is banker's rounding; score mapping needs the
    symmetric, deterministic rule instead.
    """
    if x >= 0:
        return int(math.floor(x + 0.5))
    return int(math.ceil(x - 0.5))


@dataclass(frozen=True)
class TraitSpec:
    """One scoring dimension with its integer rubric range."""

    name: str
    min_score: int
    max_score: int
    rubric_required: bool = True

    def __post_init__(self) -> None:
        if not self.name:
            raise SchemaError("trait name must be non-empty")
        for v in (self.min_score, self.max_score):
            if not isinstance(v, int) or isinstance(v, bool):
                raise SchemaError(f"trait {self.name}: scores must be integers")
        if self.min_score < 0:
            raise SchemaError(f"trait {self.name}: min_score must be non-negative")
        if self.min_score >= self.max_score:
            raise SchemaError(f"trait {self.name}: min_score must be < max_score")

    @property
    def range(self) -> tuple[int, int]:
        return (self.min_score, self.max_score)

    def contains(self, value: int) -> bool:
        return self.min_score <= value <= self.max_score


class TraitSchema:
    """Ordered collection of trait specs, optionally with one derived holistic trait.

    The holistic trait, when present, is never model-scored in a run that also
    scores every component trait: its value is the sum of the component scores.
    """

    def __init__(self, traits: Iterable[TraitSpec], holistic: str | None = None):
        specs = list(traits)
        names = [t.name for t in specs]
        if len(names) != len(set(names)):
            raise SchemaError("duplicate trait names in schema")
        if holistic is not None and holistic not in names:
            raise SchemaError(f"holistic trait {holistic!r} not present in schema")
        self._specs: dict[str, TraitSpec] = {t.name: t for t in specs}
        self._order = tuple(names)
        self.holistic = holistic
        if holistic is not None:
            components = [t for t in specs if t.name != holistic]
            lo = sum(t.min_score for t in components)
            hi = sum(t.max_score for t in components)
            h = self._specs[holistic]
            if (h.min_score, h.max_score) != (lo, hi):
                raise SchemaError(
                    f"holistic trait {holistic} range {h.range} must equal the "
                    f"sum of component ranges ({lo},{hi})"
                )

    @property
    def trait_names(self) -> tuple[str, ...]:
        return self._order

    @property
    def component_traits(self) -> tuple[str, ...]:
        """Trait names excluding the derived holistic trait."""
        return tuple(n for n in self._order if n != self.holistic)

    def __contains__(self, name: str) -> bool:
        return name in self._specs

    def __iter__(self):
        return (self._specs[n] for n in self._order)

    def spec(self, name: str) -> TraitSpec:
        try:
            return self._specs[name]
        except KeyError:
            raise SchemaError(f"unknown trait {name!r}") from None

    def to_config(self) -> list[dict[str, Any]]:
        out = []
        for t in self:
            entry: dict[str, Any] = {
                "name": t.name,
                "min": t.min_score,
                "max": t.max_score,
                "rubric_required": t.rubric_required,
            }
            if t.name == self.holistic:
                entry["derived"] = True
            out.append(entry)
        return out

    @classmethod
    def from_config(cls, entries: Iterable[Mapping[str, Any]]) -> "TraitSchema":
        specs = []
        holistic = None
        for e in entries:
            spec = TraitSpec(
                name=str(e["name"]),
                min_score=int(e["min"]),
                max_score=int(e["max"]),
                rubric_required=bool(e.get("rubric_required", True)),
            )
            specs.append(spec)
            if e.get("derived"):
                if holistic is not None:
                    raise SchemaError("at most one derived trait allowed")
                holistic = spec.name
        return cls(specs, holistic=holistic)


def _builtin_schema() -> TraitSchema:
    specs = [TraitSpec("REL", 0, 2)]
    specs += [TraitSpec(n, 0, 5) for n in ("ORG", "VOC", "STY", "DEV", "MEC", "GRM")]
    specs.append(TraitSpec(HOLISTIC, 0, 32, rubric_required=False))
    return TraitSchema(specs, holistic=HOLISTIC)


DEFAULT_SCHEMA = _builtin_schema()


def trait_range(trait: str, schema: TraitSchema = DEFAULT_SCHEMA) -> tuple[int, int]:
    """Return the fixed (min, max) rubric range for a trait name."""
    return schema.spec(trait).range


def holistic_score(scores: Mapping[str, int], schema: TraitSchema = DEFAULT_SCHEMA) -> int:
    """Sum component trait scores into the holistic score.

    The map must contain exactly the schema's component traits, each within
    range; out-of-range values are rejected, never clamped.
    """
    expected = set(schema.component_traits)
    got = set(scores)
    if got != expected:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        parts = []
        if missing:
            parts.append(f"missing traits {missing}")
        if extra:
            parts.append(f"unexpected traits {extra}")
        raise ValidationError("holistic score needs exactly the component traits: " + ", ".join(parts))
    total = 0
    for name in schema.component_traits:
        value = scores[name]
        if not isinstance(value, int) or isinstance(value, bool):
            raise ValidationError(f"trait {name}: score must be an integer")
        spec = schema.spec(name)
        if not spec.contains(value):
            raise ValidationError(
                f"trait {name}: score {value} outside range [{spec.min_score},{spec.max_score}]"
            )
        total += value
    return total


def clamp_round_score(raw: float, trait: str, schema: TraitSchema = DEFAULT_SCHEMA) -> int:
    """Map a real-valued model output onto the trait's integer rubric range.

    Rounds half-away-from-zero, then clamps into range. Deterministic and
    monotone non-decreasing in ``raw``.
    """
    spec = schema.spec(trait)
    if not math.isfinite(raw):
        raise ScoringError(f"trait {trait}: raw score {raw!r} is not finite")
    return max(spec.min_score, min(spec.max_score, round_half_away(raw)))


# ---------------------------------------------------------------------------
# Workspace entities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rubric:
    """Per-trait scoring criteria: one description per integer score level."""

    id: str
    trait: str
    levels: tuple[tuple[int, str], ...]
    language: str
    title: str = ""

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Rubric":
        return cls(
            id=str(d["id"]),
            trait=str(d["trait"]),
            levels=tuple((int(s), str(desc)) for s, desc in d["levels"]),
            language=str(d.get("language", "arabic")),
            title=str(d.get("title", "")),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "trait": self.trait,
            "levels": [[s, d] for s, d in self.levels],
            "language": self.language,
            "title": self.title,
        }

    def text(self) -> str:
        """Flatten level descriptions for wire payloads to external scorers."""
        return "\n".join(f"{s}: {d}" for s, d in self.levels)


@dataclass(frozen=True)
class RubricValidation:
    violations: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_rubric(rubric: Rubric, schema: TraitSchema = DEFAULT_SCHEMA) -> RubricValidation:
    """Check a rubric's levels against its trait range.

    Violations are data, not faults: the result lists every problem found.
    A rubric whose levels start one above a zero minimum (common in practice,
    where published rubrics omit the zero level) is reported as a warning the
    instructor may waive, not as an error.
    """
    violations: list[str] = []
    warnings: list[str] = []
    try:
        spec = schema.spec(rubric.trait)
    except SchemaError as exc:
        return RubricValidation(violations=(str(exc),))

    if rubric.language not in LANGUAGES:
        violations.append(f"unknown language {rubric.language!r}")

    seen: set[int] = set()
    for level, description in rubric.levels:
        if level in seen:
            violations.append(f"duplicate level {level}")
        seen.add(level)
        if not spec.min_score <= level <= spec.max_score:
            violations.append(
                f"level outside [{spec.min_score},{spec.max_score}]: {level}"
            )
        if not description.strip():
            violations.append(f"empty description for level {level}")

    ordered = [s for s, _ in rubric.levels]
    if ordered != sorted(ordered):
        violations.append("levels not in ascending order")

    expected = set(range(spec.min_score, spec.max_score + 1))
    missing = sorted(expected - seen)
    if missing == [0] and spec.min_score == 0:
        warnings.append("missing level 0 (waivable: rubric starts at 1)")
    else:
        for m in missing:
            violations.append(f"missing level {m}")

    return RubricValidation(violations=tuple(violations), warnings=tuple(warnings))


@dataclass(frozen=True)
class Prompt:
    """Writing instructions that essays respond to."""

    id: str
    title: str
    body: str
    language: str
    essay_type: str
    grade_level: str

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Prompt":
        return cls(
            id=str(d["id"]),
            title=str(d.get("title", "")),
            body=str(d["body"]),
            language=str(d.get("language", "arabic")),
            essay_type=str(d["essay_type"]),
            grade_level=str(d.get("grade_level", "")),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "title": self.title,
            "body": self.body,
            "language": self.language,
            "essay_type": self.essay_type,
            "grade_level": self.grade_level,
        }


def validate_prompt(prompt: Prompt) -> None:
    if not prompt.body.strip():
        raise ValidationError("prompt body must be non-empty")
    if prompt.essay_type not in ESSAY_TYPES:
        raise ValidationError(
            f"essay_type {prompt.essay_type!r} not one of {list(ESSAY_TYPES)}"
        )
    if prompt.language not in LANGUAGES:
        raise ValidationError(f"unknown language {prompt.language!r}")


@dataclass(frozen=True)
class Essay:
    """One uploaded student essay. ``word_count`` is derived from the text."""

    id: str
    text: str
    upload_batch: str = ""
    created_at: str = ""
    metadata: tuple[tuple[str, str], ...] = ()
    word_count: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        object.__setattr__(self, "word_count", len(self.text.split()))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Essay":
        return cls(
            id=str(d["id"]),
            text=str(d["text"]),
            upload_batch=str(d.get("upload_batch", "")),
            created_at=str(d.get("created_at", "")),
            metadata=tuple((str(k), str(v)) for k, v in d.get("metadata", [])),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "text": self.text,
            "upload_batch": self.upload_batch,
            "created_at": self.created_at,
            "metadata": [[k, v] for k, v in self.metadata],
            "word_count": self.word_count,
        }


def validate_essay(essay: Essay) -> None:
    if not essay.id:
        raise ValidationError("essay id must be non-empty")
    if not essay.text.strip():
        raise ValidationError("essay text must be non-empty")


@dataclass(frozen=True)
class Assignment:
    """Instructor workspace unit binding a prompt, rubrics, and models to traits.

    ``trait_config`` maps each configured trait to exactly one (rubric_id,
    model_id) pair; the holistic trait needs no rubric.
    """

    id: str
    title: str
    language: str
    essay_type: str
    grade_level: str
    prompt_id: str
    trait_config: tuple[tuple[str, tuple[str, str]], ...]
    owner: str
    created_at: str = ""

    def config_map(self) -> dict[str, tuple[str, str]]:
        return {t: rm for t, rm in self.trait_config}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Assignment":
        cfg = d["trait_config"]
        if isinstance(cfg, Mapping):
            items = cfg.items()
        else:
            items = [(t, tuple(rm)) for t, rm in cfg]
        return cls(
            id=str(d["id"]),
            title=str(d.get("title", "")),
            language=str(d.get("language", "arabic")),
            essay_type=str(d["essay_type"]),
            grade_level=str(d.get("grade_level", "")),
            prompt_id=str(d["prompt_id"]),
            trait_config=tuple(
                (str(t), (str(rm[0]), str(rm[1]))) for t, rm in items
            ),
            owner=str(d.get("owner", "")),
            created_at=str(d.get("created_at", "")),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "title": self.title,
            "language": self.language,
            "essay_type": self.essay_type,
            "grade_level": self.grade_level,
            "prompt_id": self.prompt_id,
            "trait_config": {t: list(rm) for t, rm in self.trait_config},
            "owner": self.owner,
            "created_at": self.created_at,
        }


def validate_assignment(assignment: Assignment, schema: TraitSchema = DEFAULT_SCHEMA) -> None:
    if not assignment.id:
        raise ValidationError("assignment id must be non-empty")
    if assignment.essay_type not in ESSAY_TYPES:
        raise ValidationError(
            f"essay_type {assignment.essay_type!r} not one of {list(ESSAY_TYPES)}"
        )
    if assignment.language not in LANGUAGES:
        raise ValidationError(f"unknown language {assignment.language!r}")
    if not assignment.prompt_id:
        raise ValidationError("assignment must reference a prompt")
    seen: set[str] = set()
    for trait, (rubric_id, model_id) in assignment.trait_config:
        if trait in seen:
            raise ValidationError(f"trait {trait} configured twice")
        seen.add(trait)
        spec = schema.spec(trait)  # raises SchemaError for unknown traits
        if spec.rubric_required and not rubric_id:
            raise ValidationError(f"trait {trait} requires a rubric")
        if not model_id:
            raise ValidationError(f"trait {trait} requires a model")
    if not seen:
        raise ValidationError("assignment must configure at least one trait")


@dataclass(frozen=True)
class Refinement:
    """Manual instructor override attached to a model-produced score."""

    value: int
    actor: str
    at: str
    note: str = ""


@dataclass(frozen=True)
class TraitScore:
    """One model-produced score for one (essay, trait) pair in one run."""

    essay_id: str
    trait: str
    raw_value: float
    value: int
    model_id: str
    run_id: str
    elapsed_ms: int
    refined: Refinement | None = None

    def __post_init__(self) -> None:
        if self.elapsed_ms < 0:
            raise ValidationError("elapsed_ms must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "essay_id": self.essay_id,
            "trait": self.trait,
            "raw_value": self.raw_value,
            "value": self.value,
            "model_id": self.model_id,
            "run_id": self.run_id,
            "elapsed_ms": self.elapsed_ms,
        }
        if self.refined is not None:
            d["refined"] = {
                "value": self.refined.value,
                "actor": self.refined.actor,
                "at": self.refined.at,
                "note": self.refined.note,
            }
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TraitScore":
        refined = None
        if d.get("refined"):
            r = d["refined"]
            refined = Refinement(
                value=int(r["value"]),
                actor=str(r["actor"]),
                at=str(r["at"]),
                note=str(r.get("note", "")),
            )
        return cls(
            essay_id=str(d["essay_id"]),
            trait=str(d["trait"]),
            raw_value=float(d["raw_value"]),
            value=int(d["value"]),
            model_id=str(d["model_id"]),
            run_id=str(d["run_id"]),
            elapsed_ms=int(d["elapsed_ms"]),
            refined=refined,
        )
