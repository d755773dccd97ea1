"""Agreement metrics and the evaluation harness.

Quadratic weighted kappa over the fixed rubric category space,
leave-one-prompt-out cross-validation with validation-split hyperparameter
selection, wall-clock latency profiling, and the effectiveness-vs-efficiency
trade-off table.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import domain
from .training import LabeledEssay, TrainConfig, train_builtin
from .artifacts import ModelArtifact
from .features import FeatureRegistry, builtin_registry, extract
from .training import predict_raw


class EvaluationError(ValueError):
    pass


class ProfilingAborted(RuntimeError):
    """A score call failed mid-profile; partial data rides on the exception."""

    def __init__(self, message: str, partial: "LatencyProfile | None"):
        super().__init__(message)
        self.partial = partial


def qwk(a: Sequence[int], b: Sequence[int], score_range: tuple[int, int]) -> float:
    """Quadratic weighted kappa between two integer rater series.

    Categories span the full rubric range, not just observed labels, so
    prompts with truncated label support stay comparable. Weights are
    (i-j)^2/(N-1)^2; the expected matrix is the outer product of the two
    marginal histograms scaled to the observed total. Degenerate marginals
    (both raters constant) are 0/0 by the formula and resolved by
    convention: 1 when the constants agree, 0 when they differ.
    """
    lo, hi = score_range
    n_cat = hi - lo + 1
    if n_cat < 2:
        raise EvaluationError(f"range {score_range} has a single category")
    if len(a) != len(b):
        raise EvaluationError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise EvaluationError("empty series")
    aa = np.asarray(a, dtype=np.int64)
    bb = np.asarray(b, dtype=np.int64)
    for name, arr in (("a", aa), ("b", bb)):
        if arr.min() < lo or arr.max() > hi:
            raise EvaluationError(f"series {name} has values outside [{lo},{hi}]")

    ai = aa - lo
    bi = bb - lo
    observed = np.zeros((n_cat, n_cat), dtype=np.float64)
    np.add.at(observed, (ai, bi), 1.0)
    hist_a = np.bincount(ai, minlength=n_cat).astype(np.float64)
    hist_b = np.bincount(bi, minlength=n_cat).astype(np.float64)
    expected = np.outer(hist_a, hist_b) / len(aa)  # sums to len(aa) = sum(observed)

    idx = np.arange(n_cat, dtype=np.float64)
    weights = (idx[:, None] - idx[None, :]) ** 2 / (n_cat - 1) ** 2

    denom = float((weights * expected).sum())
    if denom == 0.0:
        return 1.0 if ai[0] == bi[0] else 0.0
    return 1.0 - float((weights * observed).sum()) / denom


@dataclass
class QwkReport:
    """Per-prompt kappas rolled up into trait means and a per-model average.

    The AVG column is the arithmetic mean over the trait columns; the
    invariant is checked on construction.
    """

    trait_order: tuple[str, ...]
    per_prompt: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)
    trait_means: dict[str, dict[str, float]] = field(default_factory=dict)
    avg: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_per_prompt(
        cls,
        trait_order: Sequence[str],
        per_prompt: Mapping[str, Mapping[str, Mapping[str, float]]],
    ) -> "QwkReport":
        report = cls(trait_order=tuple(trait_order))
        for model, traits in per_prompt.items():
            report.per_prompt[model] = {t: dict(p) for t, p in traits.items()}
            means = {
                t: float(np.mean(list(prompts.values())))
                for t, prompts in traits.items()
            }
            report.trait_means[model] = means
            report.avg[model] = float(np.mean([means[t] for t in report.trait_order]))
        report.check()
        return report

    @classmethod
    def from_trait_means(
        cls,
        trait_order: Sequence[str],
        trait_means: Mapping[str, Mapping[str, float]],
    ) -> "QwkReport":
        report = cls(trait_order=tuple(trait_order))
        for model, means in trait_means.items():
            report.trait_means[model] = dict(means)
            report.avg[model] = float(np.mean([means[t] for t in report.trait_order]))
        report.check()
        return report

    def check(self) -> None:
        for model, means in self.trait_means.items():
            missing = [t for t in self.trait_order if t not in means]
            if missing:
                raise EvaluationError(f"model {model} missing trait means for {missing}")
            expected = float(np.mean([means[t] for t in self.trait_order]))
            if abs(self.avg[model] - expected) > 1e-12:
                raise EvaluationError(f"model {model}: AVG inconsistent with trait means")

    def merge(self, other: "QwkReport") -> "QwkReport":
        if other.trait_order != self.trait_order:
            raise EvaluationError("cannot merge reports with different trait columns")
        merged = QwkReport(trait_order=self.trait_order)
        for src in (self, other):
            for model in src.trait_means:
                merged.per_prompt[model] = {
                    t: dict(p) for t, p in src.per_prompt.get(model, {}).items()
                }
                merged.trait_means[model] = dict(src.trait_means[model])
                merged.avg[model] = src.avg[model]
        merged.check()
        return merged

    def to_dict(self) -> dict[str, Any]:
        return {
            "trait_order": list(self.trait_order),
            "per_prompt": self.per_prompt,
            "trait_means": self.trait_means,
            "avg": self.avg,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "QwkReport":
        report = cls(
            trait_order=tuple(d["trait_order"]),
            per_prompt={m: {t: dict(p) for t, p in tm.items()} for m, tm in d.get("per_prompt", {}).items()},
            trait_means={m: dict(tm) for m, tm in d["trait_means"].items()},
            avg=dict(d["avg"]),
        )
        report.check()
        return report

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False)

    def to_table_text(self) -> str:
        """Delimited table: one row per model, trait columns plus AVG."""
        header = ["model"] + list(self.trait_order) + ["AVG"]
        lines = ["\t".join(header)]
        for model in sorted(self.trait_means, key=lambda m: -self.avg[m]):
            cells = [model]
            cells += [f"{self.trait_means[model][t]:.3f}" for t in self.trait_order]
            cells.append(f"{self.avg[model]:.3f}")
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


class Predictor:
    """Trained pipeline wrapper used by the harness to produce final integers."""

    def __init__(self, artifact: ModelArtifact, features: FeatureRegistry, schema: domain.TraitSchema):
        self.artifact = artifact
        self.features = features
        self.schema = schema

    def predict_trait(self, text: str, trait: str) -> int:
        vec = extract(text, self.features)
        raw = float(predict_raw(self.artifact, vec.values)[self.artifact.trait_index(trait)])
        return domain.clamp_round_score(raw, trait, self.schema)


Trainer = Callable[[Sequence[LabeledEssay], TrainConfig], Predictor]


def builtin_trainer(
    *,
    features: FeatureRegistry | None = None,
    schema: domain.TraitSchema = domain.DEFAULT_SCHEMA,
    model_id: str = "builtin",
) -> Trainer:
    features = features or builtin_registry()

    def _train(train_set: Sequence[LabeledEssay], hp: TrainConfig) -> Predictor:
        artifact = train_builtin(
            list(train_set), hp, model_id=model_id, registry=features, schema=schema,
            trained_at="1970-01-01T00:00:00+00:00",
        )
        return Predictor(artifact, features, schema)

    return _train


def _validation_split(
    train_set: Sequence[LabeledEssay], fraction: float, seed: int
) -> tuple[list[LabeledEssay], list[LabeledEssay]]:
    """Carve a validation set off the training essays, stratified by prompt."""
    rng = np.random.default_rng(seed)
    by_prompt: dict[str, list[LabeledEssay]] = {}
    for item in train_set:
        by_prompt.setdefault(item.prompt_id, []).append(item)
    fit: list[LabeledEssay] = []
    val: list[LabeledEssay] = []
    for prompt_id in sorted(by_prompt):
        items = by_prompt[prompt_id]
        order = rng.permutation(len(items))
        n_val = max(1, int(round(fraction * len(items)))) if len(items) > 1 else 0
        chosen = set(order[:n_val].tolist())
        for i, item in enumerate(items):
            (val if i in chosen else fit).append(item)
    return fit, val


def _gold_label(item: LabeledEssay, trait: str, schema: domain.TraitSchema) -> int:
    if trait in item.labels:
        return int(item.labels[trait])
    # derived holistic gold: sum of the labeled component traits
    return domain.holistic_score(
        {t: int(item.labels[t]) for t in schema.component_traits}, schema
    )


def _kappas_for(
    predictor: Predictor,
    essays: Sequence[LabeledEssay],
    traits: Sequence[str],
    schema: domain.TraitSchema,
) -> dict[str, float]:
    out: dict[str, float] = {}
    for trait in traits:
        gold = [_gold_label(item, trait, schema) for item in essays]
        pred = [predictor.predict_trait(item.text, trait) for item in essays]
        out[trait] = qwk(gold, pred, schema.spec(trait).range)
    return out


def loocv_by_prompt(
    dataset: Sequence[LabeledEssay],
    trainer: Trainer,
    hp_grid: Sequence[TrainConfig],
    *,
    schema: domain.TraitSchema = domain.DEFAULT_SCHEMA,
    model_id: str = "builtin",
    val_fraction: float = 0.1,
    seed: int = 13,
) -> QwkReport:
    """Hold each prompt out once; tune on a 90/10 validation carve-out.

    For every fold the best hyperparameter configuration (by mean validation
    kappa over traits) is refit on all training essays before scoring the
    held-out prompt.
    """
    if not dataset:
        raise EvaluationError("empty dataset")
    prompts = sorted({item.prompt_id for item in dataset})
    if len(prompts) < 2:
        raise EvaluationError("leave-one-prompt-out needs at least 2 distinct prompts")
    if not hp_grid:
        raise EvaluationError("empty hyperparameter grid")
    labeled = set(dataset[0].labels)
    traits = [t for t in schema.trait_names if t in labeled]
    if (
        schema.holistic is not None
        and schema.holistic not in labeled
        and set(schema.component_traits) <= labeled
    ):
        # all components labeled: evaluate the derived holistic column too
        traits.append(schema.holistic)
        traits = [t for t in schema.trait_names if t in traits]
    if not traits:
        raise EvaluationError("no labeled trait matches the schema")

    per_prompt: dict[str, dict[str, float]] = {t: {} for t in traits}
    for held_out in prompts:
        train_set = [item for item in dataset if item.prompt_id != held_out]
        test_set = [item for item in dataset if item.prompt_id == held_out]
        if len(hp_grid) == 1:
            best_hp = hp_grid[0]
        else:
            fit_set, val_set = _validation_split(train_set, val_fraction, seed)
            best_hp, best_score = None, -np.inf
            for hp in hp_grid:
                try:
                    predictor = trainer(fit_set, hp)
                except Exception:
                    continue  # untrainable configuration (e.g. empty selection)
                kappas = _kappas_for(predictor, val_set, traits, schema)
                mean_k = float(np.mean(list(kappas.values())))
                if mean_k > best_score:
                    best_hp, best_score = hp, mean_k
            if best_hp is None:
                raise EvaluationError(
                    f"fold {held_out}: no hyperparameter configuration trained successfully"
                )
        predictor = trainer(train_set, best_hp)
        kappas = _kappas_for(predictor, test_set, traits, schema)
        for trait, k in kappas.items():
            per_prompt[trait][held_out] = k

    return QwkReport.from_per_prompt(traits, {model_id: per_prompt})


# ---------------------------------------------------------------------------
# Latency
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatencyProfile:
    model_id: str
    mean_ms: float
    median_ms: float
    p95_ms: float
    essay_count: int
    warmup_excluded: int
    partial: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "model_id": self.model_id,
            "mean_ms": self.mean_ms,
            "median_ms": self.median_ms,
            "p95_ms": self.p95_ms,
            "essay_count": self.essay_count,
            "warmup_excluded": self.warmup_excluded,
            "partial": self.partial,
        }


def _profile_from_samples(model_id: str, samples: list[float], warmup: int, partial: bool) -> LatencyProfile:
    arr = np.sort(np.asarray(samples, dtype=np.float64))
    n = len(arr)
    rank = max(1, int(np.ceil(0.95 * n)))  # nearest-rank percentile
    return LatencyProfile(
        model_id=model_id,
        mean_ms=float(arr.mean()),
        median_ms=float(np.median(arr)),
        p95_ms=float(arr[rank - 1]),
        essay_count=n,
        warmup_excluded=warmup,
        partial=partial,
    )


def latency_profile(
    handle,
    essays: Sequence[domain.Essay],
    trait: str,
    *,
    warmup: int = 0,
    context=None,
    schema: domain.TraitSchema = domain.DEFAULT_SCHEMA,
    clock=time.perf_counter,
) -> LatencyProfile:
    """Wall-clock per-essay scoring time over a handle; warmup calls excluded."""
    from .registry import ScoreContext, score as score_op

    if not essays:
        raise EvaluationError("no essays to profile")
    if warmup >= len(essays):
        raise EvaluationError(f"warmup {warmup} must be < essay count {len(essays)}")
    context = context or ScoreContext()
    samples: list[float] = []
    for i, essay in enumerate(essays):
        t0 = clock()
        try:
            score_op(handle, essay, trait, context, schema=schema)
        except Exception as exc:
            partial = _profile_from_samples(handle.model_id, samples, warmup, True) if samples else None
            raise ProfilingAborted(
                f"scoring failed on essay {essay.id} after {len(samples)} samples: {exc}", partial
            ) from exc
        elapsed_ms = (clock() - t0) * 1000.0
        if i >= warmup:
            samples.append(elapsed_ms)
    return _profile_from_samples(handle.model_id, samples, warmup, False)


# ---------------------------------------------------------------------------
# Ratings and trade-off
# ---------------------------------------------------------------------------


def star_rating(avg_qwk: float) -> int:
    """Map an average kappa onto the 0-5 star scale shown beside each model."""
    if not np.isfinite(avg_qwk):
        raise EvaluationError(f"avg_qwk {avg_qwk!r} is not finite")
    clamped = max(0.0, min(1.0, float(avg_qwk)))
    return domain.round_half_away(5.0 * clamped)


@dataclass(frozen=True)
class TradeoffRow:
    model_id: str
    avg_qwk: float | None
    ms_per_essay: float | None

    @property
    def complete(self) -> bool:
        return self.avg_qwk is not None and self.ms_per_essay is not None

    def to_dict(self) -> dict[str, Any]:
        return {
            "model_id": self.model_id,
            "avg_qwk": self.avg_qwk,
            "ms_per_essay": self.ms_per_essay,
            "complete": self.complete,
        }


@dataclass(frozen=True)
class TradeoffReport:
    rows: tuple[TradeoffRow, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"rows": [r.to_dict() for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False)

    def to_text(self) -> str:
        """Plain-text dump: aligned table plus a kappa bar chart."""
        lines = [f"{'model':<24}{'avg_qwk':>10}{'ms/essay':>12}  "]
        for row in self.rows:
            q = f"{row.avg_qwk:.3f}" if row.avg_qwk is not None else "-"
            ms = f"{row.ms_per_essay:.1f}" if row.ms_per_essay is not None else "-"
            marker = "" if row.complete else "  [incomplete]"
            lines.append(f"{row.model_id:<24}{q:>10}{ms:>12}{marker}")
        lines.append("")
        for row in self.rows:
            if row.avg_qwk is None:
                continue
            bar = "#" * max(0, int(round(40 * max(0.0, min(1.0, row.avg_qwk)))))
            ms = f"{row.ms_per_essay:.1f} ms" if row.ms_per_essay is not None else "latency n/a"
            lines.append(f"{row.model_id:<24}|{bar:<40}| qwk={row.avg_qwk:.3f} ({ms})")
        return "\n".join(lines) + "\n"


def tradeoff_report(
    qwk_report: QwkReport,
    latency_profiles: Mapping[str, LatencyProfile] | Sequence[LatencyProfile],
) -> TradeoffReport:
    """Join effectiveness and efficiency per model, sorted by kappa descending.

    A model present in only one input becomes an incomplete row, never a
    silent drop.
    """
    if not isinstance(latency_profiles, Mapping):
        latency_profiles = {p.model_id: p for p in latency_profiles}
    model_ids = sorted(set(qwk_report.avg) | set(latency_profiles))
    rows = []
    for model_id in model_ids:
        rows.append(
            TradeoffRow(
                model_id=model_id,
                avg_qwk=qwk_report.avg.get(model_id),
                ms_per_essay=(
                    latency_profiles[model_id].mean_ms if model_id in latency_profiles else None
                ),
            )
        )
    rows.sort(key=lambda r: (-(r.avg_qwk if r.avg_qwk is not None else -np.inf), r.model_id))
    return TradeoffReport(rows=tuple(rows))
