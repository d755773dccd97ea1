import numpy as np
import pytest

from traitmark import domain
from traitmark.evaluation import (
    EvaluationError,
    LatencyProfile,
    ProfilingAborted,
    QwkReport,
    builtin_trainer,
    latency_profile,
    loocv_by_prompt,
    qwk,
    star_rating,
    tradeoff_report,
)
from traitmark.registry import ScoreContext
from traitmark.training import TrainConfig

from conftest import make_corpus


# ---------------------------------------------------------------------------
# Brute-force QWK oracle: naive double loops over the histogram formula
# ---------------------------------------------------------------------------


def naive_qwk(a, b, lo, hi):
    n_cat = hi - lo + 1
    observed = [[0.0] * n_cat for _ in range(n_cat)]
    for x, y in zip(a, b):
        observed[x - lo][y - lo] += 1
    hist_a = [0.0] * n_cat
    hist_b = [0.0] * n_cat
    for x in a:
        hist_a[x - lo] += 1
    for y in b:
        hist_b[y - lo] += 1
    total = len(a)
    num = 0.0
    den = 0.0
    for i in range(n_cat):
        for j in range(n_cat):
            w = ((i - j) ** 2) / ((n_cat - 1) ** 2)
            num += w * observed[i][j]
            den += w * hist_a[i] * hist_b[j] / total
    if den == 0.0:
        return 1.0 if a[0] == b[0] else 0.0
    return 1.0 - num / den


def test_qwk_perfect_agreement():
    assert qwk([0, 1, 2, 3, 4, 5], [0, 1, 2, 3, 4, 5], (0, 5)) == 1.0


def test_qwk_example_against_oracle():
    a, b = [1, 2, 3], [1, 2, 2]
    assert qwk(a, b, (0, 5)) == pytest.approx(naive_qwk(a, b, 0, 5), abs=1e-12)


def test_qwk_degenerate_equal_constant():
    assert qwk([0, 0, 0], [0, 0, 0], (0, 5)) == 1.0


def test_qwk_degenerate_unequal_constant():
    assert qwk([0, 0, 0], [3, 3, 3], (0, 5)) == 0.0


def test_qwk_random_against_oracle_seeded():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        lo, hi = (0, 2) if rng.random() < 0.5 else (0, 5)
        n = int(rng.integers(1, 51))
        a = rng.integers(lo, hi + 1, size=n).tolist()
        b = rng.integers(lo, hi + 1, size=n).tolist()
        assert qwk(a, b, (lo, hi)) == pytest.approx(naive_qwk(a, b, lo, hi), abs=1e-10)


def test_qwk_symmetric():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(1, 30))
        a = rng.integers(0, 6, size=n).tolist()
        b = rng.integers(0, 6, size=n).tolist()
        assert qwk(a, b, (0, 5)) == pytest.approx(qwk(b, a, (0, 5)), abs=1e-12)


def test_qwk_shift_invariance_with_equal_category_count():
    rng = np.random.default_rng(4)
    a = rng.integers(0, 6, size=40).tolist()
    b = rng.integers(0, 6, size=40).tolist()
    shifted_a = [x + 1 for x in a]
    shifted_b = [x + 1 for x in b]
    assert qwk(a, b, (0, 5)) == pytest.approx(qwk(shifted_a, shifted_b, (1, 6)), abs=1e-12)


def test_qwk_errors():
    with pytest.raises(EvaluationError):
        qwk([1, 2], [1], (0, 5))
    with pytest.raises(EvaluationError):
        qwk([6], [1], (0, 5))
    with pytest.raises(EvaluationError):
        qwk([0], [0], (0, 0))
    with pytest.raises(EvaluationError):
        qwk([], [], (0, 5))


# ---------------------------------------------------------------------------
# QwkReport
# ---------------------------------------------------------------------------

TABLE2_TRAITS = ("REL", "ORG", "VOC", "STY", "DEV", "MEC", "GRM", "HOL")


def test_report_avg_is_mean_of_trait_means():
    per_prompt = {
        "m1": {t: {"p1": 0.5, "p2": 0.7} for t in TABLE2_TRAITS},
    }
    report = QwkReport.from_per_prompt(TABLE2_TRAITS, per_prompt)
    assert report.trait_means["m1"]["REL"] == pytest.approx(0.6)
    assert report.avg["m1"] == pytest.approx(0.6, abs=1e-12)


def test_report_round_trips_through_dict():
    report = QwkReport.from_trait_means(
        TABLE2_TRAITS, {"m": {t: 0.5 for t in TABLE2_TRAITS}}
    )
    again = QwkReport.from_dict(report.to_dict())
    assert again.avg == report.avg


def test_report_table_text_has_columns():
    report = QwkReport.from_trait_means(
        TABLE2_TRAITS, {"m": {t: 0.5 for t in TABLE2_TRAITS}}
    )
    header = report.to_table_text().splitlines()[0].split("\t")
    assert header == ["model", *TABLE2_TRAITS, "AVG"]


# ---------------------------------------------------------------------------
# loocv
# ---------------------------------------------------------------------------


def test_loocv_learnable_labels_high_kappa():
    corpus = make_corpus(80, seed=17, prompt_ids=("p1", "p2"))
    trainer = builtin_trainer()
    grid = [TrainConfig(kind="builtin_linear", selection_threshold=0.3, ridge_lambda=1.0)]
    report = loocv_by_prompt(corpus, trainer, grid, model_id="builtin")
    assert set(report.per_prompt["builtin"]["ORG"]) == {"p1", "p2"}
    assert report.avg["builtin"] >= 0.9


def test_loocv_shuffled_labels_near_zero():
    corpus = make_corpus(100, seed=18, prompt_ids=("p1", "p2"))
    rng = np.random.default_rng(7)
    labels = [e.labels for e in corpus]
    perm = rng.permutation(len(labels))
    shuffled = [
        type(corpus[0])(e.essay_id, e.text, e.prompt_id, labels[perm[i]])
        for i, e in enumerate(corpus)
    ]
    trainer = builtin_trainer()
    grid = [TrainConfig(kind="builtin_linear", selection_threshold=0.1)]
    report = loocv_by_prompt(shuffled, trainer, grid, model_id="builtin")
    assert abs(report.avg["builtin"]) < 0.2


def test_loocv_table_shape_eight_prompts():
    prompts = tuple(f"p{i}" for i in range(8))
    corpus = make_corpus(96, seed=19, prompt_ids=prompts)
    trainer = builtin_trainer()
    grid = [TrainConfig(kind="builtin_linear", selection_threshold=0.3)]
    report = loocv_by_prompt(corpus, trainer, grid, model_id="builtin")
    assert report.trait_order == tuple(domain.TRAIT_ORDER)
    for trait in domain.TRAIT_ORDER:
        assert set(report.per_prompt["builtin"][trait]) == set(prompts)
    header = report.to_table_text().splitlines()[0].split("\t")
    assert header == ["model", *domain.TRAIT_ORDER, "AVG"]


def test_loocv_single_prompt_rejected():
    corpus = make_corpus(10, seed=20)
    with pytest.raises(EvaluationError, match="2 distinct prompts"):
        loocv_by_prompt(corpus, builtin_trainer(), [TrainConfig()])


def test_loocv_grid_selection_runs():
    corpus = make_corpus(60, seed=21, prompt_ids=("p1", "p2"))
    trainer = builtin_trainer()
    grid = [
        TrainConfig(kind="builtin_linear", selection_threshold=0.1),
        TrainConfig(kind="builtin_linear", selection_threshold=0.4),
    ]
    report = loocv_by_prompt(corpus, trainer, grid, model_id="builtin", seed=5)
    assert report.avg["builtin"] > 0.5


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------


class SleepyHandle:
    model_id = "sleepy"
    supported_traits = frozenset(domain.TRAIT_ORDER)

    def __init__(self, delay_s=0.01, fail_on=None):
        self.delay_s = delay_s
        self.fail_on = fail_on
        self.calls = 0

    def raw_score(self, text, trait, context):
        import time

        self.calls += 1
        if self.fail_on is not None and self.calls >= self.fail_on:
            raise RuntimeError("synthetic failure")
        time.sleep(self.delay_s)
        return 2.0


def _essays(n):
    return [domain.Essay(id=f"e{i}", text=f"نص تجريبي رقم {i}.") for i in range(n)]


def test_latency_stub_sleeper_bounds():
    profile = latency_profile(SleepyHandle(0.01), _essays(12), "ORG", warmup=2)
    assert 10.0 <= profile.mean_ms <= 25.0
    assert profile.essay_count == 10
    assert profile.p95_ms >= profile.median_ms


def test_latency_single_sample_p95_equals_median():
    profile = latency_profile(SleepyHandle(0.001), _essays(4), "ORG", warmup=3)
    assert profile.essay_count == 1
    assert profile.p95_ms == profile.median_ms


def test_latency_failure_aborts_with_partial():
    handle = SleepyHandle(0.001, fail_on=4)
    with pytest.raises(ProfilingAborted) as exc_info:
        latency_profile(handle, _essays(10), "ORG", warmup=0)
    assert exc_info.value.partial is not None
    assert exc_info.value.partial.partial is True
    assert exc_info.value.partial.essay_count == 3


def test_latency_warmup_bounds():
    with pytest.raises(EvaluationError):
        latency_profile(SleepyHandle(), _essays(3), "ORG", warmup=3)


# ---------------------------------------------------------------------------
# stars and trade-off
# ---------------------------------------------------------------------------


def test_star_rating_mapping():
    assert star_rating(0.653) == 3
    assert star_rating(1.0) == 5
    assert star_rating(-0.4) == 0
    assert star_rating(0.9) == 5
    assert star_rating(0.09) == 0
    with pytest.raises(EvaluationError):
        star_rating(float("nan"))


def test_tradeoff_orders_by_kappa():
    report = QwkReport.from_trait_means(
        ("ORG",), {"fast-weak": {"ORG": 0.3}, "slow-strong": {"ORG": 0.8}}
    )
    profiles = {
        "fast-weak": LatencyProfile("fast-weak", 5.0, 5.0, 5.0, 10, 0),
        "slow-strong": LatencyProfile("slow-strong", 900.0, 900.0, 900.0, 10, 0),
    }
    table = tradeoff_report(report, profiles)
    assert [r.model_id for r in table.rows] == ["slow-strong", "fast-weak"]
    assert all(r.complete for r in table.rows)


def test_tradeoff_incomplete_row_flagged():
    report = QwkReport.from_trait_means(("ORG",), {"a": {"ORG": 0.5}})
    profiles = {"b": LatencyProfile("b", 10.0, 10.0, 10.0, 5, 0)}
    table = tradeoff_report(report, profiles)
    by_id = {r.model_id: r for r in table.rows}
    assert not by_id["a"].complete and by_id["a"].ms_per_essay is None
    assert not by_id["b"].complete and by_id["b"].avg_qwk is None
    assert "[incomplete]" in table.to_text()
