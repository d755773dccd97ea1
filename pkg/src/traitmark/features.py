"""Deterministic handcrafted feature extraction and correlation-based selection.

The built-in registry covers surface, lexical, readability, and mechanics
features computable from raw text alone; extractors needing pretrained
models are excluded by construction. The registry is ordered and versioned:
feature index equals vector position, and the version string travels with
every trained artifact so stale artifacts are rejected at inference.
"""

from __future__ import annotations

import math
import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

TERMINAL_MARKS = frozenset({".", "!", "?", "؟"})  # ؟ = Arabic question mark
COMMA_CHARS = frozenset({",", "،"})  # ، = Arabic comma


class ExtractionError(RuntimeError):
    """An extractor produced a non-finite value for some essay."""


class SelectionError(ValueError):
    """Feature selection retained nothing; lower the threshold."""


def _is_punct_char(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def segment(text: str) -> tuple[list[list[str]], list[str]]:
    """Split text into sentences and a flat token stream.

    Tokens are whitespace chunks with punctuation runs split off as separate
    tokens. A sentence ends at any token containing a terminal mark
    (. ! ? or the Arabic question mark); the Arabic comma is not terminal.
    Trailing words without a terminal mark form a final sentence.
    """
    tokens: list[str] = []
    sentences: list[list[str]] = []
    current: list[str] = []
    for chunk in text.split():
        for piece, is_punct in _split_punct(chunk):
            tokens.append(piece)
            if is_punct:
                if current and any(c in TERMINAL_MARKS for c in piece):
                    sentences.append(current)
                    current = []
            else:
                current.append(piece)
    if current:
        sentences.append(current)
    return sentences, tokens


def _split_punct(chunk: str) -> list[tuple[str, bool]]:
    """Break one whitespace-delimited chunk into runs of punctuation / non-punctuation."""
    out: list[tuple[str, bool]] = []
    buf: list[str] = []
    buf_punct: bool | None = None
    for ch in chunk:
        p = _is_punct_char(ch)
        if buf_punct is None or p == buf_punct:
            buf.append(ch)
            buf_punct = p
        else:
            out.append(("".join(buf), bool(buf_punct)))
            buf = [ch]
            buf_punct = p
    if buf:
        out.append(("".join(buf), bool(buf_punct)))
    return out


class TextProfile:
    """Shared per-text counts handed to every extractor.

    A profile is a pure function of the text, so extractors over it remain
    deterministic functions of the text itself.
    """

    def __init__(self, text: str):
        self.text = text
        self.sentences, self.tokens = segment(text)
        self.words = [t for t in self.tokens if not _is_punct_char(t[0])]
        self.punct_tokens = [t for t in self.tokens if _is_punct_char(t[0])]
        self.word_lengths = [len(w) for w in self.words]
        self.counts = Counter(self.words)
        self.char_count = len(text)
        self.whitespace = sum(1 for c in text if c.isspace())
        self.letters = 0
        self.digits = 0
        self.punct_chars = 0
        self.terminal_chars = 0
        self.comma_chars = 0
        self.question_chars = 0
        self.exclaim_chars = 0
        self.arabic_letters = 0
        self.latin_letters = 0
        for ch in text:
            cat = unicodedata.category(ch)
            if cat.startswith("L"):
                self.letters += 1
                code = ord(ch)
                if 0x0600 <= code <= 0x06FF or 0x0750 <= code <= 0x077F:
                    self.arabic_letters += 1
                elif ch.isascii():
                    self.latin_letters += 1
            elif cat.startswith("N"):
                self.digits += 1
            elif cat.startswith("P"):
                self.punct_chars += 1
                if ch in TERMINAL_MARKS:
                    self.terminal_chars += 1
                if ch in COMMA_CHARS:
                    self.comma_chars += 1
                if ch in ("?", "؟"):
                    self.question_chars += 1
                if ch == "!":
                    self.exclaim_chars += 1

    # Guarded denominators keep every feature finite on degenerate texts.
    @property
    def n_words(self) -> int:
        return len(self.words)

    @property
    def n_types(self) -> int:
        return len(self.counts)

    @property
    def n_sentences(self) -> int:
        return len(self.sentences)

    def sentence_word_counts(self) -> list[int]:
        return [len(s) for s in self.sentences]


Extractor = Callable[[TextProfile], float]


@dataclass(frozen=True)
class FeatureDef:
    name: str
    category: str  # surface | lexical | readability | mechanics
    fn: Extractor


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    registry_version: str

    def __len__(self) -> int:
        return len(self.values)


def _mean(xs: Sequence[float]) -> float:
    return sum(xs) / len(xs) if xs else 0.0


def _std(xs: Sequence[float]) -> float:
    if not xs:
        return 0.0
    m = _mean(xs)
    return math.sqrt(sum((x - m) ** 2 for x in xs) / len(xs))


def _ratio(a: float, b: float) -> float:
    return a / b if b else 0.0


def _builtin_features() -> list[FeatureDef]:
    f: list[FeatureDef] = []

    def add(name: str, category: str, fn: Extractor) -> None:
        f.append(FeatureDef(name, category, fn))

    # surface
    add("char_count", "surface", lambda p: float(p.char_count))
    add("char_count_nospace", "surface", lambda p: float(p.char_count - p.whitespace))
    add("letter_count", "surface", lambda p: float(p.letters))
    add("word_count", "surface", lambda p: float(p.n_words))
    add("unique_word_count", "surface", lambda p: float(p.n_types))
    add("sentence_count", "surface", lambda p: float(p.n_sentences))
    add("mean_word_length", "surface", lambda p: _mean(p.word_lengths))
    add("max_word_length", "surface", lambda p: float(max(p.word_lengths, default=0)))
    add("std_word_length", "surface", lambda p: _std(p.word_lengths))
    add("mean_sentence_length", "surface", lambda p: _mean(p.sentence_word_counts()))
    add("max_sentence_length", "surface", lambda p: float(max(p.sentence_word_counts(), default=0)))
    add("min_sentence_length", "surface", lambda p: float(min(p.sentence_word_counts(), default=0)))
    add("std_sentence_length", "surface", lambda p: _std(p.sentence_word_counts()))
    add(
        "mean_sentence_chars",
        "surface",
        lambda p: _mean([sum(len(w) for w in s) for s in p.sentences]),
    )
    add("log_word_count", "surface", lambda p: math.log1p(p.n_words))

    # lexical
    add("type_token_ratio", "lexical", lambda p: _ratio(p.n_types, p.n_words))
    add("root_type_token_ratio", "lexical", lambda p: _ratio(p.n_types, math.sqrt(p.n_words)) if p.n_words else 0.0)
    add(
        "corrected_type_token_ratio",
        "lexical",
        lambda p: _ratio(p.n_types, math.sqrt(2 * p.n_words)) if p.n_words else 0.0,
    )
    add(
        "hapax_ratio",
        "lexical",
        lambda p: _ratio(sum(1 for c in p.counts.values() if c == 1), p.n_words),
    )
    add(
        "hapax_type_ratio",
        "lexical",
        lambda p: _ratio(sum(1 for c in p.counts.values() if c == 1), p.n_types),
    )
    add(
        "dis_legomena_ratio",
        "lexical",
        lambda p: _ratio(sum(1 for c in p.counts.values() if c == 2), p.n_words),
    )
    add("long_word_ratio", "lexical", lambda p: _ratio(sum(1 for w in p.words if len(w) >= 6), p.n_words))
    add("short_word_ratio", "lexical", lambda p: _ratio(sum(1 for w in p.words if len(w) <= 3), p.n_words))
    add("mean_word_frequency", "lexical", lambda p: _ratio(p.n_words, p.n_types))
    add(
        "top_frequency_ratio",
        "lexical",
        lambda p: _ratio(max(p.counts.values(), default=0), p.n_words),
    )

    # readability (length-based composites; transformer-free by construction)
    add(
        "ari_composite",
        "readability",
        lambda p: 4.71 * _ratio(p.letters + p.digits, p.n_words)
        + 0.5 * _ratio(p.n_words, p.n_sentences)
        - 21.43,
    )
    add(
        "lix",
        "readability",
        lambda p: _ratio(p.n_words, p.n_sentences)
        + 100.0 * _ratio(sum(1 for w in p.words if len(w) > 6), p.n_words),
    )
    add("rix", "readability", lambda p: _ratio(sum(1 for w in p.words if len(w) > 6), p.n_sentences))
    add(
        "coleman_liau_composite",
        "readability",
        lambda p: 5.88 * _ratio(p.letters, p.n_words) - 29.6 * _ratio(p.n_sentences, p.n_words) - 15.8,
    )
    add(
        "fog_composite",
        "readability",
        lambda p: 0.4
        * (_ratio(p.n_words, p.n_sentences) + 100.0 * _ratio(sum(1 for w in p.words if len(w) >= 8), p.n_words)),
    )
    add("chars_per_sentence", "readability", lambda p: _ratio(p.char_count - p.whitespace, p.n_sentences))

    # mechanics
    add("punct_token_ratio", "mechanics", lambda p: _ratio(len(p.punct_tokens), len(p.tokens)))
    add("punct_per_sentence", "mechanics", lambda p: _ratio(len(p.punct_tokens), p.n_sentences))
    add("punct_char_density", "mechanics", lambda p: _ratio(p.punct_chars, p.char_count))
    add("terminal_mark_ratio", "mechanics", lambda p: _ratio(p.terminal_chars, p.punct_chars))
    add("terminal_per_sentence", "mechanics", lambda p: _ratio(p.terminal_chars, p.n_sentences))
    add("comma_density", "mechanics", lambda p: _ratio(p.comma_chars, p.n_words))
    add("question_mark_ratio", "mechanics", lambda p: _ratio(p.question_chars, p.n_sentences))
    add("exclamation_ratio", "mechanics", lambda p: _ratio(p.exclaim_chars, p.n_sentences))
    add("digit_char_ratio", "mechanics", lambda p: _ratio(p.digits, p.char_count))
    add("digit_token_ratio", "mechanics", lambda p: _ratio(sum(1 for w in p.words if w.isdigit()), p.n_words))
    add("whitespace_ratio", "mechanics", lambda p: _ratio(p.whitespace, p.char_count))
    add("arabic_letter_ratio", "mechanics", lambda p: _ratio(p.arabic_letters, p.letters))
    add("latin_letter_ratio", "mechanics", lambda p: _ratio(p.latin_letters, p.letters))

    return f


BUILTIN_REGISTRY_VERSION = "builtin-v1"


class FeatureRegistry:
    """Ordered, versioned, immutable catalog of extractors."""

    def __init__(self, features: Iterable[FeatureDef], version: str):
        feats = tuple(features)
        names = [fd.name for fd in feats]
        if len(names) != len(set(names)):
            raise ValueError("duplicate feature names in registry")
        self.features = feats
        self.version = version

    def __len__(self) -> int:
        return len(self.features)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(fd.name for fd in self.features)

    def extended(self, extra: Iterable[FeatureDef], version: str) -> "FeatureRegistry":
        """New registry with extra extractors appended (restores removed sets)."""
        return FeatureRegistry(tuple(self.features) + tuple(extra), version)


def builtin_registry() -> FeatureRegistry:
    return FeatureRegistry(_builtin_features(), BUILTIN_REGISTRY_VERSION)


def extract(text: str, registry: FeatureRegistry) -> FeatureVector:
    """Compute one value per registered feature; repeated calls are identical."""
    profile = TextProfile(text)
    values = np.empty(len(registry), dtype=np.float64)
    for i, fd in enumerate(registry.features):
        v = float(fd.fn(profile))
        if not math.isfinite(v):
            raise ExtractionError(f"feature {fd.name!r} produced non-finite value {v!r}")
        values[i] = v
    return FeatureVector(values=values, registry_version=registry.version)


def extract_matrix(texts: Sequence[str], registry: FeatureRegistry) -> np.ndarray:
    return np.vstack([extract(t, registry).values for t in texts])


# ---------------------------------------------------------------------------
# Correlations
# ---------------------------------------------------------------------------


def _as_series(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    return arr


def pearson(x, y) -> float:
    """Pearson product-moment correlation; zero-variance series correlate 0.

    The zero-variance convention is deliberate: a constant feature carries no
    signal and must never pass selection.
    """
    xa, ya = _as_series(x, "x"), _as_series(y, "y")
    if len(xa) != len(ya):
        raise ValueError(f"length mismatch: {len(xa)} vs {len(ya)}")
    if len(xa) < 2:
        raise ValueError("need at least 2 observations")
    xm = xa - xa.mean()
    ym = ya - ya.mean()
    sx = math.sqrt(float(np.dot(xm, xm)))
    sy = math.sqrt(float(np.dot(ym, ym)))
    if sx == 0.0 or sy == 0.0:
        return 0.0
    r = float(np.dot(xm, ym)) / (sx * sy)
    return max(-1.0, min(1.0, r))


def average_ranks(x) -> np.ndarray:
    """1-based ranks; ties receive the mean of the positions they occupy."""
    arr = _as_series(x, "x")
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(len(arr), dtype=np.float64)
    i = 0
    while i < len(arr):
        j = i
        while j + 1 < len(arr) and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        mean_rank = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = mean_rank
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Spearman rank correlation: Pearson over average-ranked data."""
    xa, ya = _as_series(x, "x"), _as_series(y, "y")
    if len(xa) != len(ya):
        raise ValueError(f"length mismatch: {len(xa)} vs {len(ya)}")
    if len(xa) < 2:
        raise ValueError("need at least 2 observations")
    return pearson(average_ranks(xa), average_ranks(ya))


# ---------------------------------------------------------------------------
# Selection and standardization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SelectionMask:
    """Per-feature keep/drop decisions with the correlation stats behind them.

    ``retained[i]`` is true iff max(|pearson|, |spearman|) across all trait
    columns strictly exceeds the threshold.
    """

    retained: np.ndarray  # bool, aligned to registry order
    threshold: float
    pearson_stats: np.ndarray  # max |pearson| per feature across traits
    spearman_stats: np.ndarray

    @property
    def n_retained(self) -> int:
        return int(self.retained.sum())

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.retained)

    def apply(self, X: np.ndarray) -> np.ndarray:
        if X.ndim == 1:
            return X[self.retained]
        return X[:, self.retained]


def selection_mask(X: np.ndarray, Y: np.ndarray, threshold: float) -> SelectionMask:
    """Compute the mask without the non-empty requirement (see select_features)."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows, Y has {Y.shape[0]}")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 essays for correlation-based selection")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0,1], got {threshold}")
    n_features = X.shape[1]
    p_stats = np.zeros(n_features)
    s_stats = np.zeros(n_features)
    for i in range(n_features):
        col = X[:, i]
        p_stats[i] = max(abs(pearson(col, Y[:, t])) for t in range(Y.shape[1]))
        s_stats[i] = max(abs(spearman(col, Y[:, t])) for t in range(Y.shape[1]))
    retained = np.maximum(p_stats, s_stats) > threshold
    return SelectionMask(
        retained=retained,
        threshold=threshold,
        pearson_stats=p_stats,
        spearman_stats=s_stats,
    )


def select_features(X: np.ndarray, Y: np.ndarray, threshold: float) -> SelectionMask:
    """Retain features whose absolute correlation with any trait exceeds the threshold."""
    mask = selection_mask(X, Y, threshold)
    if mask.n_retained == 0:
        raise SelectionError(
            f"no feature exceeded correlation threshold {threshold}; lower the threshold"
        )
    return mask


@dataclass(frozen=True)
class Standardizer:
    """Per-feature mean/std learned at training time, applied at inference.

    Population (1/n) standard deviation; zero-variance features pass through
    as zeros in both modes.
    """

    mean: np.ndarray
    std: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != len(self.mean):
            raise ValueError(
                f"dimension mismatch: data has {X.shape[-1]} features, stats have {len(self.mean)}"
            )
        safe = np.where(self.std == 0.0, 1.0, self.std)
        out = (X - self.mean) / safe
        zero = self.std == 0.0
        if X.ndim == 1:
            out[zero] = 0.0
        else:
            out[:, zero] = 0.0
        return out


def standardize(X: np.ndarray, stats: Standardizer | None = None) -> tuple[np.ndarray, Standardizer]:
    """Standardize columns; fit stats when none are given, else apply stored ones."""
    X = np.asarray(X, dtype=np.float64)
    if stats is None:
        stats = Standardizer(mean=X.mean(axis=0), std=X.std(axis=0))
    return stats.apply(X), stats
