"""Corpus BLEU and chrF/chrF++ plus a pluggable scorer interface.

The same scorer objects drive final evaluation and the layer-importance
signal during pruning. Scores live on a 0..100 scale.

Conventions:
  * BLEU tokenizes on whitespace and applies no smoothing by default
    (any zero higher-order precision zeroes the score); an exponential
    smoothing option exists but is off, and the config fingerprint records
    the choice. Orders with no hypothesis n-grams at all are dropped from
    the geometric mean so that identical short corpora still score 100.
  * chrF removes whitespace before extracting character n-grams; chrF++
    additionally averages word 1..2-gram F-scores into the same mean.
    Orders with no n-grams on either side are excluded from the mean.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .errors import ConfigError

CustomScorer = Callable[[Sequence[str], Sequence[str]], float]


@dataclass(frozen=True)
class ScorerConfig:
    """Configuration of one evaluation metric.

    `kind` is one of bleu, chrf, chrf++ or custom. For custom scorers a
    callable and a display name are supplied; the callable is excluded from
    the fingerprint, the name is not.
    """

    kind: str
    char_ngram_max: int = 6
    word_ngram_max: int | None = None
    beta: float = 2.0
    bleu_max_order: int = 4
    bleu_smoothing: str = "none"
    custom_fn: CustomScorer | None = field(default=None, compare=False)
    custom_name: str = "custom"

    def __post_init__(self):
        if self.kind not in ("bleu", "chrf", "chrf++", "custom"):
            raise ConfigError(f"unknown scorer kind '{self.kind}'")
        if self.word_ngram_max is None:
            object.__setattr__(
                self, "word_ngram_max", 2 if self.kind == "chrf++" else 0
            )
        if self.beta <= 0:
            raise ConfigError("scorer beta must be positive")
        if self.char_ngram_max < 1 or self.bleu_max_order < 1:
            raise ConfigError("n-gram orders must be >= 1")
        if self.word_ngram_max < 0:
            raise ConfigError("word n-gram order must be >= 0")
        if self.bleu_smoothing not in ("none", "exp"):
            raise ConfigError(f"unknown BLEU smoothing '{self.bleu_smoothing}'")
        if self.kind == "custom" and self.custom_fn is None:
            raise ConfigError("custom scorer needs a callable")

    @property
    def name(self) -> str:
        return self.custom_name if self.kind == "custom" else self.kind

    def fingerprint(self) -> str:
        payload = {
            "kind": self.kind,
            "name": self.name,
            "char_ngram_max": self.char_ngram_max,
            "word_ngram_max": self.word_ngram_max,
            "beta": self.beta,
            "bleu_max_order": self.bleu_max_order,
            "bleu_smoothing": self.bleu_smoothing,
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def make_scorer(kind: str, **overrides) -> ScorerConfig:
    """Build a ScorerConfig for `kind` (chrf++ resolves word order to 2)."""
    return ScorerConfig(kind=kind, **overrides)


@dataclass
class ScoreReport:
    metric: str
    corpus_score: float
    segment_scores: list[float]
    fingerprint: str

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "corpus_score": self.corpus_score,
            "segment_scores": self.segment_scores,
            "fingerprint": self.fingerprint,
        }


def _check_inputs(hypotheses: Sequence[str], references: Sequence[str]) -> None:
    if len(hypotheses) == 0:
        raise ValueError("empty hypothesis set")
    if len(hypotheses) != len(references):
        raise ValueError(
            f"{len(hypotheses)} hypotheses vs {len(references)} references"
        )


def _word_ngrams(text: str, n: int) -> Counter:
    tokens = text.split()
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _char_ngrams(text: str, n: int) -> Counter:
    return Counter(text[i:i + n] for i in range(len(text) - n + 1))


def _bleu_stats(hyp: str, ref: str, max_order: int) -> tuple[list[int], list[int], int, int]:
    hyp_tokens, ref_tokens = hyp.split(), ref.split()
    correct = [0] * max_order
    total = [0] * max_order
    for n in range(1, max_order + 1):
        hyp_grams = _word_ngrams(hyp, n)
        ref_grams = _word_ngrams(ref, n)
        overlap = hyp_grams & ref_grams
        correct[n - 1] = sum(overlap.values())
        total[n - 1] = sum(hyp_grams.values())
    return correct, total, len(hyp_tokens), len(ref_tokens)


def _bleu_from_stats(
    correct: list[int],
    total: list[int],
    hyp_len: int,
    ref_len: int,
    max_order: int,
    smoothing: str,
) -> float:
    log_sum = 0.0
    effective_order = 0
    smooth = 1.0
    for n in range(1, max_order + 1):
        if total[n - 1] == 0:
            break
        effective_order = n
        if correct[n - 1] == 0:
            if smoothing == "exp":
                smooth *= 2.0
                precision = 1.0 / (smooth * total[n - 1])
            else:
                return 0.0
        else:
            precision = correct[n - 1] / total[n - 1]
        log_sum += math.log(precision)
    if effective_order == 0 or hyp_len == 0:
        return 0.0
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * brevity * math.exp(log_sum / effective_order)


def bleu(
    hypotheses: Sequence[str],
    references: Sequence[str],
    config: ScorerConfig | None = None,
) -> ScoreReport:
    """Corpus BLEU with modified n-gram precision and brevity penalty."""
    config = config or make_scorer("bleu")
    _check_inputs(hypotheses, references)
    order = config.bleu_max_order
    correct = [0] * order
    total = [0] * order
    hyp_len = ref_len = 0
    segment_scores: list[float] = []
    for hyp, ref in zip(hypotheses, references):
        c, t, hl, rl = _bleu_stats(hyp, ref, order)
        for i in range(order):
            correct[i] += c[i]
            total[i] += t[i]
        hyp_len += hl
        ref_len += rl
        segment_scores.append(
            _bleu_from_stats(c, t, hl, rl, order, config.bleu_smoothing)
        )
    corpus = _bleu_from_stats(correct, total, hyp_len, ref_len, order,
                              config.bleu_smoothing)
    return ScoreReport("bleu", corpus, segment_scores, config.fingerprint())


def _chrf_stats(hyp: str, ref: str, config: ScorerConfig) -> list[int]:
    """Per-order (hyp_count, ref_count, match_count) triples, char then word."""
    hyp_chars = "".join(hyp.split())
    ref_chars = "".join(ref.split())
    stats: list[int] = []
    for n in range(1, config.char_ngram_max + 1):
        h = _char_ngrams(hyp_chars, n)
        r = _char_ngrams(ref_chars, n)
        m = h & r
        stats += [sum(h.values()), sum(r.values()), sum(m.values())]
    for n in range(1, config.word_ngram_max + 1):
        h = _word_ngrams(hyp, n)
        r = _word_ngrams(ref, n)
        m = h & r
        stats += [sum(h.values()), sum(r.values()), sum(m.values())]
    return stats


def _chrf_from_stats(stats: list[int], beta: float) -> float:
    beta_sq = beta * beta
    f_sum = 0.0
    effective_orders = 0
    for i in range(len(stats) // 3):
        n_hyp, n_ref, n_match = stats[3 * i: 3 * i + 3]
        if n_hyp == 0 and n_ref == 0:
            continue
        effective_orders += 1
        precision = n_match / n_hyp if n_hyp > 0 else 0.0
        recall = n_match / n_ref if n_ref > 0 else 0.0
        if precision + recall > 0:
            f_sum += (1 + beta_sq) * precision * recall / (beta_sq * precision + recall)
    if effective_orders == 0:
        return 0.0
    return 100.0 * f_sum / effective_orders


def chrf(
    hypotheses: Sequence[str],
    references: Sequence[str],
    config: ScorerConfig | None = None,
) -> ScoreReport:
    """Character n-gram F-beta; includes word n-grams when configured (chrF++)."""
    config = config or make_scorer("chrf")
    _check_inputs(hypotheses, references)
    n_slots = 3 * (config.char_ngram_max + config.word_ngram_max)
    corpus_stats = [0] * n_slots
    segment_scores: list[float] = []
    for hyp, ref in zip(hypotheses, references):
        stats = _chrf_stats(hyp, ref, config)
        for i in range(n_slots):
            corpus_stats[i] += stats[i]
        segment_scores.append(_chrf_from_stats(stats, config.beta))
    corpus = _chrf_from_stats(corpus_stats, config.beta)
    name = "chrf++" if config.word_ngram_max > 0 else "chrf"
    return ScoreReport(name, corpus, segment_scores, config.fingerprint())


def score_report(
    config: ScorerConfig,
    hypotheses: Sequence[str],
    references: Sequence[str],
) -> ScoreReport:
    """Dispatch to the configured metric and return the full report."""
    if config.kind == "bleu":
        return bleu(hypotheses, references, config)
    if config.kind in ("chrf", "chrf++"):
        return chrf(hypotheses, references, config)
    if config.kind == "custom":
        _check_inputs(hypotheses, references)
        value = float(config.custom_fn(hypotheses, references))
        return ScoreReport(config.name, value, [], config.fingerprint())
    raise ConfigError(f"unknown scorer kind '{config.kind}'")


def score(
    config: ScorerConfig,
    hypotheses: Sequence[str],
    references: Sequence[str],
) -> float:
    """Corpus score under the configured metric (the pruning signal)."""
    return score_report(config, hypotheses, references).corpus_score
