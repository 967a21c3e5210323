"""Sentence-similarity rewards and evaluation metrics.

The training reward is the 4-gram BLEU with equal weights and a brevity
penalty; word accuracy rate (WAR) is reported alongside. Any callable with
the (candidate, reference) -> [0, 1] contract can be registered as a reward,
so the scorer is swappable without touching the trainer.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Tokens = Sequence[int]
SimilarityMetric = Callable[[Tokens, Tokens], float]


def _ngrams(tokens: Tokens, n: int) -> list[tuple]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def bleu_ngram_precision(candidate: Tokens, reference: Tokens, n: int) -> float:
    """Clipped n-gram precision: candidate n-gram matches, each reference
    n-gram usable at most as often as it occurs, over candidate n-gram count."""
    if not 1 <= n <= 4:
        raise ValueError(f"n must be in 1..4, got {n}")
    cand = Counter(_ngrams(candidate, n))
    total = sum(cand.values())
    if total == 0:
        return 0.0
    ref = Counter(_ngrams(reference, n))
    matched = sum(min(count, ref[gram]) for gram, count in cand.items())
    return matched / total


def brevity_penalty(candidate_len: int, reference_len: int) -> float:
    if candidate_len < 0 or reference_len < 0:
        raise ValueError("lengths must be nonnegative")
    if candidate_len == 0:
        return 0.0
    if candidate_len >= reference_len:
        return 1.0
    return math.exp(1.0 - reference_len / candidate_len)


def _smoothed(p: float, candidate: Tokens, n: int) -> float:
    # Zero counts are floored so an early-training reward stays informative;
    # the floor never fires for an exact match, keeping score(m, m) = 1.
    if p > 0.0:
        return p
    return 1.0 / (2.0 * max(len(candidate) - n + 1, 1))


def combined_bleu(candidate: Tokens, reference: Tokens) -> float:
    """Geometric mean of smoothed 1..4-gram precisions (weights 0.25 each)
    times the brevity penalty."""
    bp = brevity_penalty(len(candidate), len(reference))
    if bp == 0.0:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        p = _smoothed(bleu_ngram_precision(candidate, reference, n), candidate, n)
        log_sum += 0.25 * math.log(p)
    return bp * math.exp(log_sum)


def bleu_n(candidate: Tokens, reference: Tokens, n: int) -> float:
    """Cumulative BLEU-n (uniform 1/n weights over orders 1..n) for reporting."""
    bp = brevity_penalty(len(candidate), len(reference))
    if bp == 0.0:
        return 0.0
    log_sum = 0.0
    for j in range(1, n + 1):
        p = _smoothed(bleu_ngram_precision(candidate, reference, j), candidate, j)
        log_sum += math.log(p) / n
    return bp * math.exp(log_sum)


def war(candidate: Tokens, reference: Tokens) -> float:
    """Word accuracy rate: positionwise matches over the reference length."""
    if len(reference) == 0:
        return 0.0
    matches = sum(1 for c, r in zip(candidate, reference) if c == r)
    return matches / len(reference)


_METRICS: dict[str, SimilarityMetric] = {
    "bleu": combined_bleu,
    "war": war,
}


def register_metric(name: str, fn: SimilarityMetric) -> None:
    _METRICS[name] = fn


def get_metric(name: str) -> SimilarityMetric:
    try:
        return _METRICS[name]
    except KeyError:
        raise ValueError(f"unknown similarity metric {name!r}; "
                         f"registered: {sorted(_METRICS)}") from None


@dataclass
class RewardRecord:
    """Per-step rewards of one decoded trajectory: zero everywhere except the
    terminal step, which carries the sentence-level similarity."""

    rewards: np.ndarray
    discount: float = 1.0

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.rewards.ndim != 1 or self.rewards.size == 0:
            raise ValueError("rewards must be a nonempty 1-d array")

    @property
    def terminal(self) -> float:
        return float(self.rewards[-1])


def sparse_rewards(reference: Tokens, decoded: Tokens,
                   metric: SimilarityMetric = combined_bleu,
                   discount: float = 1.0) -> RewardRecord:
    """Reward record for a terminated decoding: zeros, then the similarity
    score at the final step."""
    steps = max(len(decoded), 1)
    rewards = np.zeros(steps)
    rewards[-1] = metric(decoded, reference)
    return RewardRecord(rewards, discount)


def return_from(record: RewardRecord, t: int) -> float:
    """Discounted return G(t) = sum_{k>t} discount^(k-t-1) * r_k, with steps
    numbered 1..T and t in 0..T-1."""
    steps = record.rewards.size
    if not 0 <= t < steps:
        raise ValueError(f"t must be in [0, {steps}), got {t}")
    ks = np.arange(t + 1, steps + 1)
    weights = record.discount ** (ks - t - 1)
    return float(np.dot(weights, record.rewards[t:]))
