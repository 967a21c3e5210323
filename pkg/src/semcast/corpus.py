"""Corpus ingestion and synthesis.

A template-grammar generator ships as the default corpus source so every
experiment is runnable with zero external data; a plain-text file (one
sentence per line) can be ingested instead. Sentences outside the length
bounds or containing out-of-vocabulary words are dropped and counted, and
the train/test split is an order-preserving 4:1 partition drawn from the
experiment seed.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .vocab import Vocabulary

_WORD_RE = re.compile(r"[a-z0-9']+")

_ROLE_SHARES = (("det", 0.06), ("adj", 0.22), ("noun", 0.38), ("verb", 0.24), ("adv", 0.10))

_TEMPLATES = (
    ("det", "noun", "verb", "adv"),
    ("adj", "noun", "verb", "noun"),
    ("det", "adj", "noun", "verb", "adv"),
    ("det", "noun", "verb", "det", "noun"),
    ("det", "adj", "noun", "verb", "det", "noun"),
    ("noun", "verb", "det", "adj", "noun", "adv"),
    ("det", "adj", "noun", "verb", "det", "adj", "noun"),
    ("det", "noun", "adv", "verb", "det", "adj", "noun"),
    ("det", "adj", "adj", "noun", "verb", "det", "adj", "noun"),
    ("adj", "noun", "verb", "det", "noun", "adv", "adj", "noun"),
)


@dataclass(frozen=True)
class SyntheticSpec:
    vocab_size: int = 120
    n_sentences: int = 1000
    min_len: int = 4
    max_len: int = 8

    def __post_init__(self):
        if self.vocab_size < len(_ROLE_SHARES) + 3:
            raise ValueError(f"vocab_size too small: {self.vocab_size}")


@dataclass
class CorpusCounts:
    kept: int = 0
    dropped_short: int = 0
    dropped_long: int = 0
    dropped_oov: int = 0


@dataclass
class Dataset:
    vocabulary: Vocabulary
    train: list[list[int]]
    test: list[list[int]]
    counts: CorpusCounts = field(default_factory=CorpusCounts)

    @property
    def max_len(self) -> int:
        return max(len(s) for s in self.train + self.test)


def _word_pools(vocab_size: int) -> dict[str, list[str]]:
    budget = vocab_size - 3  # sentinels take three ids
    pools: dict[str, list[str]] = {}
    allotted = 0
    for i, (role, share) in enumerate(_ROLE_SHARES):
        n = max(1, int(round(share * budget)))
        if i == len(_ROLE_SHARES) - 1:
            n = budget - allotted
        allotted += n
        pools[role] = [f"{role}{j}" for j in range(n)]
    return pools


def synthetic_sentences(spec: SyntheticSpec, rng: np.random.Generator) -> list[list[str]]:
    """Draw sentences from the template grammar, lengths inside the bounds."""
    pools = _word_pools(spec.vocab_size)
    templates = [t for t in _TEMPLATES if spec.min_len <= len(t) <= spec.max_len]
    if not templates:
        raise ValueError(f"no templates fit length bounds [{spec.min_len}, {spec.max_len}]")
    out = []
    for _ in range(spec.n_sentences):
        template = templates[rng.integers(len(templates))]
        out.append([pools[role][rng.integers(len(pools[role]))] for role in template])
    return out


def tokenize_line(line: str) -> list[str]:
    return _WORD_RE.findall(line.lower())


def read_corpus_file(path) -> list[list[str]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [tokenize_line(line) for line in lines if line.strip()]


def _build_vocabulary(sentences: list[list[str]], cap: int | None) -> Vocabulary:
    freq: dict[str, int] = {}
    for sent in sentences:
        for w in sent:
            freq[w] = freq.get(w, 0) + 1
    words = sorted(freq, key=lambda w: (-freq[w], w))
    if cap is not None:
        words = words[:max(cap - 3, 0)]
    return Vocabulary.from_words(words)


def ingest_corpus(
    sentences: list[list[str]],
    *,
    vocab_cap: int | None = None,
    min_len: int = 4,
    max_len: int = 30,
    train_fraction: float = 0.8,
    seed: int = 0,
) -> Dataset:
    """Filter, tokenize and split raw sentences into a ready dataset."""
    if not 1 <= min_len <= max_len <= 64:
        raise ValueError(f"length bounds [{min_len}, {max_len}] must lie within [1, 64]")
    counts = CorpusCounts()
    in_bounds = []
    for sent in sentences:
        if len(sent) < min_len:
            counts.dropped_short += 1
        elif len(sent) > max_len:
            counts.dropped_long += 1
        else:
            in_bounds.append(sent)
    vocabulary = _build_vocabulary(in_bounds, vocab_cap)
    encoded = []
    for sent in in_bounds:
        if all(w in vocabulary for w in sent):
            encoded.append(vocabulary.encode(sent))
        else:
            counts.dropped_oov += 1
    counts.kept = len(encoded)
    if not encoded:
        raise ValueError(
            f"corpus empty after filtering (short={counts.dropped_short}, "
            f"long={counts.dropped_long}, oov={counts.dropped_oov})")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(encoded))
    n_train = int(round(train_fraction * len(encoded)))
    train_ids = np.sort(order[:n_train])
    test_ids = np.sort(order[n_train:])
    return Dataset(
        vocabulary=vocabulary,
        train=[encoded[i] for i in train_ids],
        test=[encoded[i] for i in test_ids],
        counts=counts,
    )


def load_corpus(source, *, vocab_cap=None, min_len=4, max_len=30, seed=0) -> Dataset:
    """Dispatch on the corpus source: a SyntheticSpec or a text-file path."""
    if isinstance(source, SyntheticSpec):
        sentences = synthetic_sentences(source, np.random.default_rng(seed))
    else:
        sentences = read_corpus_file(source)
    return ingest_corpus(sentences, vocab_cap=vocab_cap, min_len=min_len,
                         max_len=max_len, seed=seed)
