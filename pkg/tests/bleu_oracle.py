"""Brute-force n-gram scorer, written independently of the package metrics.

Clipping is realized by greedy one-to-one matching of candidate n-grams to
reference n-gram occurrences, with explicit loops and no Counter, so it can
serve as an oracle for the production implementation.
"""

import math


def oracle_precision(candidate, reference, n):
    cand_grams = [tuple(candidate[i:i + n]) for i in range(len(candidate) - n + 1)]
    if not cand_grams:
        return 0.0
    ref_grams = [tuple(reference[i:i + n]) for i in range(len(reference) - n + 1)]
    used = [False] * len(ref_grams)
    matched = 0
    for gram in cand_grams:
        for j, ref_gram in enumerate(ref_grams):
            if not used[j] and ref_gram == gram:
                used[j] = True
                matched += 1
                break
    return matched / len(cand_grams)


def oracle_brevity(candidate, reference):
    if len(candidate) == 0:
        return 0.0
    if len(candidate) >= len(reference):
        return 1.0
    return math.exp(1.0 - len(reference) / len(candidate))


def oracle_combined(candidate, reference):
    bp = oracle_brevity(candidate, reference)
    if bp == 0.0:
        return 0.0
    total = 0.0
    for n in (1, 2, 3, 4):
        p = oracle_precision(candidate, reference, n)
        if p == 0.0:
            denom = len(candidate) - n + 1
            p = 1.0 / (2.0 * (denom if denom > 0 else 1))
        total += 0.25 * math.log(p)
    return bp * math.exp(total)
