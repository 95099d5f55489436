"""Independent reference implementations used to check the library.

Nothing here imports layoutlab scoring code: decoding, matching and the
randomization enumeration are re-derived from their definitions, in plain
Python with exact rational arithmetic where it matters.
"""

from __future__ import annotations

import itertools
from fractions import Fraction


def decode(tags):
    """BIO tags -> list of (start, end_exclusive, label); a stray I-X opens a new mention."""
    out = []
    cur = None
    for i, tag in enumerate(list(tags) + ["O"]):
        kind, _, label = tag.partition("-")
        if cur is not None and not (kind == "I" and label == cur[2]):
            out.append((cur[0], i, cur[2]))
            cur = None
        if kind in ("B", "I") and cur is None:
            cur = [i, None, label]
    return out


def max_matching(pred, gold):
    """Largest one-to-one pairing of equal mentions, by exhaustive search."""
    pred, gold = list(pred), list(gold)

    def best(i, used):
        if i == len(pred):
            return 0
        top = best(i + 1, used)
        for j, g in enumerate(gold):
            if j not in used and g == pred[i]:
                top = max(top, 1 + best(i + 1, used | {j}))
        return top

    return best(0, frozenset())


def prf(pred_pages, gold_pages):
    """Micro precision, recall and F1 as Fractions over pages of tags."""
    tp = n_pred = n_gold = 0
    for p_tags, g_tags in zip(pred_pages, gold_pages):
        p, g = decode(p_tags), decode(g_tags)
        tp += max_matching(p, g)
        n_pred += len(p)
        n_gold += len(g)
    precision = Fraction(tp, n_pred) if n_pred else Fraction(0)
    recall = Fraction(tp, n_gold) if n_gold else Fraction(0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else Fraction(0)
    return tp, precision, recall, f1


def exact_significance(a, b, tie=Fraction(1, 10**12)):
    """Fraction of the 2**n swap assignments whose |mean difference| reaches the observed one.

    Means within ``tie`` of the observed one count as reaching it.
    """
    diffs = [Fraction(x) - Fraction(y) for x, y in zip(a, b)]
    n = len(diffs)
    observed = abs(sum(diffs)) / n
    hits = 0
    for signs in itertools.product((1, -1), repeat=n):
        if abs(sum(s * d for s, d in zip(signs, diffs))) / n >= observed - tie:
            hits += 1
    return Fraction(hits, 2 ** len(diffs))
