"""Exact-match mention scoring and paired randomization significance tests."""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import LabelSet
from .seeding import derive_rng
from .textcodec import Mention, tags_to_spans

HIGHLY_SIGNIFICANT = 0.01
MAX_EXACT_N = 20
# shuffled and observed statistics that agree to this many units are a tie
TIE_TOLERANCE = 1e-12


class MetricsError(ValueError):
    pass


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        # 2PR/(P+R) rewritten over counts: one rounding instead of three
        return 2 * self.tp / (2 * self.tp + self.fp + self.fn) if self.tp else 0.0

    def __iadd__(self, other: "Counts") -> "Counts":
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    def as_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


@dataclass
class EvalReport:
    per_label: dict[str, Counts]
    documents: int = 0
    micro: Counts = field(init=False)

    def __post_init__(self) -> None:
        self.micro = Counts()
        for c in self.per_label.values():
            self.micro += c

    def as_dict(self) -> dict:
        return {
            "documents": self.documents,
            "micro": self.micro.as_dict(),
            "per_label": {k: v.as_dict() for k, v in self.per_label.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)

    def format_table(self) -> str:
        width = max([len("micro")] + [len(k) for k in self.per_label])
        head = f"{'label':<{width}}  {'tp':>5} {'fp':>5} {'fn':>5}  {'P':>6} {'R':>6} {'F1':>6}"
        rows = [head, "-" * len(head)]
        for name, c in list(self.per_label.items()) + [("micro", self.micro)]:
            rows.append(
                f"{name:<{width}}  {c.tp:>5} {c.fp:>5} {c.fn:>5}  "
                f"{c.precision:6.4f} {c.recall:6.4f} {c.f1:6.4f}"
            )
        return "\n".join(rows)


def match_mentions(pred: Sequence[Mention], gold: Sequence[Mention]) -> Counter:
    """Multiset intersection on (start, end, label): one gold mention absorbs one prediction."""
    return Counter(pred) & Counter(gold)


def _check_aligned(pred: Sequence[Sequence[str]], gold: Sequence[Sequence[str]]) -> None:
    if len(pred) != len(gold):
        raise MetricsError(f"page misalignment: {len(pred)} predicted vs {len(gold)} gold pages")
    for i, (p, g) in enumerate(zip(pred, gold)):
        if len(p) != len(g):
            raise MetricsError(f"length mismatch on page {i}: {len(p)} vs {len(g)} tags")


def evaluate(
    pred: Sequence[Sequence[str]],
    gold: Sequence[Sequence[str]],
    label_set: LabelSet | None = None,
) -> EvalReport:
    _check_aligned(pred, gold)
    per_label: dict[str, Counts] = {name: Counts() for name in (label_set.labels if label_set else ())}
    for p_tags, g_tags in zip(pred, gold):
        p_spans = tags_to_spans(p_tags, label_set)
        g_spans = tags_to_spans(g_tags, label_set)
        hits = match_mentions(p_spans, g_spans)
        for m in p_spans:
            per_label.setdefault(m.label, Counts()).fp += 1
        for m in g_spans:
            per_label.setdefault(m.label, Counts()).fn += 1
        for m, k in hits.items():
            c = per_label[m.label]
            c.tp += k
            c.fp -= k
            c.fn -= k
    return EvalReport(per_label, documents=len(pred))


def per_document_f1(pred: Sequence[str], gold: Sequence[str], label_set: LabelSet | None = None) -> float:
    """Micro F1 of a single page; a page with no mentions on either side scores 1.0."""
    _check_aligned([pred], [gold])
    p_spans = tags_to_spans(pred, label_set)
    g_spans = tags_to_spans(gold, label_set)
    if not p_spans and not g_spans:
        return 1.0
    return evaluate([pred], [gold], label_set).micro.f1


@dataclass(frozen=True)
class SignificanceResult:
    observed_diff: float
    iterations: int
    exceed_count: int
    significance_level: float
    method: str = "approximate"

    @property
    def highly_significant(self) -> bool:
        return self.significance_level < HIGHLY_SIGNIFICANT

    def banner(self) -> str:
        verdict = (
            f"highly significant (< {HIGHLY_SIGNIFICANT})"
            if self.highly_significant
            else f"not highly significant (>= {HIGHLY_SIGNIFICANT})"
        )
        return (
            f"{self.method} randomization: |diff| = {self.observed_diff:.6f}, "
            f"{self.exceed_count}/{self.iterations} shuffles >= observed, "
            f"significance = {self.significance_level:.6f} -> {verdict}"
        )

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "observed_diff": self.observed_diff,
            "iterations": self.iterations,
            "exceed_count": self.exceed_count,
            "significance_level": self.significance_level,
            "highly_significant": self.highly_significant,
        }


def _paired_diffs(scores_a: Sequence[float], scores_b: Sequence[float]) -> np.ndarray:
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise MetricsError(f"score lists must be aligned: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise MetricsError("score lists are empty")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise MetricsError("scores must be finite")
    return a - b


def _exceeds(shuffled: np.ndarray, observed: float) -> np.ndarray:
    return shuffled >= observed - TIE_TOLERANCE


def _mean_abs(signs: np.ndarray, diffs: np.ndarray) -> np.ndarray:
    """|mean(a') - mean(b')| per row of +/-1 swap signs."""
    return np.abs((signs * diffs).sum(axis=-1)) / diffs.size


def approx_rand_test(
    scores_a: Sequence[float],
    scores_b: Sequence[float],
    iterations: int = 9999,
    seed: int = 0,
) -> SignificanceResult:
    """Paired approximate randomization on per-document scores.

    Each iteration swaps every (a_i, b_i) pair independently with probability
    1/2, drawing from the stream ``(seed, "swap", iteration)``, and counts the
    shuffles whose absolute mean difference reaches the observed one.
    """
    if iterations < 1:
        raise MetricsError("iterations must be >= 1")
    diffs = _paired_diffs(scores_a, scores_b)
    observed = float(_mean_abs(np.ones_like(diffs), diffs))
    exceed = 0
    for it in range(iterations):
        swap = derive_rng(seed, "swap", it).random(diffs.size) < 0.5
        signs = np.where(swap, -1.0, 1.0)
        exceed += int(_exceeds(_mean_abs(signs, diffs), observed))
    return SignificanceResult(observed, iterations, exceed, exceed / iterations, "approximate")


def exact_rand_test(scores_a: Sequence[float], scores_b: Sequence[float]) -> SignificanceResult:
    """Enumerate all 2**n swap assignments (n <= 20)."""
    diffs = _paired_diffs(scores_a, scores_b)
    n = diffs.size
    if n > MAX_EXACT_N:
        raise MetricsError(f"exact test enumerates 2**n assignments; n={n} exceeds {MAX_EXACT_N}")
    observed = float(_mean_abs(np.ones_like(diffs), diffs))
    total = 1 << n
    exceed = 0
    chunk = 1 << min(n, 14)
    for start in range(0, total, chunk):
        codes = np.arange(start, min(start + chunk, total), dtype=np.int64)
        bits = (codes[:, None] >> np.arange(n)) & 1
        signs = 1.0 - 2.0 * bits
        exceed += int(_exceeds(_mean_abs(signs, diffs), observed).sum())
    return SignificanceResult(observed, total, exceed, exceed / total, "exact")


def read_scores(path: str | os.PathLike) -> list[float]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(float(line))
            except ValueError:
                raise MetricsError(f"{path}:{lineno}: not a number: {line!r}") from None
    return out


def write_scores(scores: Sequence[float], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{s!r}\n" for s in scores)
