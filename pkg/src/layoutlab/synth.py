"""Synthetic payslip-like pages for tests, demos and benchmark inputs.

Two generators:

* :func:`make_split` builds a labeled split whose word-level label counts and
  page count are exactly the requested ones (used to stand in for a private
  corpus whose statistics are known).
* :func:`make_template_corpus` builds pages from a handful of fixed layouts,
  so every token is determined by its layout and neighbours; it is the
  learnability fixture for masked-token reconstruction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import PAYSLIPS_LABELS, LabelSet, Page, RawBox, Word

FILLER = (
    "employee", "employer", "department", "position", "rate", "hours", "units",
    "description", "superannuation", "leave", "balance", "annual", "sick",
    "ordinary", "overtime", "allowance", "payment", "account", "bank", "bsb",
    "reference", "code", "type", "amount", "total", "ytd", "this", "period",
    "classification", "award", "level", "base", "salary", "contribution",
    "fund", "member", "number", "branch", "location", "payroll", "details",
    "earnings", "deductions", "summary", "taxable", "net", "gross", "pay",
    "date", "period", "start", "end", "statement", "company", "pty", "ltd",
)

KEYS = {
    "BEGIN_PAY_PERIOD": ("Period", "Start"),
    "END_PAY_PERIOD": ("Period", "End"),
    "PAY_DATE": ("Pay", "Date"),
    "GROSS_PAY_PERIOD": ("Gross", "Pay"),
    "GROSS_TAXABLE_PERIOD": ("Taxable", "Gross"),
    "NET_PAY_PERIOD": ("Net", "Pay"),
    "PAYG_TAX_PERIOD": ("PAYG", "Tax"),
    "PRE_TAX_DEDUCTION_PERIOD": ("Pre-tax", "Deductions"),
    "POST_TAX_DEDUCTION_PERIOD": ("Post-tax", "Deductions"),
}

DATE_LABELS = {"BEGIN_PAY_PERIOD", "END_PAY_PERIOD", "PAY_DATE"}
MONTHS = ("Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec")
PAGE_SIZES = ((850, 1100), (1700, 2200), (612, 792), (1240, 1754))

# Word-level label distribution of the payslip splits (train, test).
PAYSLIPS_TABLE = {
    "train": {
        "pages": 485,
        "labels": {
            "BEGIN_PAY_PERIOD": 236,
            "END_PAY_PERIOD": 388,
            "PAY_DATE": 461,
            "GROSS_PAY_PERIOD": 481,
            "GROSS_TAXABLE_PERIOD": 245,
            "NET_PAY_PERIOD": 444,
            "PAYG_TAX_PERIOD": 499,
            "PRE_TAX_DEDUCTION_PERIOD": 278,
            "POST_TAX_DEDUCTION_PERIOD": 243,
        },
        "O": 60596,
        "total": 63871,
    },
    "test": {
        "pages": 126,
        "labels": {
            "BEGIN_PAY_PERIOD": 85,
            "END_PAY_PERIOD": 100,
            "PAY_DATE": 101,
            "GROSS_PAY_PERIOD": 117,
            "GROSS_TAXABLE_PERIOD": 90,
            "NET_PAY_PERIOD": 109,
            "PAYG_TAX_PERIOD": 119,
            "PRE_TAX_DEDUCTION_PERIOD": 68,
            "POST_TAX_DEDUCTION_PERIOD": 67,
        },
        "O": 23228,
        "total": 24084,
    },
}


def _value_words(label: str, length: int, rng: np.random.Generator) -> list[str]:
    if label in DATE_LABELS:
        day, month, year = int(rng.integers(1, 29)), int(rng.integers(12)), int(rng.integers(2018, 2024))
        if length == 1:
            return [f"{day:02d}/{month + 1:02d}/{year}"]
        if length == 2:
            return [f"{day:02d}", f"{MONTHS[month]}-{year}"]
        return [f"{day:02d}", MONTHS[month], str(year)]
    amount = f"{rng.integers(10, 9000)}.{rng.integers(0, 100):02d}"
    if length == 1:
        return [f"${amount}"]
    return ["$", amount] + ["AUD"] * (length - 2)


def _filler(rng: np.random.Generator) -> str:
    if rng.random() < 0.2:
        return f"{rng.integers(0, 5000)}.{rng.integers(0, 100):02d}"
    word = FILLER[int(rng.integers(len(FILLER)))]
    return word.capitalize() if rng.random() < 0.3 else word


def _typeset(
    doc_id: str,
    lines: list[list[tuple[str, str]]],
    rng: np.random.Generator,
    size: tuple[int, int] | None = None,
) -> Page:
    """Lay lines of (text, tag) out top to bottom, left to right, inside the page."""
    width, height = size or PAGE_SIZES[int(rng.integers(len(PAGE_SIZES)))]
    margin_x, margin_y = width // 20, height // 25
    usable_h = height - 2 * margin_y
    n_rows = max(1, len(lines))
    pitch = max(2, usable_h // n_rows)
    char_w = max(1, width // 110)
    glyph_h = max(1, min(pitch - 1, height // 70))
    words: list[Word] = []
    tags: list[str] = []
    for r, line in enumerate(lines):
        y0 = min(height - glyph_h, margin_y + r * pitch)
        x = margin_x + int(rng.integers(0, max(1, width // 40)))
        for text, tag in line:
            w = max(1, char_w * len(text))
            x0 = min(x, width - 1)
            x1 = min(width, x0 + w)
            words.append(Word(text, RawBox(x0, y0, x1, y0 + glyph_h)))
            tags.append(tag)
            x = x1 + char_w * 2
    return Page(doc_id, width, height, tuple(words), tuple(tags))


def _build_page(
    doc_id: str,
    mentions: list[tuple[str, int]],
    n_outside: int,
    rng: np.random.Generator,
    words_per_line: int = 8,
) -> Page:
    """A page with the given mentions (label, word length) and exactly ``n_outside`` O words."""
    budget = n_outside
    field_lines: list[list[tuple[str, str]]] = []
    for label, length in mentions:
        key = list(KEYS[label])[: max(0, min(2, budget))]
        budget -= len(key)
        line = [(k, "O") for k in key]
        if key and budget > 0:
            line.append((":", "O"))
            budget -= 1
        value = _value_words(label, length, rng)
        line += [(w, f"{'B' if i == 0 else 'I'}-{label}") for i, w in enumerate(value)]
        field_lines.append(line)
    filler_lines: list[list[tuple[str, str]]] = []
    while budget > 0:
        n = min(budget, int(rng.integers(1, words_per_line + 1)))
        filler_lines.append([(_filler(rng), "O") for _ in range(n)])
        budget -= n
    lines = field_lines + filler_lines
    order = rng.permutation(len(lines))
    return _typeset(doc_id, [lines[i] for i in order], rng)


def _split_lengths(total: int, rng: np.random.Generator, max_len: int = 3) -> list[int]:
    lengths = []
    while total > 0:
        n = min(total, int(rng.integers(1, max_len + 1)) if rng.random() < 0.4 else 1)
        lengths.append(n)
        total -= n
    return lengths


def make_split(
    label_counts: dict[str, int],
    outside: int,
    n_pages: int,
    seed: int = 0,
    prefix: str = "page",
) -> list[Page]:
    """Pages whose word-level counts equal ``label_counts`` and ``outside`` exactly."""
    rng = np.random.default_rng(seed)
    per_page: list[list[tuple[str, int]]] = [[] for _ in range(n_pages)]
    for label, count in label_counts.items():
        for length in _split_lengths(count, rng):
            per_page[int(rng.integers(n_pages))].append((label, length))
    floor = outside // (2 * n_pages)
    extra = rng.multinomial(outside - floor * n_pages, np.full(n_pages, 1.0 / n_pages))
    pages = []
    for i in range(n_pages):
        pages.append(_build_page(f"{prefix}-{i:04d}", per_page[i], floor + int(extra[i]), rng))
    return pages


def make_payslips_like(split: str, seed: int = 0) -> list[Page]:
    table = PAYSLIPS_TABLE[split]
    return make_split(table["labels"], table["O"], table["pages"], seed=seed, prefix=f"synth-{split}")


def manifest(split: str) -> dict:
    return json.loads(json.dumps(PAYSLIPS_TABLE[split]))


def make_labeled_corpus(
    n_pages: int,
    seed: int = 0,
    label_set: LabelSet = PAYSLIPS_LABELS,
    mentions_per_page: tuple[int, int] = (2, 5),
    outside_per_page: tuple[int, int] = (15, 30),
) -> list[Page]:
    """Small labeled pages with random values, for fine-tuning and benchmarks."""
    rng = np.random.default_rng(seed)
    pages = []
    for i in range(n_pages):
        k = int(rng.integers(mentions_per_page[0], mentions_per_page[1] + 1))
        labels = rng.choice(len(label_set.labels), size=k, replace=False)
        mentions = [(label_set.labels[j], int(rng.integers(1, 3))) for j in labels]
        n_out = int(rng.integers(outside_per_page[0], outside_per_page[1] + 1))
        pages.append(_build_page(f"toy-{i:04d}", mentions, n_out, rng, words_per_line=6))
    return pages


@dataclass(frozen=True)
class _Template:
    lines: tuple[tuple[tuple[str, str], ...], ...]
    size: tuple[int, int]


def _make_template(rng: np.random.Generator, label_set: LabelSet, n_fields: int, n_filler_lines: int) -> _Template:
    labels = rng.choice(len(label_set.labels), size=n_fields, replace=False)
    lines = []
    for j in labels:
        label = label_set.labels[j]
        value = _value_words(label, 1, rng)
        lines.append(tuple([(k, "O") for k in KEYS[label]] + [(":", "O")] + [(value[0], f"B-{label}")]))
    for _ in range(n_filler_lines):
        n = int(rng.integers(2, 6))
        lines.append(tuple((str(FILLER[int(rng.integers(len(FILLER)))]), "O") for _ in range(n)))
    order = rng.permutation(len(lines))
    size = PAGE_SIZES[int(rng.integers(len(PAGE_SIZES)))]
    return _Template(tuple(lines[i] for i in order), size)


def make_template_corpus(
    n_pages: int,
    seed: int = 0,
    n_templates: int = 5,
    label_set: LabelSet = PAYSLIPS_LABELS,
) -> list[Page]:
    """Pages instantiated from ``n_templates`` fixed layouts with positional jitter."""
    rng = np.random.default_rng(seed)
    templates = [_make_template(rng, label_set, 4, 4) for _ in range(n_templates)]
    pages = []
    for i in range(n_pages):
        t = templates[i % n_templates]
        pages.append(_typeset(f"tpl-{i:04d}", [list(line) for line in t.lines], rng, t.size))
    return pages


def corpus_summary(pages: Sequence[Page]) -> dict:
    return {"pages": len(pages), "words": sum(len(p.words) for p in pages)}
