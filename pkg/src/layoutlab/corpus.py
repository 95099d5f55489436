"""Layout-annotated pages: data model, JSONL ingestion, box normalization, label counts."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

GRID = 1000


class CorpusError(ValueError):
    """Raised for malformed corpus records or invariant violations."""


@dataclass(frozen=True, slots=True)
class RawBox:
    """Word box in page pixel units."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self) -> None:
        if min(self.x0, self.y0, self.x1, self.y1) < 0:
            raise CorpusError(f"negative coordinate in {self.as_tuple()}")
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise CorpusError(f"inverted box {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    def within(self, width: int, height: int) -> bool:
        return self.x1 <= width and self.y1 <= height


@dataclass(frozen=True, slots=True)
class BBox:
    """Box on the 0..1000 grid; width and height are derived."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self) -> None:
        if not (0 <= self.x0 <= self.x1 <= GRID and 0 <= self.y0 <= self.y1 <= GRID):
            raise CorpusError(f"box {self.as_tuple()} is not on the 0..{GRID} grid")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True, slots=True)
class Word:
    text: str
    box: RawBox

    def __post_init__(self) -> None:
        if not self.text:
            raise CorpusError("empty word text")
        if "\n" in self.text or "\r" in self.text:
            raise CorpusError(f"word text contains a newline: {self.text!r}")


@dataclass(frozen=True, slots=True)
class Page:
    """One OCR'd page. ``tags`` is None for unlabeled (pre-training) pages."""

    doc_id: str
    width: int
    height: int
    words: tuple[Word, ...]
    tags: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise CorpusError(f"page {self.doc_id!r}: dimensions must be positive")
        for w in self.words:
            if not w.box.within(self.width, self.height):
                raise CorpusError(
                    f"page {self.doc_id!r}: box {w.box.as_tuple()} outside page "
                    f"{self.width}x{self.height}"
                )
        if self.tags is not None and len(self.tags) != len(self.words):
            raise CorpusError(
                f"page {self.doc_id!r}: length mismatch, {len(self.words)} words vs {len(self.tags)} tags"
            )

    @property
    def texts(self) -> list[str]:
        return [w.text for w in self.words]


@dataclass(frozen=True)
class LabelSet:
    """Ordered mention labels. The BIO tagset is ``O`` then ``B-L``/``I-L`` per label."""

    labels: tuple[str, ...]
    tags: tuple[str, ...] = field(init=False, repr=False)
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if len(set(labels)) != len(labels):
            raise CorpusError("duplicate label names")
        for name in labels:
            if not name or name == "O" or any(c.isspace() for c in name):
                raise CorpusError(f"illegal label name {name!r}")
        tags = ["O"]
        for name in labels:
            tags += [f"B-{name}", f"I-{name}"]
        object.__setattr__(self, "tags", tuple(tags))
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(tags)})

    def __len__(self) -> int:
        return len(self.labels)

    def tag_id(self, tag: str) -> int:
        try:
            return self._index[tag]
        except KeyError:
            raise CorpusError(f"unknown tag {tag!r}") from None

    def is_tag(self, tag: str) -> bool:
        return tag in self._index

    @classmethod
    def read(cls, path: str | os.PathLike) -> "LabelSet":
        with open(path, encoding="utf-8") as fh:
            names = [line.strip() for line in fh]
        return cls(tuple(n for n in names if n))

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(f"{n}\n" for n in self.labels)


PAYSLIPS_LABELS = LabelSet(
    (
        "BEGIN_PAY_PERIOD",
        "END_PAY_PERIOD",
        "PAY_DATE",
        "GROSS_PAY_PERIOD",
        "GROSS_TAXABLE_PERIOD",
        "NET_PAY_PERIOD",
        "PAYG_TAX_PERIOD",
        "PRE_TAX_DEDUCTION_PERIOD",
        "POST_TAX_DEDUCTION_PERIOD",
    )
)


@dataclass(frozen=True)
class LabelStats:
    """Word-level label distribution of one split."""

    counts: dict[str, int]
    outside: int
    total: int
    pages: int = 0

    def __post_init__(self) -> None:
        if sum(self.counts.values()) + self.outside != self.total:
            raise CorpusError("label counts do not sum to total")

    def as_dict(self) -> dict:
        return {"pages": self.pages, "labels": dict(self.counts), "O": self.outside, "total": self.total}


def normalize_bbox(box: RawBox, page_width: int, page_height: int) -> BBox:
    """Map pixel coordinates onto the integer 0..1000 grid with ``floor(c*1000/D)``."""
    if page_width <= 0 or page_height <= 0:
        raise CorpusError(f"page dimensions must be positive, got {page_width}x{page_height}")
    if not box.within(page_width, page_height):
        raise CorpusError(f"box {box.as_tuple()} outside page {page_width}x{page_height}")

    def scale(c: int, d: int) -> int:
        return min(GRID, max(0, (c * GRID) // d))

    return BBox(
        scale(box.x0, page_width),
        scale(box.y0, page_height),
        scale(box.x1, page_width),
        scale(box.y1, page_height),
    )


def page_from_record(record: dict, label_set: LabelSet | None = None) -> Page:
    if not isinstance(record, dict):
        raise CorpusError("record is not a JSON object")
    try:
        doc_id = record["id"]
        width = record["width"]
        height = record["height"]
        raw_words = record["words"]
    except KeyError as exc:
        raise CorpusError(f"missing field {exc.args[0]!r}") from None
    if not isinstance(doc_id, str):
        raise CorpusError("'id' must be a string")
    for name, value in (("width", width), ("height", height)):
        if not isinstance(value, int) or isinstance(value, bool):
            raise CorpusError(f"{name!r} must be an integer")
    if not isinstance(raw_words, list):
        raise CorpusError("'words' must be an array")
    words = []
    for w in raw_words:
        try:
            text, box = w["text"], w["box"]
        except (KeyError, TypeError):
            raise CorpusError("word entries need 'text' and 'box'") from None
        if not isinstance(text, str):
            raise CorpusError("word 'text' must be a string")
        if (
            not isinstance(box, list)
            or len(box) != 4
            or not all(isinstance(c, int) and not isinstance(c, bool) for c in box)
        ):
            raise CorpusError(f"box must be 4 integers, got {box!r}")
        words.append(Word(text, RawBox(*box)))
    tags = record.get("tags")
    if tags is not None:
        if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
            raise CorpusError("'tags' must be an array of strings")
        if len(tags) != len(words):
            raise CorpusError(f"length mismatch: {len(words)} words vs {len(tags)} tags")
        if label_set is not None:
            for t in tags:
                if not label_set.is_tag(t):
                    raise CorpusError(f"unknown tag {t!r}")
        tags = tuple(tags)
    return Page(doc_id, width, height, tuple(words), tags)


def page_to_record(page: Page) -> dict:
    record = {
        "id": page.doc_id,
        "width": page.width,
        "height": page.height,
        "words": [{"text": w.text, "box": list(w.box.as_tuple())} for w in page.words],
    }
    if page.tags is not None:
        record["tags"] = list(page.tags)
    return record


def iter_corpus(path: str | os.PathLike, label_set: LabelSet | None = None) -> Iterator[Page]:
    """Stream pages from a JSONL corpus, one page per line."""
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            try:
                yield page_from_record(json.loads(line), label_set)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"malformed JSON at line {lineno}: {exc.msg}") from None
            except CorpusError as exc:
                raise CorpusError(f"{exc} at line {lineno}") from None


def parse_corpus(path: str | os.PathLike, label_set: LabelSet | None = None) -> list[Page]:
    return list(iter_corpus(path, label_set))


def write_corpus(pages: Iterable[Page], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for page in pages:
            fh.write(json.dumps(page_to_record(page), ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


def label_stats(pages: Sequence[Page], label_set: LabelSet) -> LabelStats:
    counts = {name: 0 for name in label_set.labels}
    outside = 0
    total = 0
    for page in pages:
        if page.tags is None:
            raise CorpusError(f"page {page.doc_id!r} carries no tags")
        for tag in page.tags:
            if not label_set.is_tag(tag):
                raise CorpusError(f"page {page.doc_id!r}: unknown tag {tag!r}")
            total += 1
            if tag == "O":
                outside += 1
            else:
                counts[tag[2:]] += 1
    return LabelStats(counts, outside, total, pages=len(pages))
