"""Word-level vocabulary, page encoding, and the BIO tag codec."""

from __future__ import annotations

import hashlib
import os
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .corpus import GRID, BBox, LabelSet, Page, normalize_bbox

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
CLS_BOX = BBox(0, 0, 0, 0)
SEP_BOX = BBox(GRID, GRID, GRID, GRID)

VOCAB_HEADER = "#vocab v1"


class CodecError(ValueError):
    pass


class Vocab:
    """Dense token table; ids 0-4 are the reserved specials."""

    def __init__(self, tokens: Sequence[str], lowercase: bool = True):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise CodecError("vocabulary must start with the reserved tokens")
        index: dict[str, int] = {}
        for i, tok in enumerate(tokens):
            if tok in index:
                raise CodecError(f"duplicate token {tok!r}")
            if not tok or "\n" in tok:
                raise CodecError(f"illegal token {tok!r}")
            index[tok] = i
        self.tokens = tuple(tokens)
        self.lowercase = lowercase
        self._index = index

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens and self.lowercase == other.lowercase

    def __repr__(self) -> str:
        return f"Vocab(size={len(self)}, lowercase={self.lowercase})"

    def normalize(self, text: str) -> str:
        return text.lower() if self.lowercase else text

    def lookup(self, text: str) -> int:
        i = self._index.get(self.normalize(text), UNK)
        # literal "[MASK]" etc. in page text must not become a special
        return UNK if i < len(RESERVED) else i

    def serialize(self) -> str:
        head = f"{VOCAB_HEADER} lowercase={int(self.lowercase)}\n"
        return head + "".join(f"{t}\n" for t in self.tokens)

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.serialize())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocab":
        with open(path, encoding="utf-8", newline="\n") as fh:
            lines = fh.read().split("\n")
        header = lines[0].split()
        if len(header) != 3 or " ".join(header[:2]) != VOCAB_HEADER or not header[2].startswith("lowercase="):
            raise CodecError(f"{path}: bad vocabulary header {lines[0]!r}")
        flag = header[2].split("=", 1)[1]
        if flag not in ("0", "1"):
            raise CodecError(f"{path}: bad lowercase flag {flag!r}")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines[1:], lowercase=flag == "1")


def build_vocab(pages: Iterable[Page], max_size: int = 30000, min_freq: int = 1, lowercase: bool = True) -> Vocab:
    """Rank words by descending frequency, ties broken lexicographically."""
    if max_size < len(RESERVED) + 1:
        raise CodecError(f"max_size must be >= {len(RESERVED) + 1}")
    if min_freq < 1:
        raise CodecError("min_freq must be >= 1")
    counts: Counter[str] = Counter()
    n_pages = 0
    for page in pages:
        n_pages += 1
        counts.update(w.lower() if lowercase else w for w in page.texts)
    if n_pages == 0:
        raise CodecError("cannot build a vocabulary from an empty corpus")
    for special in RESERVED:
        counts.pop(special, None)
    ranked = sorted((tok for tok, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocab(list(RESERVED) + ranked[: max_size - len(RESERVED)], lowercase=lowercase)


@dataclass(frozen=True)
class EncodedPage:
    token_ids: tuple[int, ...]
    boxes: tuple[BBox, ...]
    positions: tuple[int, ...]
    attn_mask: tuple[int, ...]
    word_index: tuple[int | None, ...]
    n_words: int = 0

    def __len__(self) -> int:
        return len(self.token_ids)


def encode_page(page: Page, vocab: Vocab, max_seq: int) -> EncodedPage:
    """``[CLS] w_1 .. w_k [SEP]`` with k = min(#words, max_seq - 2)."""
    if max_seq < 3:
        raise CodecError("max_seq must be >= 3")
    keep = min(len(page.words), max_seq - 2)
    ids = [CLS]
    boxes = [CLS_BOX]
    word_index: list[int | None] = [None]
    for i, word in enumerate(page.words[:keep]):
        ids.append(vocab.lookup(word.text))
        boxes.append(normalize_bbox(word.box, page.width, page.height))
        word_index.append(i)
    ids.append(SEP)
    boxes.append(SEP_BOX)
    word_index.append(None)
    n = len(ids)
    return EncodedPage(tuple(ids), tuple(boxes), tuple(range(n)), (1,) * n, tuple(word_index), len(page.words))


@dataclass
class Batch:
    """Right-padded arrays for a group of encoded pages."""

    token_ids: np.ndarray  # [B, S] int64
    boxes: np.ndarray  # [B, S, 4] int64
    positions: np.ndarray  # [B, S] int64
    attn_mask: np.ndarray  # [B, S] int8
    word_index: np.ndarray  # [B, S] int64, -1 for specials and padding

    @property
    def shape(self) -> tuple[int, int]:
        return self.token_ids.shape

    def replace_tokens(self, token_ids: np.ndarray) -> "Batch":
        return Batch(token_ids, self.boxes, self.positions, self.attn_mask, self.word_index)


def collate(encoded: Sequence[EncodedPage], pad_to: int | None = None) -> Batch:
    if not encoded:
        raise CodecError("cannot collate an empty batch")
    s = max(len(e) for e in encoded)
    if pad_to is not None:
        if pad_to < s:
            raise CodecError(f"pad_to={pad_to} shorter than longest sequence {s}")
        s = pad_to
    b = len(encoded)
    ids = np.full((b, s), PAD, dtype=np.int64)
    boxes = np.zeros((b, s, 4), dtype=np.int64)
    mask = np.zeros((b, s), dtype=np.int8)
    widx = np.full((b, s), -1, dtype=np.int64)
    for r, e in enumerate(encoded):
        n = len(e)
        ids[r, :n] = e.token_ids
        boxes[r, :n] = [bx.as_tuple() for bx in e.boxes]
        mask[r, :n] = e.attn_mask
        widx[r, :n] = [-1 if w is None else w for w in e.word_index]
    positions = np.broadcast_to(np.arange(s, dtype=np.int64), (b, s)).copy()
    return Batch(ids, boxes, positions, mask, widx)


@dataclass(frozen=True, order=True, slots=True)
class Mention:
    """Labeled half-open word span ``[start, end)``."""

    start: int
    end: int
    label: str

    def __post_init__(self) -> None:
        if not 0 <= self.start < self.end:
            raise CodecError(f"bad span [{self.start}, {self.end})")
        if not self.label or self.label == "O":
            raise CodecError(f"bad mention label {self.label!r}")


def parse_tag(tag: str, label_set: LabelSet | None = None) -> tuple[str, str | None]:
    if tag == "O":
        return "O", None
    prefix, sep, label = tag.partition("-")
    if not sep or prefix not in ("B", "I") or not label:
        raise CodecError(f"unparseable tag {tag!r}")
    if label_set is not None and label not in label_set.labels:
        raise CodecError(f"tag {tag!r} names an unknown label")
    return prefix, label


def tags_to_spans(tags: Sequence[str], label_set: LabelSet | None = None) -> list[Mention]:
    """Decode BIO tags to mentions. An ``I-L`` that cannot continue an ``L`` mention opens one."""
    mentions: list[Mention] = []
    start = -1
    current: str | None = None
    for i, tag in enumerate(tags):
        prefix, label = parse_tag(tag, label_set)
        if prefix == "I" and label == current:
            continue
        if current is not None:
            mentions.append(Mention(start, i, current))
        if prefix == "O":
            current = None
        else:
            start, current = i, label
    if current is not None:
        mentions.append(Mention(start, len(tags), current))
    return mentions


def spans_to_tags(mentions: Sequence[Mention], length: int) -> list[str]:
    tags = ["O"] * length
    for m in sorted(mentions):
        if m.end > length:
            raise CodecError(f"mention [{m.start}, {m.end}) exceeds length {length}")
        if any(t != "O" for t in tags[m.start : m.end]):
            raise CodecError(f"mention [{m.start}, {m.end}) overlaps another mention")
        tags[m.start] = f"B-{m.label}"
        for i in range(m.start + 1, m.end):
            tags[i] = f"I-{m.label}"
    return tags
