import json

import pytest

from layoutlab.corpus import LabelSet, Page, RawBox, Word

LABELS = LabelSet(("PAY_DATE", "NET_PAY_PERIOD", "A", "B", "C"))


@pytest.fixture
def labels():
    return LABELS


def make_page(texts, tags=None, width=850, height=1100, doc_id="p"):
    words = []
    for i, text in enumerate(texts):
        x0 = (i * 40) % (width - 40)
        words.append(Word(text, RawBox(x0, 10, x0 + 30, 30)))
    return Page(doc_id, width, height, tuple(words), None if tags is None else tuple(tags))


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


# acceptance verdicts, filled by tests/test_acceptance.py
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
