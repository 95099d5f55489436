"""Inference latency across encoder depths.

Pages are encoded once up front; only the forward pass sits inside the
timed region, so ingestion and tokenization never show up in the numbers.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .corpus import LabelSet, Page
from .layoutformer import Checkpoint, LayoutEncoder, ModelError
from .metrics import EvalReport
from .textcodec import Batch, Vocab, collate, encode_page
from .trainer import evaluate_model


class BenchError(ValueError):
    pass


@dataclass(frozen=True)
class TimingReport:
    layers: int
    pages: int
    warmup: int
    reps: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    batch_size: int
    max_seq: int
    threads: int

    def __post_init__(self) -> None:
        if self.pages < 1:
            raise BenchError("at least one page must be measured")
        if self.median_ms > self.p95_ms:
            raise BenchError("median exceeds p95")

    def as_dict(self) -> dict:
        return asdict(self)


def time_interleaved(
    fns: Sequence[Callable[[Batch], object]], batches: Sequence[Batch], warmup: int, reps: int
) -> list[np.ndarray]:
    """Per-batch wall-clock seconds of each function, [reps, batches] per function.

    Within every pass the functions take turns, so slow drift of the machine
    (frequency scaling, noisy neighbours) lands on all of them alike.
    """
    if reps < 1 or warmup < 0:
        raise BenchError("reps must be >= 1 and warmup >= 0")
    for _ in range(warmup):
        for fn in fns:
            for b in batches:
                fn(b)
    samples = [np.empty((reps, len(batches))) for _ in fns]
    clock = time.perf_counter
    for r in range(reps):
        for fn, out in zip(fns, samples):
            for i, b in enumerate(batches):
                t0 = clock()
                fn(b)
                out[r, i] = clock() - t0
    return samples


def time_forward(fn: Callable[[Batch], object], batches: Sequence[Batch], warmup: int, reps: int) -> np.ndarray:
    """Per-batch wall-clock seconds of ``fn`` over ``reps`` passes, after ``warmup`` discarded passes."""
    return time_interleaved([fn], batches, warmup, reps)[0]


def encode_batches(pages: Sequence[Page], vocab: Vocab, max_seq: int, batch_size: int = 1) -> list[Batch]:
    if not pages:
        raise BenchError("benchmark corpus is empty")
    encoded = [encode_page(p, vocab, max_seq) for p in pages]
    return [collate(encoded[i : i + batch_size]) for i in range(0, len(encoded), batch_size)]


def _report(samples: np.ndarray, k: int, n_pages: int, warmup: int, batch_size: int, max_seq: int, threads: int):
    per_page_ms = samples.ravel() * 1000.0 / batch_size
    median = float(np.median(per_page_ms))
    p95 = max(median, float(np.percentile(per_page_ms, 95)))
    return TimingReport(
        layers=k,
        pages=n_pages,
        warmup=warmup,
        reps=samples.shape[0],
        mean_ms=float(per_page_ms.mean()),
        median_ms=median,
        p95_ms=p95,
        batch_size=batch_size,
        max_seq=max_seq,
        threads=threads,
    )


def time_inference(
    model: LayoutEncoder | Checkpoint,
    pages: Sequence[Page],
    vocab: Vocab,
    k_layers: int,
    warmup: int = 3,
    reps: int = 20,
    batch_size: int = 1,
    threads: int = 1,
) -> TimingReport:
    """Forward-only latency per page using the bottom ``k_layers`` layers."""
    if isinstance(model, Checkpoint):
        model.check_vocab(vocab.fingerprint)
        model = model.to_model()
    if reps < 3 or warmup < 1:
        raise BenchError("need reps >= 3 and warmup >= 1")
    if not 1 <= k_layers <= model.config.layers:
        raise ModelError(f"k_layers={k_layers} outside 1..{model.config.layers}")
    batches = encode_batches(pages, vocab, model.config.max_seq, batch_size)
    with threadpool_limits(threads):
        samples = time_forward(lambda b: model.forward(b, k_layers=k_layers), batches, warmup, reps)
    return _report(samples, k_layers, len(pages), warmup, batch_size, model.config.max_seq, threads)


@dataclass(frozen=True)
class SweepRow:
    timing: TimingReport
    report: EvalReport | None

    @property
    def f1(self) -> float | None:
        return None if self.report is None else self.report.micro.f1


def depth_sweep(
    ckpt: Checkpoint,
    pages: Sequence[Page],
    vocab: Vocab,
    depths: Sequence[int],
    label_set: LabelSet | None = None,
    warmup: int = 3,
    reps: int = 20,
    batch_size: int = 1,
    threads: int = 1,
) -> list[SweepRow]:
    """Latency per depth, plus micro-F1 when the checkpoint has a tag head and the pages are labeled.

    Depths are timed interleaved within each pass rather than one after another.
    """
    if not depths:
        raise BenchError("no depths requested")
    ckpt.check_vocab(vocab.fingerprint)
    model = ckpt.to_model()
    labeled = label_set is not None and model.num_tags > 0 and all(p.tags is not None for p in pages)
    if labeled and model.num_tags != len(label_set.tags):
        raise BenchError(f"checkpoint has {model.num_tags} tags, label set has {len(label_set.tags)}")
    if reps < 3 or warmup < 1:
        raise BenchError("need reps >= 3 and warmup >= 1")
    for k in depths:
        if not 1 <= k <= model.config.layers:
            raise ModelError(f"k_layers={k} outside 1..{model.config.layers}")
    batches = encode_batches(pages, vocab, model.config.max_seq, batch_size)
    fns = [lambda b, k=k: model.forward(b, k_layers=k) for k in depths]
    with threadpool_limits(threads):
        samples = time_interleaved(fns, batches, warmup, reps)
    rows = []
    for k, sample in zip(depths, samples):
        timing = _report(sample, k, len(pages), warmup, batch_size, model.config.max_seq, threads)
        report = None
        if labeled:
            with threadpool_limits(threads):
                report, _ = evaluate_model(model, pages, vocab, label_set, k_layers=k)
        rows.append(SweepRow(timing, report))
    return rows


def sweep_table(rows: Sequence[SweepRow]) -> str:
    head = f"{'layers':>6} {'pages':>6} {'mean ms':>9} {'median ms':>10} {'p95 ms':>9} {'F1':>7}"
    lines = [head, "-" * len(head)]
    for row in rows:
        t = row.timing
        f1 = "-" if row.f1 is None else f"{row.f1:.4f}"
        lines.append(f"{t.layers:>6} {t.pages:>6} {t.mean_ms:9.3f} {t.median_ms:10.3f} {t.p95_ms:9.3f} {f1:>7}")
    if rows:
        t = rows[0].timing
        lines.append(f"batch={t.batch_size} max_seq={t.max_seq} threads={t.threads} warmup={t.warmup} reps={t.reps}")
    return "\n".join(lines)


def sweep_json(rows: Sequence[SweepRow]) -> str:
    out = []
    for row in rows:
        d = row.timing.as_dict()
        d["f1"] = row.f1
        if row.report is not None:
            d["eval"] = row.report.as_dict()
        out.append(d)
    return json.dumps(out, indent=2)
