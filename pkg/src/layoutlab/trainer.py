"""MLM pre-training, NER fine-tuning, and the multi-seed runner.

All randomness comes from :func:`layoutlab.seeding.derive_rng` streams keyed
by purpose (``"init"``, ``"shuffle"``, ``"mask"``, ``"dropout"``,
``"head-init"``), so a run is a pure function of its inputs and seed.
"""

from __future__ import annotations

import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensorcore as tc
from .corpus import LabelSet, Page
from .layoutformer import Checkpoint, LayoutEncoder, ModelConfig
from .metrics import EvalReport, evaluate, per_document_f1
from .seeding import derive_rng
from .tensorcore import IGNORE_INDEX, Parameter, Tape
from .textcodec import MASK, RESERVED, Batch, EncodedPage, Vocab, collate, encode_page

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    batch_size: int = 80
    epochs: int = 5
    base_lr: float = 5e-5
    warmup_fraction: float = 0.05
    mask_rate: float = 0.15
    seed: int = 0
    max_seq: int = 128
    threads: int = 1

    def __post_init__(self) -> None:
        if not 0.0 < self.warmup_fraction < 1.0:
            raise TrainingError("warmup_fraction must be in (0, 1)")
        if not 0.0 < self.mask_rate < 1.0:
            raise TrainingError("mask_rate must be in (0, 1)")
        if self.base_lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise TrainingError("base_lr, batch_size and epochs must be positive")


@dataclass(frozen=True)
class FinetuneConfig:
    batch_size: int = 16
    epochs: int = 10
    lr: float = 5e-5
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise TrainingError("lr, batch_size and epochs must be positive")


def lr_schedule(step: int, total: int, warmup_fraction: float, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` over ``round(warmup_fraction*total)`` steps, then half-cosine to 0."""
    if total <= 0:
        raise TrainingError("total steps must be positive")
    if not 0 <= step <= total:
        raise TrainingError(f"step {step} outside 0..{total}")
    warmup = max(1, math.floor(warmup_fraction * total + 0.5))
    if step < warmup:
        return base_lr * step / warmup
    if total == warmup:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / (total - warmup)))


def mask_batch(batch: Batch, mask_rate: float, rng: np.random.Generator, vocab_size: int) -> tuple[Batch, np.ndarray]:
    """Corrupt word tokens for MLM.

    Per page, ``max(1, round(mask_rate * n))`` of the ``n`` word positions are
    chosen; 80% become MASK, 10% a random non-special id, 10% stay. Returns the
    corrupted batch and targets (original id at chosen positions, IGNORE_INDEX
    elsewhere). Boxes and positions are untouched.
    """
    first_word = len(RESERVED)
    if vocab_size <= first_word:
        raise TrainingError("vocabulary has no non-special tokens")
    ids = batch.token_ids.copy()
    targets = np.full(ids.shape, IGNORE_INDEX, dtype=np.int64)
    for row in range(ids.shape[0]):
        candidates = np.nonzero(batch.word_index[row] >= 0)[0]
        if candidates.size == 0:
            continue
        count = max(1, math.floor(mask_rate * candidates.size + 0.5))
        chosen = np.sort(rng.choice(candidates, size=count, replace=False))
        targets[row, chosen] = ids[row, chosen]
        action = rng.random(count)
        random_ids = rng.integers(first_word, vocab_size, size=count)
        ids[row, chosen[action < 0.8]] = MASK
        swap = (action >= 0.8) & (action < 0.9)
        ids[row, chosen[swap]] = random_ids[swap]
    return batch.replace_tokens(ids), targets


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    lr: float,
    t: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place bias-corrected Adam update of ``param`` and its moments."""
    if t < 1:
        raise TrainingError("Adam step counter starts at 1")
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)


class Adam:
    def __init__(self, params: Sequence[Parameter], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        for p in self.params:
            if not np.isfinite(p.grad).all():
                bad = int((~np.isfinite(p.grad)).sum())
                raise TrainingError(f"non-finite gradient in {p.name} ({bad} entries) at step {self.t + 1}")
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            adam_step(p.data, p.grad, m, v, lr, self.t, self.beta1, self.beta2, self.eps)


def _batches(items: Sequence, order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield [items[i] for i in order[start : start + size]]


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    model: LayoutEncoder
    losses: list[tuple[int, float, float]]  # (step, lr, loss)
    epoch_losses: list[float]
    seconds: float

    def write_loss_log(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for step, lr, loss in self.losses:
                fh.write(f"{step}\t{lr:.8g}\t{loss:.8g}\n")


def pretrain(
    pages: Sequence[Page],
    vocab: Vocab,
    model_config: ModelConfig,
    config: PretrainConfig,
    on_step: Callable[[int, float, float], None] | None = None,
) -> PretrainResult:
    if not pages:
        raise TrainingError("cannot pre-train on an empty corpus")
    if model_config.vocab_size != len(vocab):
        raise TrainingError(f"model vocab_size {model_config.vocab_size} != vocabulary size {len(vocab)}")
    max_seq = min(config.max_seq, model_config.max_seq)
    encoded = [encode_page(p, vocab, max_seq) for p in pages]
    steps_per_epoch = math.ceil(len(encoded) / config.batch_size)
    total = steps_per_epoch * config.epochs
    started = time.perf_counter()
    losses: list[tuple[int, float, float]] = []
    epoch_losses: list[float] = []
    with threadpool_limits(config.threads):
        model = LayoutEncoder.create(model_config, derive_rng(config.seed, "init"))
        opt = Adam(model.parameters())
        step = 0
        for epoch in range(config.epochs):
            order = derive_rng(config.seed, "shuffle", epoch).permutation(len(encoded))
            seen = []
            for chunk in _batches(encoded, order, config.batch_size):
                lr = lr_schedule(step, total, config.warmup_fraction, config.base_lr)
                batch = collate(chunk)
                masked, targets = mask_batch(batch, config.mask_rate, derive_rng(config.seed, "mask", step), len(vocab))
                if (targets != IGNORE_INDEX).any():
                    model.zero_grad()
                    with Tape() as tape:
                        hidden = model.forward(masked, rng=derive_rng(config.seed, "dropout", step))
                        logits = model.mlm_logits(hidden)
                        b, s, v = logits.shape
                        loss = tc.cross_entropy(tc.reshape(logits, (b * s, v)), targets.reshape(-1))
                    tape.backward(loss)
                    opt.step(lr)
                    value = float(loss.data)
                    losses.append((step, lr, value))
                    seen.append(value)
                    if on_step is not None:
                        on_step(step, lr, value)
                step += 1
            epoch_losses.append(float(np.mean(seen)) if seen else float("nan"))
            log.info("pretrain epoch %d mean loss %.4f", epoch, epoch_losses[-1])
    ckpt = Checkpoint.from_model(model, vocab.fingerprint)
    return PretrainResult(ckpt, model, losses, epoch_losses, time.perf_counter() - started)


def mlm_accuracy(
    model: LayoutEncoder,
    pages: Sequence[Page],
    vocab: Vocab,
    mask_rate: float = 0.15,
    seed: int = 0,
    batch_size: int = 16,
) -> float:
    """Fraction of masked positions whose original token is the argmax prediction."""
    encoded = [encode_page(p, vocab, model.config.max_seq) for p in pages]
    hits = total = 0
    for i, chunk in enumerate(_batches(encoded, np.arange(len(encoded)), batch_size)):
        masked, targets = mask_batch(collate(chunk), mask_rate, derive_rng(seed, "eval-mask", i), len(vocab))
        pred = model.mlm_logits(model.forward(masked)).data.argmax(axis=-1)
        sel = targets != IGNORE_INDEX
        hits += int((pred[sel] == targets[sel]).sum())
        total += int(sel.sum())
    return hits / total if total else 0.0


def tag_targets(encoded: EncodedPage, page: Page, label_set: LabelSet) -> list[int]:
    return [IGNORE_INDEX if w is None else label_set.tag_id(page.tags[w]) for w in encoded.word_index]


def predict_tags(
    model: LayoutEncoder,
    pages: Sequence[Page],
    vocab: Vocab,
    label_set: LabelSet,
    k_layers: int | None = None,
    batch_size: int = 16,
) -> list[list[str]]:
    """Argmax BIO tag per word; words cut off by truncation are tagged O."""
    encoded = [encode_page(p, vocab, model.config.max_seq) for p in pages]
    out: list[list[str]] = []
    for chunk in _batches(encoded, np.arange(len(encoded)), batch_size):
        batch = collate(chunk)
        ids = model.ner_logits(model.forward(batch, k_layers=k_layers)).data.argmax(axis=-1)
        for row, enc in enumerate(chunk):
            tags = ["O"] * enc.n_words
            for pos, w in enumerate(enc.word_index):
                if w is not None:
                    tags[w] = label_set.tags[ids[row, pos]]
            out.append(tags)
    return out


def evaluate_model(
    model: LayoutEncoder,
    pages: Sequence[Page],
    vocab: Vocab,
    label_set: LabelSet,
    k_layers: int | None = None,
) -> tuple[EvalReport, list[float]]:
    pred = predict_tags(model, pages, vocab, label_set, k_layers)
    gold = [list(p.tags) for p in pages]
    report = evaluate(pred, gold, label_set)
    return report, [per_document_f1(p, g, label_set) for p, g in zip(pred, gold)]


@dataclass
class RunSummary:
    seed: int
    final_loss: float
    seconds: float
    report: EvalReport | None = None
    doc_f1: list[float] = field(default_factory=list)

    @property
    def f1(self) -> float:
        return self.report.micro.f1 if self.report else float("nan")

    def as_dict(self) -> dict:
        d = {"seed": self.seed, "final_loss": self.final_loss, "seconds": round(self.seconds, 3)}
        if self.report is not None:
            m = self.report.micro
            d.update(f1=m.f1, precision=m.precision, recall=m.recall)
        return d


def finetune(
    ckpt: Checkpoint,
    pages: Sequence[Page],
    label_set: LabelSet,
    config: FinetuneConfig,
    vocab: Vocab,
    eval_pages: Sequence[Page] | None = None,
) -> tuple[Checkpoint, RunSummary]:
    """Full fine-tuning with a freshly initialized tag head and constant learning rate."""
    ckpt.check_vocab(vocab.fingerprint)
    if not pages:
        raise TrainingError("cannot fine-tune on an empty corpus")
    for p in pages:
        if p.tags is None:
            raise TrainingError(f"page {p.doc_id!r} is unlabeled")
        for t in p.tags:
            if not label_set.is_tag(t):
                raise TrainingError(f"page {p.doc_id!r}: tag {t!r} not in the label set")
    started = time.perf_counter()
    with threadpool_limits(config.threads):
        model = ckpt.to_model()
        model.init_ner_head(len(label_set.tags), derive_rng(config.seed, "head-init"))
        encoded = [encode_page(p, vocab, model.config.max_seq) for p in pages]
        targets = [tag_targets(e, p, label_set) for e, p in zip(encoded, pages)]
        opt = Adam(model.parameters())
        step = 0
        final_loss = float("nan")
        for epoch in range(config.epochs):
            order = derive_rng(config.seed, "shuffle", epoch).permutation(len(encoded))
            for idx in _batches(list(range(len(encoded))), order, config.batch_size):
                batch = collate([encoded[i] for i in idx])
                s = batch.shape[1]
                tgt = np.full(batch.shape, IGNORE_INDEX, dtype=np.int64)
                for row, i in enumerate(idx):
                    tgt[row, : len(targets[i])] = targets[i]
                step += 1
                if not (tgt != IGNORE_INDEX).any():
                    continue
                model.zero_grad()
                with Tape() as tape:
                    hidden = model.forward(batch, rng=derive_rng(config.seed, "dropout", step))
                    logits = model.ner_logits(hidden)
                    loss = tc.cross_entropy(tc.reshape(logits, (len(idx) * s, logits.shape[-1])), tgt.reshape(-1))
                tape.backward(loss)
                opt.step(config.lr)
                final_loss = float(loss.data)
        report, doc_f1 = (None, [])
        if eval_pages is not None:
            report, doc_f1 = evaluate_model(model, eval_pages, vocab, label_set)
    out = Checkpoint.from_model(model, vocab.fingerprint, label_set.labels)
    return out, RunSummary(config.seed, final_loss, time.perf_counter() - started, report, doc_f1)


@dataclass
class MultiRunResult:
    runs: list[RunSummary]
    failures: dict[int, str]

    @property
    def partial(self) -> bool:
        return bool(self.failures)

    @property
    def f1s(self) -> list[float]:
        return [r.f1 for r in self.runs]

    def summary(self) -> dict:
        f1s = self.f1s
        out = {"runs": len(self.runs), "failed": sorted(self.failures), "partial": self.partial}
        if f1s:
            out.update(
                mean_f1=statistics.fmean(f1s),
                std_f1=statistics.stdev(f1s) if len(f1s) > 1 else 0.0,
                min_f1=min(f1s),
                max_f1=max(f1s),
            )
        return out


def multi_run(
    ckpt: Checkpoint,
    pages: Sequence[Page],
    label_set: LabelSet,
    base: FinetuneConfig,
    seeds: Sequence[int],
    vocab: Vocab,
    eval_pages: Sequence[Page] | None = None,
    on_run: Callable[[RunSummary, Checkpoint], None] | None = None,
) -> MultiRunResult:
    """Fine-tune once per seed; a failing seed is recorded and the rest continue."""
    if len(seeds) < 2:
        raise TrainingError("multi_run needs at least two seeds")
    eval_pages = pages if eval_pages is None else eval_pages
    runs: list[RunSummary] = []
    failures: dict[int, str] = {}
    for seed in seeds:
        cfg = FinetuneConfig(base.batch_size, base.epochs, base.lr, seed, base.threads)
        try:
            out, summary = finetune(ckpt, pages, label_set, cfg, vocab, eval_pages)
        except (TrainingError, tc.TensorError, ValueError) as exc:
            log.error("seed %d failed: %s", seed, exc)
            failures[seed] = str(exc)
            continue
        runs.append(summary)
        if on_run is not None:
            on_run(summary, out)
    return MultiRunResult(runs, failures)
