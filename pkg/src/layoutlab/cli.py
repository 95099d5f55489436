"""Command-line entry point: ``layoutlab <command> ...``.

Every command exits 0 on success and 1 with a one-line ``layoutlab: error:``
diagnostic on stderr otherwise (argparse usage errors exit 2).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import synth
from .bench import BenchError, depth_sweep, sweep_json, sweep_table
from .corpus import PAYSLIPS_LABELS, CorpusError, LabelSet, label_stats, parse_corpus, write_corpus
from .layoutformer import Checkpoint, ModelConfig, ModelError, load_checkpoint, save_checkpoint
from .metrics import MetricsError, approx_rand_test, exact_rand_test, read_scores, write_scores
from .tensorcore import TensorError
from .textcodec import CodecError, Vocab, build_vocab
from .trainer import (
    FinetuneConfig,
    PretrainConfig,
    TrainingError,
    evaluate_model,
    finetune,
    multi_run,
    pretrain,
)

log = logging.getLogger("layoutlab")

EXPECTED_ERRORS = (
    CorpusError,
    CodecError,
    ModelError,
    TrainingError,
    MetricsError,
    BenchError,
    TensorError,
    OSError,
    ValueError,
)


class CliError(Exception):
    pass


def sidecar_vocab(ckpt_path: str | os.PathLike) -> Path:
    """Where pretrain/finetune leave a copy of the vocabulary next to a checkpoint."""
    return Path(f"{ckpt_path}.vocab")


def parse_seeds(text: str) -> list[int]:
    """``"0..4"`` (inclusive) or a comma list ``"3,7,7"``."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = (int(x) for x in text.split(".."))
            if hi < lo:
                raise CliError(f"empty seed range {text!r}")
            return list(range(lo, hi + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CliError(f"bad seed list {text!r}; use A..B or a,b,c") from None


def parse_layers(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CliError(f"bad layer list {text!r}") from None


def _load_vocab(args) -> Vocab:
    path = args.vocab or sidecar_vocab(args.ckpt)
    if not Path(path).exists():
        raise CliError(f"no vocabulary given and {path} does not exist; pass --vocab")
    return Vocab.load(path)


def _load_ckpt_and_vocab(args) -> tuple[Checkpoint, Vocab]:
    vocab = _load_vocab(args)
    return load_checkpoint(args.ckpt, vocab_fingerprint=vocab.fingerprint), vocab


def _save_with_vocab(ckpt: Checkpoint, vocab: Vocab, out: str) -> None:
    save_checkpoint(ckpt, out)
    vocab.save(sidecar_vocab(out))


# commands


def cmd_ingest(args) -> None:
    labels = LabelSet.read(args.labels)
    pages = parse_corpus(args.input, labels)
    write_corpus(pages, args.out)
    words = sum(len(p.words) for p in pages)
    print(f"ingested {len(pages)} pages, {words} words -> {args.out}")


def cmd_stats(args) -> None:
    labels = LabelSet.read(args.labels)
    stats = label_stats(parse_corpus(args.data, labels), labels)
    if args.json:
        print(json.dumps(stats.as_dict(), indent=2))
        return
    width = max(len(x) for x in labels.labels + ("Total",))
    for name in labels.labels:
        print(f"{name:<{width}}  {stats.counts[name]:>8}")
    print(f"{'O':<{width}}  {stats.outside:>8}")
    print(f"{'Total':<{width}}  {stats.total:>8}")
    print(f"{'Pages':<{width}}  {stats.pages:>8}")


def cmd_build_vocab(args) -> None:
    vocab = build_vocab(parse_corpus(args.data), args.max_size, args.min_freq, args.lowercase)
    vocab.save(args.out)
    print(f"vocabulary of {len(vocab)} entries -> {args.out} (sha256 {vocab.fingerprint[:12]})")


def cmd_pretrain(args) -> None:
    vocab = Vocab.load(args.vocab)
    with open(args.model_config, encoding="utf-8") as fh:
        text = fh.read()
    declared = ModelConfig.from_text(text, vocab_size=len(vocab))
    probe = {k.strip(): v.strip() for k, _, v in (ln.partition("=") for ln in text.splitlines()) if k.strip()}
    if "vocab_size" in probe and int(probe["vocab_size"]) != len(vocab):
        raise CliError(f"model config vocab_size={probe['vocab_size']} but the vocabulary has {len(vocab)} entries")
    config = PretrainConfig(
        batch_size=args.batch,
        epochs=args.epochs,
        base_lr=args.lr,
        warmup_fraction=args.warmup_frac,
        mask_rate=args.mask_rate,
        seed=args.seed,
        max_seq=declared.max_seq,
        threads=args.threads,
    )
    pages = parse_corpus(args.data)

    def on_step(step, lr, loss):
        log.info("step %d lr %.3g loss %.4f", step, lr, loss)

    result = pretrain(pages, vocab, declared, config, on_step=on_step)
    _save_with_vocab(result.checkpoint, vocab, args.out)
    if args.loss_log:
        result.write_loss_log(args.loss_log)
    for epoch, loss in enumerate(result.epoch_losses):
        print(f"epoch {epoch}: mean loss {loss:.4f}")
    print(f"{len(result.losses)} steps in {result.seconds:.1f}s -> {args.out}")


def _eval_pages(args, labels):
    return parse_corpus(args.eval_data, labels) if args.eval_data else None


def cmd_finetune(args) -> None:
    ckpt, vocab = _load_ckpt_and_vocab(args)
    labels = LabelSet.read(args.labels)
    pages = parse_corpus(args.data, labels)
    config = FinetuneConfig(args.batch, args.epochs, args.lr, args.seed, args.threads)
    out, summary = finetune(ckpt, pages, labels, config, vocab, _eval_pages(args, labels))
    _save_with_vocab(out, vocab, args.out)
    print(json.dumps(summary.as_dict()))


def cmd_multirun(args) -> None:
    ckpt, vocab = _load_ckpt_and_vocab(args)
    labels = LabelSet.read(args.labels)
    pages = parse_corpus(args.data, labels)
    eval_pages = _eval_pages(args, labels)
    seeds = parse_seeds(args.seeds)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs_path = out_dir / "runs.jsonl"
    runs_path.write_text("")
    base = FinetuneConfig(args.batch, args.epochs, args.lr, 0, args.threads)

    def on_run(summary, _ckpt):
        with open(runs_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(summary.as_dict()) + "\n")
        write_scores(summary.doc_f1, out_dir / f"scores-seed{summary.seed}.txt")
        print(f"seed {summary.seed}: F1 {summary.f1:.4f}", flush=True)

    result = multi_run(ckpt, pages, labels, base, seeds, vocab, eval_pages, on_run)
    summary = result.summary()
    summary["seeds"] = seeds
    summary["failures"] = {str(k): v for k, v in result.failures.items()}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    if not result.runs:
        raise CliError("every seed failed")


def cmd_eval(args) -> None:
    ckpt, vocab = _load_ckpt_and_vocab(args)
    labels = LabelSet.read(args.labels)
    model = ckpt.to_model()
    if model.num_tags != len(labels.tags):
        raise CliError(f"checkpoint has {model.num_tags} tags, label set has {len(labels.tags)}")
    pages = parse_corpus(args.data, labels)
    report, doc_f1 = evaluate_model(model, pages, vocab, labels, k_layers=args.layers)
    if args.scores_out:
        write_scores(doc_f1, args.scores_out)
    print(report.to_json() if args.json else report.format_table())


def cmd_significance(args) -> None:
    a, b = read_scores(args.scores_a), read_scores(args.scores_b)
    if args.exact:
        result = exact_rand_test(a, b)
    else:
        result = approx_rand_test(a, b, args.iterations, args.seed)
    print(result.banner())
    print(json.dumps(result.as_dict()))


def cmd_bench(args) -> None:
    ckpt, vocab = _load_ckpt_and_vocab(args)
    labels = LabelSet.read(args.labels) if args.labels else None
    pages = parse_corpus(args.data, labels)
    depths = parse_layers(args.layers) if args.layers else list(range(1, ckpt.config.layers + 1))
    rows = depth_sweep(ckpt, pages, vocab, depths, labels, args.warmup, args.reps, args.batch, args.threads)
    print(sweep_table(rows))
    if args.json:
        Path(args.json).write_text(sweep_json(rows) + "\n")


def cmd_synth(args) -> None:
    if args.kind in ("payslips-train", "payslips-test"):
        pages = synth.make_payslips_like(args.kind.split("-")[1], seed=args.seed)
    elif args.kind == "labeled":
        pages = synth.make_labeled_corpus(args.pages, seed=args.seed)
    else:
        pages = synth.make_template_corpus(args.pages, seed=args.seed)
    write_corpus(pages, args.out)
    if args.labels_out:
        PAYSLIPS_LABELS.write(args.labels_out)
    print(f"wrote {len(pages)} pages -> {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layoutlab", description="Layout-aware document encoder toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a corpus and write it in canonical form")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["jsonl"], default="jsonl")
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("stats", help="word-level label distribution")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("build-vocab", help="build a word vocabulary")
    p.add_argument("--data", required=True)
    p.add_argument("--max-size", type=int, default=30000)
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--lowercase", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("pretrain", help="masked-token pre-training")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--model-config", required=True)
    p.add_argument("--batch", type=int, default=80)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--warmup-frac", type=float, default=0.05)
    p.add_argument("--mask-rate", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--loss-log", help="write step, lr, loss as TSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    def ckpt_args(p, labels_required=True):
        p.add_argument("--ckpt", required=True)
        p.add_argument("--vocab", help="vocabulary file (default: CKPT.vocab)")
        p.add_argument("--data", required=True)
        p.add_argument("--labels", required=labels_required)

    def train_args(p):
        p.add_argument("--batch", type=int, default=16)
        p.add_argument("--epochs", type=int, default=10)
        p.add_argument("--lr", type=float, default=5e-5)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--eval-data", help="score on this corpus instead")

    p = sub.add_parser("finetune", help="fine-tune a tag head on a labeled corpus")
    ckpt_args(p)
    train_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("multirun", help="fine-tune once per seed and summarize")
    ckpt_args(p)
    train_args(p)
    p.add_argument("--seeds", required=True, help="A..B inclusive or a,b,c")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_multirun)

    p = sub.add_parser("eval", help="score a fine-tuned checkpoint")
    ckpt_args(p)
    p.add_argument("--layers", type=int, help="use only the bottom K layers")
    p.add_argument("--scores-out", help="write per-document F1, one per line")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("significance", help="paired randomization test on per-document scores")
    p.add_argument("--scores-a", required=True)
    p.add_argument("--scores-b", required=True)
    p.add_argument("--iterations", type=int, default=9999)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exact", action="store_true", help="enumerate all 2**n swaps (n <= 20)")
    p.set_defaults(func=cmd_significance)

    p = sub.add_parser("bench", help="inference latency per depth")
    ckpt_args(p, labels_required=False)
    p.add_argument("--layers", help="comma list of depths (default: all)")
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--json", help="also write the sweep as JSON here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--kind", choices=["payslips-train", "payslips-test", "labeled", "template"], required=True)
    p.add_argument("--pages", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--labels-out", help="also write the label-set file")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, *EXPECTED_ERRORS) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"layoutlab: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
