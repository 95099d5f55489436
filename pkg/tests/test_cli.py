import json

import pytest

from layoutlab.cli import main, parse_seeds
from layoutlab.corpus import PAYSLIPS_LABELS, write_corpus
from layoutlab.layoutformer import load_checkpoint
from layoutlab import synth


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    write_corpus(synth.make_labeled_corpus(5, seed=2), d / "train.jsonl")
    PAYSLIPS_LABELS.write(d / "labels.txt")
    (d / "model.cfg").write_text("hidden = 16\nlayers = 2\nheads = 2\nff_dim = 32\nmax_seq = 64\n")
    assert main(["build-vocab", "--data", str(d / "train.jsonl"), "--out", str(d / "vocab.txt")]) == 0
    assert main([
        "pretrain", "--data", str(d / "train.jsonl"), "--vocab", str(d / "vocab.txt"),
        "--model-config", str(d / "model.cfg"), "--batch", "5", "--epochs", "1", "--lr", "1e-3",
        "--out", str(d / "pre.ckpt"),
    ]) == 0
    return d


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_parse_seeds():
    assert parse_seeds("0..3") == [0, 1, 2, 3]
    assert parse_seeds("7,7") == [7, 7]


def test_stats_json(workspace, capsys):
    code, out, _ = run(capsys, "stats", "--data", workspace / "train.jsonl", "--labels", workspace / "labels.txt", "--json")
    assert code == 0
    data = json.loads(out)
    assert data["pages"] == 5 and data["total"] == data["O"] + sum(data["labels"].values())


def test_ingest_rejects_bad_corpus(workspace, capsys, tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "a", "width": 10, "height": 10, "words": [{"text": "x", "box": [0,0,1,1]}], "tags": []}\n')
    code, _, err = run(capsys, "ingest", "--input", bad, "--labels", workspace / "labels.txt", "--out", tmp_path / "o")
    assert code == 1
    assert err.startswith("layoutlab: error:") and "line 1" in err
    assert err.count("\n") == 1


def test_pretrain_writes_sidecar(workspace):
    assert (workspace / "pre.ckpt.vocab").exists()
    ckpt = load_checkpoint(workspace / "pre.ckpt")
    assert ckpt.config.layers == 2


def test_pretrain_rejects_conflicting_vocab_size(workspace, capsys, tmp_path):
    cfg = tmp_path / "m.cfg"
    cfg.write_text("vocab_size = 7\nhidden = 16\nheads = 2\n")
    code, _, err = run(
        capsys, "pretrain", "--data", workspace / "train.jsonl", "--vocab", workspace / "vocab.txt",
        "--model-config", cfg, "--out", tmp_path / "x.ckpt",
    )
    assert code == 1 and "vocab_size" in err


def test_finetune_eval_and_significance(workspace, capsys, tmp_path):
    common = ["--data", workspace / "train.jsonl", "--labels", workspace / "labels.txt"]
    code, out, _ = run(capsys, "finetune", "--ckpt", workspace / "pre.ckpt", *common, "--epochs", "2", "--lr", "1e-3",
                       "--eval-data", workspace / "train.jsonl", "--out", tmp_path / "ft.ckpt")
    assert code == 0 and "f1" in json.loads(out)
    code, out, _ = run(capsys, "eval", "--ckpt", tmp_path / "ft.ckpt", *common, "--layers", "1",
                       "--scores-out", tmp_path / "a.txt", "--json")
    assert code == 0 and json.loads(out)["documents"] == 5
    code, _, _ = run(capsys, "eval", "--ckpt", tmp_path / "ft.ckpt", *common, "--scores-out", tmp_path / "b.txt")
    assert code == 0
    code, out, _ = run(capsys, "significance", "--scores-a", tmp_path / "a.txt", "--scores-b", tmp_path / "b.txt", "--exact")
    lines = out.splitlines()
    assert code == 0 and lines[0].startswith("exact randomization")
    assert json.loads(lines[1])["iterations"] == 32


def test_eval_needs_tag_head(workspace, capsys):
    code, _, err = run(capsys, "eval", "--ckpt", workspace / "pre.ckpt", "--data", workspace / "train.jsonl",
                       "--labels", workspace / "labels.txt")
    assert code == 1 and "0 tags" in err


def test_vocab_mismatch(workspace, capsys, tmp_path):
    other = tmp_path / "other.jsonl"
    write_corpus(synth.make_template_corpus(2, seed=1), other)
    assert main(["build-vocab", "--data", str(other), "--out", str(tmp_path / "v.txt")]) == 0
    code, _, err = run(capsys, "finetune", "--ckpt", workspace / "pre.ckpt", "--vocab", tmp_path / "v.txt",
                       "--data", workspace / "train.jsonl", "--labels", workspace / "labels.txt", "--out", tmp_path / "f")
    assert code == 1 and "fingerprint" in err


def test_multirun_outputs(workspace, capsys, tmp_path):
    out_dir = tmp_path / "runs"
    code, _, _ = run(capsys, "multirun", "--ckpt", workspace / "pre.ckpt", "--data", workspace / "train.jsonl",
                     "--labels", workspace / "labels.txt", "--epochs", "1", "--lr", "1e-3", "--seeds", "7,7",
                     "--out", out_dir)
    assert code == 0
    summary = json.loads((out_dir / "summary.json").read_text())
    assert summary["std_f1"] == 0.0 and summary["seeds"] == [7, 7]
    assert len((out_dir / "runs.jsonl").read_text().splitlines()) == 2
    assert (out_dir / "scores-seed7.txt").exists()


def test_bench(workspace, capsys, tmp_path):
    code, out, _ = run(capsys, "bench", "--ckpt", workspace / "pre.ckpt", "--data", workspace / "train.jsonl",
                       "--layers", "1,2", "--warmup", "1", "--reps", "3", "--json", tmp_path / "b.json")
    assert code == 0 and "median ms" in out
    assert [r["layers"] for r in json.loads((tmp_path / "b.json").read_text())] == [1, 2]


def test_missing_vocab_sidecar(workspace, capsys, tmp_path):
    (tmp_path / "lonely.ckpt").write_bytes((workspace / "pre.ckpt").read_bytes())
    code, _, err = run(capsys, "bench", "--ckpt", tmp_path / "lonely.ckpt", "--data", workspace / "train.jsonl")
    assert code == 1 and "--vocab" in err


def test_usage_error_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["stats"])
    assert exc.value.code == 2
