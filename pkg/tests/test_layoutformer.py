import math

import numpy as np
import pytest

from layoutlab import tensorcore as tc
from layoutlab.corpus import GRID
from layoutlab.layoutformer import (
    Checkpoint,
    LayoutEncoder,
    ModelConfig,
    ModelError,
    load_checkpoint,
    parameter_shapes,
    save_checkpoint,
    truncate_layers,
)
from layoutlab.seeding import derive_rng
from layoutlab.tensorcore import Tape
from layoutlab.textcodec import RESERVED, Batch, Vocab, collate, encode_page

from .conftest import make_page

SMALL = ModelConfig(vocab_size=20, hidden=16, layers=3, heads=2, ff_dim=32, max_seq=16, dropout=0.0)


def model(config=SMALL, seed=0, num_tags=0, dtype=np.float64):
    return LayoutEncoder.create(config, derive_rng(seed, "init"), num_tags=num_tags, dtype=dtype)


def random_batch(rng, b=2, s=8, vocab_size=20, pad_from=None):
    ids = rng.integers(5, vocab_size, size=(b, s))
    x0 = rng.integers(0, GRID, size=(b, s))
    y0 = rng.integers(0, GRID, size=(b, s))
    x1 = np.minimum(GRID, x0 + rng.integers(0, 100, size=(b, s)))
    y1 = np.minimum(GRID, y0 + rng.integers(0, 100, size=(b, s)))
    boxes = np.stack([x0, y0, x1, y1], axis=-1)
    mask = np.ones((b, s), dtype=np.int8)
    if pad_from is not None:
        ids[:, pad_from:] = 0
        boxes[:, pad_from:] = 0
        mask[:, pad_from:] = 0
    positions = np.broadcast_to(np.arange(s), (b, s)).copy()
    word_index = np.where(mask == 1, np.arange(s), -1)
    return Batch(ids, boxes, positions, mask, word_index)


class TestConfig:
    def test_text_round_trip(self):
        assert ModelConfig.from_text(SMALL.to_text()) == SMALL

    def test_overrides_and_comments(self):
        cfg = ModelConfig.from_text("# desk\nhidden = 32\nheads = 4\n", vocab_size=50)
        assert (cfg.hidden, cfg.heads, cfg.vocab_size, cfg.layers) == (32, 4, 50, 4)

    @pytest.mark.parametrize(
        "kwargs",
        [dict(hidden=30, heads=4), dict(layers=0), dict(vocab_size=3), dict(coord_bins=1000), dict(dropout=1.0)],
    )
    def test_invalid(self, kwargs):
        base = dict(vocab_size=20)
        base.update(kwargs)
        with pytest.raises(ModelError):
            ModelConfig(**base)

    def test_unknown_key(self):
        with pytest.raises(ModelError, match="unknown"):
            ModelConfig.from_text("vocab_size = 20\ncolour = 3\n")


class TestParameters:
    def test_spatial_tables_have_grid_rows(self):
        shapes = parameter_shapes(SMALL)
        for name in ("x", "y", "width", "height"):
            assert shapes[f"embeddings.{name}"] == (GRID + 1, 16)

    def test_counts(self):
        per_layer = 16
        assert len(parameter_shapes(SMALL)) == 8 + 3 * per_layer + 2
        assert len(parameter_shapes(SMALL, num_tags=19)) == 8 + 3 * per_layer + 4

    def test_init_is_deterministic_and_bounded(self):
        a, b = model(seed=3), model(seed=3)
        for n in a.params:
            assert a.params[n].data.tobytes() == b.params[n].data.tobytes()
        w = a.params["layers.0.attn.query.weight"].data
        assert np.abs(w).max() <= 2 * SMALL.init_std
        assert not a.params["layers.0.attn.query.bias"].data.any()
        assert (a.params["embeddings.norm.gain"].data == 1).all()


class TestForward:
    def test_shapes(self):
        m = model(num_tags=19)
        batch = random_batch(np.random.default_rng(0))
        hidden = m.forward(batch)
        assert hidden.shape == (2, 8, 16)
        assert m.mlm_logits(hidden).shape == (2, 8, 20)
        assert m.ner_logits(hidden).shape == (2, 8, 19)

    def test_ner_head_required(self):
        m = model()
        with pytest.raises(ModelError, match="NER head"):
            m.ner_logits(m.forward(random_batch(np.random.default_rng(0))))

    def test_padding_does_not_change_real_positions(self):
        m = model()
        rng = np.random.default_rng(1)
        short = random_batch(rng, b=1, s=6)
        padded = Batch(
            np.pad(short.token_ids, ((0, 0), (0, 4))),
            np.pad(short.boxes, ((0, 0), (0, 4), (0, 0))),
            np.broadcast_to(np.arange(10), (1, 10)).copy(),
            np.pad(short.attn_mask, ((0, 0), (0, 4))),
            np.pad(short.word_index, ((0, 0), (0, 4)), constant_values=-1),
        )
        a = m.forward(short).data
        b = m.forward(padded).data[:, :6]
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_pad_content_is_ignored(self):
        m = model()
        batch = random_batch(np.random.default_rng(2), pad_from=5)
        other = batch.replace_tokens(np.where(batch.attn_mask == 1, batch.token_ids, 7))
        a = m.forward(batch).data[:, :5]
        b = m.forward(other).data[:, :5]
        assert a.tobytes() == b.tobytes()

    def test_batch_permutation(self):
        m = model()
        batch = random_batch(np.random.default_rng(3), b=3)
        perm = [2, 0, 1]
        permuted = Batch(*(arr[perm] for arr in (batch.token_ids, batch.boxes, batch.positions, batch.attn_mask, batch.word_index)))
        np.testing.assert_allclose(m.forward(batch).data[perm], m.forward(permuted).data, atol=1e-12)

    def test_layout_changes_output(self):
        m = model()
        batch = random_batch(np.random.default_rng(4))
        moved = Batch(batch.token_ids, np.clip(batch.boxes + 5, 0, GRID), batch.positions, batch.attn_mask, batch.word_index)
        assert not np.allclose(m.forward(batch).data, m.forward(moved).data)

    def test_k_layers_prefix(self):
        m = model()
        batch = random_batch(np.random.default_rng(5))
        bias = m.attention_bias(batch)
        x = m.embed(batch)
        for k in range(1, SMALL.layers + 1):
            x = m.layer(x, k - 1, bias)
            assert m.forward(batch, k_layers=k).data.tobytes() == x.data.tobytes()
        with pytest.raises(ModelError):
            m.forward(batch, k_layers=0)
        with pytest.raises(ModelError):
            m.forward(batch, k_layers=SMALL.layers + 1)

    def test_single_layer_by_hand(self):
        cfg = ModelConfig(vocab_size=10, hidden=4, layers=1, heads=1, ff_dim=6, max_seq=4, dropout=0.0)
        m = model(cfg, seed=9)
        p = {n: q.data for n, q in m.params.items()}
        batch = random_batch(np.random.default_rng(6), b=1, s=3, vocab_size=10)
        bx = batch.boxes[0]
        e = (
            p["embeddings.token"][batch.token_ids[0]]
            + p["embeddings.pos1d"][np.arange(3)]
            + p["embeddings.x"][bx[:, 0]] + p["embeddings.y"][bx[:, 1]]
            + p["embeddings.x"][bx[:, 2]] + p["embeddings.y"][bx[:, 3]]
            + p["embeddings.width"][bx[:, 2] - bx[:, 0]] + p["embeddings.height"][bx[:, 3] - bx[:, 1]]
        )

        def ln(v, g, b):
            mu = v.mean(-1, keepdims=True)
            var = ((v - mu) ** 2).mean(-1, keepdims=True)
            return (v - mu) / np.sqrt(var + cfg.layer_norm_eps) * g + b

        x = ln(e, p["embeddings.norm.gain"], p["embeddings.norm.bias"])
        q = x @ p["layers.0.attn.query.weight"] + p["layers.0.attn.query.bias"]
        k = x @ p["layers.0.attn.key.weight"] + p["layers.0.attn.key.bias"]
        v = x @ p["layers.0.attn.value.weight"] + p["layers.0.attn.value.bias"]
        s = q @ k.T / 2.0
        a = np.exp(s - s.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        attn = (a @ v) @ p["layers.0.attn.output.weight"] + p["layers.0.attn.output.bias"]
        x = ln(x + attn, p["layers.0.attn_norm.gain"], p["layers.0.attn_norm.bias"])
        f = x @ p["layers.0.ffn.in.weight"] + p["layers.0.ffn.in.bias"]
        f = 0.5 * f * (1 + np.tanh(math.sqrt(2 / math.pi) * (f + 0.044715 * f**3)))
        f = f @ p["layers.0.ffn.out.weight"] + p["layers.0.ffn.out.bias"]
        expect = ln(x + f, p["layers.0.ffn_norm.gain"], p["layers.0.ffn_norm.bias"])
        np.testing.assert_allclose(m.forward(batch).data[0], expect, atol=1e-10)

    def test_out_of_grid_box(self):
        batch = random_batch(np.random.default_rng(7))
        bad = Batch(batch.token_ids, batch.boxes + GRID, batch.positions, batch.attn_mask, batch.word_index)
        with pytest.raises(ModelError):
            model().forward(bad)

    def test_too_long(self):
        with pytest.raises(ModelError, match="max_seq"):
            model().forward(random_batch(np.random.default_rng(8), s=17))

    def test_dropout_needs_rng(self):
        cfg = ModelConfig(vocab_size=20, hidden=16, layers=1, heads=2, ff_dim=32, max_seq=16, dropout=0.5)
        m = model(cfg)
        batch = random_batch(np.random.default_rng(9))
        assert m.forward(batch).data.tobytes() == m.forward(batch).data.tobytes()
        a = m.forward(batch, rng=np.random.default_rng(1)).data
        b = m.forward(batch, rng=np.random.default_rng(1)).data
        assert a.tobytes() == b.tobytes()
        assert not np.allclose(a, m.forward(batch).data)

    def test_gradients_reach_spatial_tables(self):
        m = model()
        batch = random_batch(np.random.default_rng(10))
        with Tape() as tape:
            logits = m.mlm_logits(m.forward(batch))
            loss = tc.cross_entropy(tc.reshape(logits, (16, 20)), batch.token_ids.reshape(-1))
        tape.backward(loss)
        for name in ("x", "y", "width", "height", "token", "pos1d"):
            assert np.abs(m.params[f"embeddings.{name}"].grad).sum() > 0, name
        rows_x = np.unique(np.concatenate([batch.boxes[..., 0].ravel(), batch.boxes[..., 2].ravel()]))
        touched = np.nonzero(np.abs(m.params["embeddings.x"].grad).sum(axis=1))[0]
        assert set(touched) <= set(rows_x)

    def test_encoded_page_forward(self):
        vocab = Vocab(list(RESERVED) + ["net", "pay", "date"])
        cfg = ModelConfig(vocab_size=len(vocab), hidden=8, layers=1, heads=2, ff_dim=8, max_seq=8, dropout=0.0)
        pages = [make_page(["Net", "Pay", "x"]), make_page(["date"])]
        batch = collate([encode_page(p, vocab, cfg.max_seq) for p in pages])
        out = model(cfg).forward(batch)
        assert out.shape == (2, 5, 8)
        assert np.isfinite(out.data).all()


class TestTruncation:
    def test_truncate_identity(self):
        m = model(num_tags=5, dtype=np.float32)
        ckpt = Checkpoint.from_model(m, "f" * 64)
        batch = random_batch(np.random.default_rng(11))
        full = ckpt.to_model()
        for k in range(1, SMALL.layers + 1):
            small = truncate_layers(ckpt, k).to_model()
            assert small.config.layers == k
            assert small.forward(batch).data.tobytes() == full.forward(batch, k_layers=k).data.tobytes()

    def test_truncate_drops_upper_layers(self):
        ckpt = Checkpoint.from_model(model(num_tags=5), "f" * 64)
        t = truncate_layers(ckpt, 1)
        assert not any(n.startswith("layers.1.") or n.startswith("layers.2.") for n in t.tensors)
        assert "heads.ner.weight" in t.tensors and "heads.mlm.weight" in t.tensors
        assert len(t.tensors) == 8 + 16 + 4
        with pytest.raises(ModelError):
            truncate_layers(ckpt, 4)

    def test_model_truncate_matches(self):
        m = model()
        batch = random_batch(np.random.default_rng(12))
        assert m.truncate(2).forward(batch).data.tobytes() == m.forward(batch, k_layers=2).data.tobytes()


class TestCheckpoint:
    def ckpt(self, num_tags=3):
        m = model(num_tags=num_tags, dtype=np.float32)
        return Checkpoint.from_model(m, "ab" * 32, labels=("A",) if num_tags else ())

    def test_round_trip_bit_exact(self, tmp_path):
        ckpt = self.ckpt()
        path = tmp_path / "m.ckpt"
        save_checkpoint(ckpt, path)
        back = load_checkpoint(path)
        assert back.config == ckpt.config
        assert back.vocab_fingerprint == ckpt.vocab_fingerprint
        assert back.labels == ("A",)
        assert list(back.tensors) == list(ckpt.tensors)
        for n in ckpt.tensors:
            assert back.tensors[n].tobytes() == ckpt.tensors[n].tobytes()
        save_checkpoint(back, tmp_path / "again.ckpt")
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()

    def test_header_layout(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(self.ckpt(), path)
        raw = path.read_bytes()
        assert raw[:4] == b"LNLB"
        assert int.from_bytes(raw[4:6], "little") == 1
        meta_len = int.from_bytes(raw[6:10], "little")
        meta = raw[10 : 10 + meta_len].decode()
        assert "vocab_sha256 = " + "ab" * 32 in meta
        assert "hidden = 16" in meta

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"NOPE" + b"\0" * 20)
        with pytest.raises(ModelError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(self.ckpt(), path)
        raw = bytearray(path.read_bytes())
        raw[4:6] = (7).to_bytes(2, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(ModelError, match="version 7"):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(self.ckpt(), path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(ModelError, match="truncated"):
            load_checkpoint(path)

    def test_missing_tensor(self, tmp_path):
        ckpt = self.ckpt()
        del ckpt.tensors["embeddings.width"]
        save_checkpoint(ckpt, tmp_path / "m.ckpt")
        with pytest.raises(ModelError, match="missing tensor embeddings.width"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_dims_disagree_with_config(self, tmp_path):
        ckpt = self.ckpt()
        ckpt.tensors["embeddings.pos1d"] = np.zeros((15, 16), np.float32)
        save_checkpoint(ckpt, tmp_path / "m.ckpt")
        with pytest.raises(ModelError, match="pos1d"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_vocab_mismatch(self, tmp_path):
        save_checkpoint(self.ckpt(), tmp_path / "m.ckpt")
        with pytest.raises(ModelError, match="fingerprint"):
            load_checkpoint(tmp_path / "m.ckpt", vocab_fingerprint="cd" * 32)
        load_checkpoint(tmp_path / "m.ckpt", vocab_fingerprint="ab" * 32)

    def test_head_replaced_on_init(self):
        m = model(num_tags=3)
        m.init_ner_head(19, derive_rng(0, "head-init"))
        assert m.num_tags == 19
        assert list(m.params)[-2:] == ["heads.ner.weight", "heads.ner.bias"]
        assert m.forward(random_batch(np.random.default_rng(0))).shape == (2, 8, 16)
