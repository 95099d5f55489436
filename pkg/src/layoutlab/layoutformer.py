"""LayoutLM-style encoder built on :mod:`layoutlab.tensorcore`.

Input representation per token is the sum of eight embedding lookups:
token id, 1-D position, ``X[x0] + X[x1] + Y[y0] + Y[y1]`` and the width and
height tables indexed by ``x1 - x0`` and ``y1 - y0``. The stack is a post-norm
encoder (norm after each residual add) with a GELU feed-forward block.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import tensorcore as tc
from .corpus import GRID
from .tensorcore import Parameter, Tensor
from .textcodec import Batch

CHECKPOINT_MAGIC = b"LNLB"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden: int = 128
    layers: int = 4
    heads: int = 4
    ff_dim: int = 512
    max_seq: int = 128
    coord_bins: int = GRID + 1
    dropout: float = 0.1
    layer_norm_eps: float = 1e-12
    init_std: float = 0.02

    def __post_init__(self) -> None:
        if self.vocab_size < 6:
            raise ModelError("vocab_size must cover the reserved tokens plus one word")
        if self.hidden <= 0 or self.heads <= 0 or self.hidden % self.heads:
            raise ModelError(f"hidden={self.hidden} must be a positive multiple of heads={self.heads}")
        if self.layers < 1:
            raise ModelError("layers must be >= 1")
        if self.max_seq < 3:
            raise ModelError("max_seq must be >= 3")
        if self.coord_bins != GRID + 1:
            raise ModelError(f"coord_bins must be {GRID + 1}")
        if self.ff_dim <= 0:
            raise ModelError("ff_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")
        if self.layer_norm_eps <= 0 or self.init_std <= 0:
            raise ModelError("layer_norm_eps and init_std must be positive")

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ModelError(f"unknown model config key {key!r}")
            kwargs[key] = float(raw) if types[key] in ("float", float) else int(raw)
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ModelConfig":
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ModelError(f"bad config line {line!r}")
            values[key.strip()] = value.strip()
        values.update({k: str(v) for k, v in overrides.items()})
        return cls.from_mapping(values)

    @classmethod
    def load(cls, path: str | os.PathLike, **overrides) -> "ModelConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), **overrides)


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) with draws beyond two standard deviations resampled."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def parameter_shapes(config: ModelConfig, num_tags: int = 0) -> dict[str, tuple[int, ...]]:
    """Every tensor name of a model with this config, in canonical order."""
    h, f = config.hidden, config.ff_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embeddings.token": (config.vocab_size, h),
        "embeddings.pos1d": (config.max_seq, h),
        "embeddings.x": (config.coord_bins, h),
        "embeddings.y": (config.coord_bins, h),
        "embeddings.width": (config.coord_bins, h),
        "embeddings.height": (config.coord_bins, h),
        "embeddings.norm.gain": (h,),
        "embeddings.norm.bias": (h,),
    }
    for i in range(config.layers):
        p = f"layers.{i}."
        for proj in ("query", "key", "value", "output"):
            shapes[p + f"attn.{proj}.weight"] = (h, h)
            shapes[p + f"attn.{proj}.bias"] = (h,)
        shapes[p + "attn_norm.gain"] = (h,)
        shapes[p + "attn_norm.bias"] = (h,)
        shapes[p + "ffn.in.weight"] = (h, f)
        shapes[p + "ffn.in.bias"] = (f,)
        shapes[p + "ffn.out.weight"] = (f, h)
        shapes[p + "ffn.out.bias"] = (h,)
        shapes[p + "ffn_norm.gain"] = (h,)
        shapes[p + "ffn_norm.bias"] = (h,)
    shapes["heads.mlm.weight"] = (h, config.vocab_size)
    shapes["heads.mlm.bias"] = (config.vocab_size,)
    if num_tags:
        shapes["heads.ner.weight"] = (h, num_tags)
        shapes["heads.ner.bias"] = (num_tags,)
    return shapes


def _init_value(name: str, shape, std: float, rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith(".bias"):
        return np.zeros(shape)
    return trunc_normal(rng, shape, std)


class LayoutEncoder:
    """Encoder weights plus the forward computation.

    Weights for inference are never mutated by a forward pass, so one
    instance can serve concurrent forward calls.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        self.config = config
        self.params = params
        expected = parameter_shapes(config, self.num_tags)
        if list(params) != list(expected):
            missing = set(expected) - set(params)
            extra = set(params) - set(expected)
            raise ModelError(f"parameter set mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ModelError(f"{name}: shape {params[name].shape}, expected {shape}")

    @classmethod
    def create(
        cls,
        config: ModelConfig,
        rng: np.random.Generator,
        num_tags: int = 0,
        dtype=np.float32,
    ) -> "LayoutEncoder":
        params = {
            name: Parameter(_init_value(name, shape, config.init_std, rng).astype(dtype), name)
            for name, shape in parameter_shapes(config, num_tags).items()
        }
        return cls(config, params)

    @property
    def num_tags(self) -> int:
        w = self.params.get("heads.ner.weight")
        return 0 if w is None else w.shape[1]

    @property
    def dtype(self):
        return self.params["embeddings.token"].dtype

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype) -> "LayoutEncoder":
        return LayoutEncoder(
            self.config, {n: Parameter(p.data.astype(dtype), n) for n, p in self.params.items()}
        )

    def copy(self) -> "LayoutEncoder":
        return self.astype(self.dtype)

    def init_ner_head(self, num_tags: int, rng: np.random.Generator) -> None:
        """Attach a freshly initialized tag classifier, replacing any existing one."""
        if num_tags < 1:
            raise ModelError("num_tags must be positive")
        h = self.config.hidden
        self.params.pop("heads.ner.weight", None)
        self.params.pop("heads.ner.bias", None)
        w = trunc_normal(rng, (h, num_tags), self.config.init_std).astype(self.dtype)
        self.params["heads.ner.weight"] = Parameter(w, "heads.ner.weight")
        self.params["heads.ner.bias"] = Parameter(np.zeros(num_tags, dtype=self.dtype), "heads.ner.bias")

    def truncate(self, k: int) -> "LayoutEncoder":
        """Copy keeping the embeddings, the bottom ``k`` layers and the heads."""
        if not 1 <= k <= self.config.layers:
            raise ModelError(f"k={k} outside 1..{self.config.layers}")
        config = replace(self.config, layers=k)
        keep = parameter_shapes(config, self.num_tags)
        return LayoutEncoder(config, {n: Parameter(self.params[n].data.copy(), n) for n in keep})

    # forward computation

    def embed(self, batch: Batch, rng: np.random.Generator | None = None) -> Tensor:
        b, s = batch.shape
        if s > self.config.max_seq:
            raise ModelError(f"sequence length {s} exceeds max_seq {self.config.max_seq}")
        boxes = batch.boxes
        if boxes.size and (boxes.min() < 0 or boxes.max() > GRID):
            raise ModelError("box coordinate outside 0..1000")
        x0, y0, x1, y1 = (boxes[..., i] for i in range(4))
        if np.any(x1 < x0) or np.any(y1 < y0):
            raise ModelError("inverted box in batch")
        p = self.params
        parts = [
            tc.gather_rows(p["embeddings.token"], batch.token_ids),
            tc.gather_rows(p["embeddings.pos1d"], batch.positions),
            tc.gather_rows(p["embeddings.x"], x0),
            tc.gather_rows(p["embeddings.y"], y0),
            tc.gather_rows(p["embeddings.x"], x1),
            tc.gather_rows(p["embeddings.y"], y1),
            tc.gather_rows(p["embeddings.width"], x1 - x0),
            tc.gather_rows(p["embeddings.height"], y1 - y0),
        ]
        h = tc.layer_norm(
            tc.add_n(*parts), p["embeddings.norm.gain"], p["embeddings.norm.bias"], self.config.layer_norm_eps
        )
        return tc.dropout(h, self.config.dropout, rng)

    def attention_bias(self, batch: Batch) -> Tensor:
        keep = batch.attn_mask.astype(self.dtype)
        bias = (1.0 - keep) * self.dtype.type(tc.MASK_FILL)
        return Tensor(bias[:, None, None, :])

    def layer(self, x: Tensor, i: int, bias: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        cfg = self.config
        p = self.params
        pre = f"layers.{i}."
        b, s, h = x.shape
        nh = cfg.heads
        d = h // nh

        def proj(name):
            return tc.add(tc.matmul(x, p[pre + f"attn.{name}.weight"]), p[pre + f"attn.{name}.bias"])

        q = tc.transpose(tc.reshape(proj("query"), (b, s, nh, d)), (0, 2, 1, 3))
        kt = tc.transpose(tc.reshape(proj("key"), (b, s, nh, d)), (0, 2, 3, 1))
        v = tc.transpose(tc.reshape(proj("value"), (b, s, nh, d)), (0, 2, 1, 3))
        scores = tc.add(tc.scale(tc.matmul(q, kt), 1.0 / math.sqrt(d)), bias)
        probs = tc.dropout(tc.softmax(scores), cfg.dropout, rng)
        ctx = tc.reshape(tc.transpose(tc.matmul(probs, v), (0, 2, 1, 3)), (b, s, h))
        attn = tc.add(tc.matmul(ctx, p[pre + "attn.output.weight"]), p[pre + "attn.output.bias"])
        attn = tc.dropout(attn, cfg.dropout, rng)
        x = tc.layer_norm(tc.add(x, attn), p[pre + "attn_norm.gain"], p[pre + "attn_norm.bias"], cfg.layer_norm_eps)

        ff = tc.gelu(tc.add(tc.matmul(x, p[pre + "ffn.in.weight"]), p[pre + "ffn.in.bias"]))
        ff = tc.add(tc.matmul(ff, p[pre + "ffn.out.weight"]), p[pre + "ffn.out.bias"])
        ff = tc.dropout(ff, cfg.dropout, rng)
        return tc.layer_norm(tc.add(x, ff), p[pre + "ffn_norm.gain"], p[pre + "ffn_norm.bias"], cfg.layer_norm_eps)

    def forward(self, batch: Batch, k_layers: int | None = None, rng: np.random.Generator | None = None) -> Tensor:
        """Contextual embeddings [B, S, hidden] from the bottom ``k_layers`` layers.

        ``rng`` enables dropout; pass None for deterministic inference.
        """
        k = self.config.layers if k_layers is None else k_layers
        if not 1 <= k <= self.config.layers:
            raise ModelError(f"k_layers={k} outside 1..{self.config.layers}")
        bias = self.attention_bias(batch)
        x = self.embed(batch, rng)
        for i in range(k):
            x = self.layer(x, i, bias, rng)
        return x

    __call__ = forward

    def _head(self, hidden: Tensor, name: str) -> Tensor:
        if hidden.data.ndim != 3 or hidden.shape[-1] != self.config.hidden:
            raise ModelError(f"head input must be [B, S, {self.config.hidden}], got {hidden.shape}")
        return tc.add(tc.matmul(hidden, self.params[f"heads.{name}.weight"]), self.params[f"heads.{name}.bias"])

    def mlm_logits(self, hidden: Tensor) -> Tensor:
        return self._head(hidden, "mlm")

    def ner_logits(self, hidden: Tensor) -> Tensor:
        if not self.num_tags:
            raise ModelError("model has no NER head; call init_ner_head first")
        return self._head(hidden, "ner")


# checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab_fingerprint: str
    vocab_size: int
    tensors: dict[str, np.ndarray]
    labels: tuple[str, ...] = ()
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_model(cls, model: LayoutEncoder, vocab_fingerprint: str, labels=()) -> "Checkpoint":
        return cls(
            config=model.config,
            vocab_fingerprint=vocab_fingerprint,
            vocab_size=model.config.vocab_size,
            tensors={n: p.data.astype(np.float32, copy=True) for n, p in model.params.items()},
            labels=tuple(labels),
        )

    def to_model(self, dtype=np.float32) -> LayoutEncoder:
        return LayoutEncoder(self.config, {n: Parameter(t.astype(dtype), n) for n, t in self.tensors.items()})

    def check_vocab(self, fingerprint: str) -> None:
        if fingerprint != self.vocab_fingerprint:
            raise ModelError(
                f"vocabulary fingerprint mismatch: checkpoint {self.vocab_fingerprint[:12]}, given {fingerprint[:12]}"
            )

    def metadata_text(self) -> str:
        lines = self.config.to_text()
        lines += f"vocab_sha256 = {self.vocab_fingerprint}\n"
        lines += f"vocab_entries = {self.vocab_size}\n"
        lines += f"labels = {','.join(self.labels)}\n"
        return lines


def truncate_layers(ckpt: Checkpoint, k: int) -> Checkpoint:
    if not 1 <= k <= ckpt.config.layers:
        raise ModelError(f"k={k} outside 1..{ckpt.config.layers}")
    config = replace(ckpt.config, layers=k)
    num_tags = ckpt.tensors["heads.ner.weight"].shape[1] if "heads.ner.weight" in ckpt.tensors else 0
    keep = parameter_shapes(config, num_tags)
    return replace(ckpt, config=config, tensors={n: ckpt.tensors[n].copy() for n in keep})


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    meta = ckpt.metadata_text().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", ckpt.version))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        for name, arr in ckpt.tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ModelError("truncated checkpoint file")
    return data


def load_checkpoint(path: str | os.PathLike, vocab_fingerprint: str | None = None) -> Checkpoint:
    """Read and validate a checkpoint; optionally insist on a vocabulary fingerprint."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ModelError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<H", _read_exact(fh, 2))
        if version != CHECKPOINT_VERSION:
            raise ModelError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4))
        meta = _read_exact(fh, meta_len).decode("utf-8")
        tensors: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise ModelError("truncated checkpoint file")
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1))
            dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(dims).astype(np.float32)
            if name in tensors:
                raise ModelError(f"{path}: duplicate tensor {name}")
            tensors[name] = arr

    values = {}
    for line in meta.splitlines():
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    fingerprint = values.pop("vocab_sha256", "")
    vocab_size = int(values.pop("vocab_entries", "0"))
    labels = tuple(x for x in values.pop("labels", "").split(",") if x)
    config = ModelConfig.from_mapping(values)
    num_tags = tensors["heads.ner.weight"].shape[1] if "heads.ner.weight" in tensors else 0
    expected = parameter_shapes(config, num_tags)
    missing = [n for n in expected if n not in tensors]
    if missing:
        raise ModelError(f"{path}: missing tensor {missing[0]}")
    for name, arr in tensors.items():
        if name not in expected:
            raise ModelError(f"{path}: unexpected tensor {name}")
        if arr.shape != expected[name]:
            raise ModelError(f"{path}: {name} has dims {arr.shape}, config implies {expected[name]}")
    ckpt = Checkpoint(config, fingerprint, vocab_size, {n: tensors[n] for n in expected}, labels, version)
    if vocab_fingerprint is not None:
        ckpt.check_vocab(vocab_fingerprint)
    return ckpt
