"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the encoder needs are provided. Each op computes its
forward value with numpy and, when a :class:`Tape` is recording and an input
needs gradients, appends a backward closure to the tape. ``Tape.backward``
walks the records in exact reverse order.

Precision follows the inputs: parameters created as float32 give a float32
graph, float64 parameters (verification mode) a float64 graph.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

IGNORE_INDEX = -100
MASK_FILL = -1e9


class TensorError(ValueError):
    """Shape mismatch, non-finite value, or misuse of the tape."""


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def numpy(self) -> np.ndarray:
        return self.data


class Parameter(Tensor):
    """Trainable leaf. ``grad`` accumulates across backward passes until zeroed."""

    __slots__ = ("name", "grad")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Records differentiable ops executed inside ``with tape:``.

    A tape belongs to the thread that opened it; forward passes run outside
    any tape record nothing.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, seed_grad: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(param) into every reachable Parameter's ``grad``."""
        if not self.records:
            raise TensorError("backward called on an empty tape (no forward recorded)")
        if not any(r.out is loss for r in self.records):
            raise TensorError("loss was not produced on this tape")
        if seed_grad is None:
            if loss.data.size != 1:
                raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
            seed_grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed_grad, dtype=loss.dtype)}
        params: dict[int, Parameter] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if isinstance(inp, Parameter):
                    params[key] = inp
        for key, p in params.items():
            p.grad += grads[key]


def _finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise TensorError(f"non-finite output in {op}")
    return x


def _record(out: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _finite(out, op)
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape.records.append(_Record(result, inputs, backward))
    return result


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` along broadcast axes."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: tuple, b: tuple, op: str) -> None:
    for da, db in zip(reversed(a), reversed(b)):
        if da != db and da != 1 and db != 1:
            raise TensorError(f"{op}: shapes {a} and {b} do not broadcast")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; ``b`` may be a plain matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    _check_broadcast(a.shape[:-2], b.shape[:-2], "matmul")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.data.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    out = a.data + b.data

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), backward, "add")


def add_n(*xs: Tensor) -> Tensor:
    """Sum of equally shaped tensors, accumulated left to right."""
    if not xs:
        raise TensorError("add_n needs at least one input")
    shape = xs[0].shape
    for x in xs:
        if x.shape != shape:
            raise TensorError(f"add_n: shape {x.shape} differs from {shape}")
    out = xs[0].data.copy()
    for x in xs[1:]:
        out += x.data

    def backward(g):
        return [g if x.requires_grad else None for x in xs]

    return _record(out, tuple(xs), backward, "add_n")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    out = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    out = a.data * c
    return _record(out, (a,), lambda g: (g * c,), "scale")


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum_all")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    return _record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _record(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(xs)
    out = np.concatenate([x.data for x in xs], axis=axis)
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        parts = np.split(g, sizes, axis=axis)
        return [p if x.requires_grad else None for x, p in zip(xs, parts)]

    return _record(out, xs, backward, "concat")


def slice_axis(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    axis = axis % a.data.ndim
    if not 0 <= start < stop <= a.shape[axis]:
        raise TensorError(f"slice [{start}:{stop}) out of range for axis of size {a.shape[axis]}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = a.data[index].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record(out, (a,), backward, "slice")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (a,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply gain and bias."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise TensorError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        reduce = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=reduce) if gain.requires_grad else None
        gb = g.sum(axis=reduce) if bias.requires_grad else None
        return gx, gg, gb

    return _record(out, (x, gain, bias), backward, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    half = x.dtype.type(0.5)
    xd = x.data
    t = np.tanh(c * (xd + k * xd**3))
    out = half * xd * (1 + t)

    def backward(g):
        dt = (1 - t * t) * c * (1 + 3 * k * xd * xd)
        return (g * (half * (1 + t) + half * xd * dt),)

    return _record(out, (x,), backward, "gelu")


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]`` for an integer index array of any shape."""
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise TensorError(f"gather_rows: index out of range for table of {table.shape[0]} rows")
    out = table.data[index]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _record(out, (table,), backward, "gather_rows")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or ``rng`` is None."""
    if p <= 0.0 or rng is None:
        return x
    if not 0.0 < p < 1.0:
        raise TensorError(f"dropout probability {p} outside [0, 1)")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    out = x.data * keep
    return _record(out, (x,), lambda g: (g * keep,), "dropout")


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ``ignore_index``.

    ``logits`` is [N, C]. With every row ignored the loss is 0 and so is the gradient.
    """
    if logits.data.ndim != 2:
        raise TensorError(f"cross_entropy expects [N, C] logits, got {logits.shape}")
    n, c = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise TensorError(f"cross_entropy: {targets.shape[0]} targets for {n} rows")
    keep = targets != ignore_index
    if np.any((targets[keep] < 0) | (targets[keep] >= c)):
        raise TensorError("cross_entropy: target out of range")
    count = int(keep.sum())
    dtype = logits.dtype
    if count == 0:
        out = np.zeros((), dtype=dtype)
        return _record(out, (logits,), lambda g: (np.zeros_like(logits.data),), "cross_entropy")
    rows = np.nonzero(keep)[0]
    z = logits.data[rows]
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    nll = logsum - shifted[np.arange(count), targets[rows]]
    out = np.asarray(nll.sum() / count, dtype=dtype)

    def backward(g):
        probs = np.exp(shifted - logsum[:, None])
        probs[np.arange(count), targets[rows]] -= 1
        full = np.zeros_like(logits.data)
        full[rows] = probs * (g / count)
        return (full,)

    return _record(out, (logits,), backward, "cross_entropy")


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    samples: int = 200,
    rng: np.random.Generator | None = None,
    per_param_min: int = 1,
    oracle_dtype=np.longdouble,
) -> tuple[float, list[tuple[str, tuple[int, ...], float, float]]]:
    """Compare tape gradients with central differences.

    ``loss_fn`` must rebuild the scalar loss from the current parameter values
    and be deterministic. Run it on float64 parameters. Coordinates are drawn
    so that every parameter contributes at least ``per_param_min`` of them;
    for 2-D parameters only rows that receive gradient are eligible (rows of
    an embedding table that no input touches are identically zero on both
    sides). Returns the maximum relative error
    ``|a - n| / max(|a|, |n|, 1e-8)`` and the per-coordinate details.

    The analytic side runs in float64. The finite differences are evaluated
    with parameters cast to ``oracle_dtype``: in plain float64 the rounding
    noise of an O(1) loss (about 1e-11 after dividing by ``2*eps``) swamps
    coordinates whose gradient is below 1e-6, which attention query/key
    weights routinely are at initialization. On platforms where longdouble
    is float64 this degrades gracefully to the plain check.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        if p.dtype != np.float64:
            raise TensorError(f"grad_check needs float64 parameters, {p.name} is {p.dtype}")
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {id(p): p.grad.copy() for p in params}

    pools = []
    for p in params:
        if p.data.ndim == 2:
            rows = np.nonzero(np.any(analytic[id(p)] != 0, axis=1))[0]
            if rows.size == 0:
                rows = np.arange(p.shape[0])
            pools.append((p, rows))
        else:
            pools.append((p, None))

    def draw(p, rows):
        if rows is None:
            return tuple(int(i) for i in np.unravel_index(rng.integers(p.data.size), p.shape))
        return (int(rows[rng.integers(rows.size)]), int(rng.integers(p.shape[1])))

    picks = [(p, draw(p, rows)) for p, rows in pools for _ in range(per_param_min)]
    weights = np.array([p.data.size for p, _ in pools], dtype=np.float64)
    weights /= weights.sum()
    while len(picks) < samples:
        k = int(rng.choice(len(pools), p=weights))
        picks.append((pools[k][0], draw(*pools[k])))

    details = []
    worst = 0.0
    saved = [p.data for p in params]
    try:
        for p in params:
            p.data = p.data.astype(oracle_dtype)
        numerics = []
        for p, idx in picks:
            orig = p.data[idx]
            p.data[idx] = orig + oracle_dtype(eps)
            up = loss_fn().data
            p.data[idx] = orig - oracle_dtype(eps)
            down = loss_fn().data
            p.data[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise TensorError(f"non-finite loss while perturbing {p.name}{idx}")
            numerics.append(float((up - down) / (2 * oracle_dtype(eps))))
    finally:
        for p, data in zip(params, saved):
            p.data = data
    for (p, idx), numeric in zip(picks, numerics):
        a = float(analytic[id(p)][idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
        details.append((p.name, idx, a, numeric))
    return worst, details
