"""Dense float64 tensors with tape-based reverse-mode differentiation.

Arrays are plain numpy ``float64`` buffers. Every op computes its result
eagerly and, when a :class:`Tape` is active and at least one input requires
gradients, appends a record holding a closure that maps the output gradient
to input gradients. :func:`backward` walks the tape in reverse.

Only the op set needed by a small llama-style transformer is provided.
There is no general broadcasting: ``add`` accepts either equal shapes or a
1-D row bias, and ``mul`` accepts equal shapes or a Python scalar.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels

# Pre-softmax fill for disallowed attention pairs.
NEG_INF = -1e30


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class OpRecord:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered op log for one forward pass. Confined to the creating thread."""

    records: list[OpRecord] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _emit(kind: str, inputs: tuple[Tensor, ...], out: np.ndarray, grad_fn) -> Tensor:
    result = Tensor(out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.records.append(OpRecord(kind, inputs, result, grad_fn))
    return result


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Leaf tensors accumulate across calls; intermediates are overwritten.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    produced = {id(r.output) for r in tape.records}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.output))
        if g is None:
            continue
        rec.output.grad = g
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in produced:
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            else:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
    if id(loss) not in produced and loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0


# --------------------------------------------------------------------------- ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b``. Either equal leading dims, or ``b`` is a 2-D shared weight."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {ad.shape} @ {bd.shape}")
    shared = bd.ndim == 2 and ad.ndim > 2
    if not shared and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: leading dims differ, {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit("matmul", (a, b), out, grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        return _emit("add", (a, b), ad + bd, lambda g: (g, g))
    if bd.ndim == 1 and ad.shape[-1] == bd.shape[0]:
        return _emit("add", (a, b), ad + bd,
                     lambda g: (g, g.reshape(-1, bd.shape[0]).sum(axis=0)))
    raise ShapeError(f"add: shapes {ad.shape} and {bd.shape} are not compatible")


def mul(a: Tensor, b: Tensor | float) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _emit("mul", (a,), a.data * c, lambda g: (g * c,))
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        raise ShapeError(f"mul: shapes {ad.shape} and {bd.shape} differ")
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def softmax_rows(x: Tensor) -> Tensor:
    p = kernels.softmax_forward(x.data)

    def grad_fn(g):
        return (kernels.softmax_backward(p, g),)

    return _emit("softmax_rows", (x,), p, grad_fn)


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    xd, wd = x.data, weight.data
    if wd.ndim != 1 or xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"rmsnorm: weight {wd.shape} does not match last dim of {xd.shape}")
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv

    def grad_fn(g):
        gw = (g * xhat).reshape(-1, wd.shape[0]).sum(axis=0)
        gh = g * wd
        gx = inv * (gh - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw

    return _emit("rmsnorm", (x, weight), xhat * wd, grad_fn)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    return _emit("silu", (x,), xd * sig, lambda g: (g * sig * (1.0 + xd * (1.0 - sig)),))


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise ShapeError(f"embedding_lookup: ids outside [0, {rows})")

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _emit("embedding_lookup", (table,), table.data[ids], grad_fn)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    tails = {p.data.shape[1:] for p in parts}
    if len(tails) != 1:
        raise ShapeError(f"concat_rows: trailing shapes differ: {sorted(tails)}")
    cuts = np.cumsum([p.data.shape[0] for p in parts])[:-1]
    return _emit("concat_rows", tuple(parts),
                 np.concatenate([p.data for p in parts], axis=0),
                 lambda g: np.split(g, cuts, axis=0))


def cross_entropy_rows(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Row-wise softmax cross-entropy against integer targets.

    ``reduction`` is ``"mean"``, ``"sum"`` or ``"none"`` (per-row vector).
    """
    ld = logits.data
    targets = np.asarray(targets, dtype=np.int64)
    if ld.ndim != 2 or targets.shape != (ld.shape[0],):
        raise ShapeError(f"cross_entropy_rows: logits {ld.shape} vs targets {targets.shape}")
    rows = np.arange(ld.shape[0])
    m = ld.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(ld - m).sum(axis=1))
    per_row = lse - ld[rows, targets]
    probs = np.exp(ld - lse[:, None])
    probs[rows, targets] -= 1.0
    if reduction == "none":
        return _emit("cross_entropy_rows", (logits,), per_row, lambda g: (probs * g[:, None],))
    scale = 1.0 / max(ld.shape[0], 1) if reduction == "mean" else 1.0
    out = per_row.sum() * scale
    return _emit("cross_entropy_rows", (logits,), np.asarray(out),
                 lambda g: (probs * (float(g) * scale),))


def masked_fill(x: Tensor, fill_mask, value: float = NEG_INF) -> Tensor:
    """Replace entries where ``fill_mask`` is true by ``value``."""
    fill_mask = np.asarray(fill_mask, dtype=bool)
    if fill_mask.shape != x.data.shape:
        raise ShapeError(f"masked_fill: mask {fill_mask.shape} vs input {x.data.shape}")
    return _emit("masked_fill", (x,), np.where(fill_mask, value, x.data),
                 lambda g: (np.where(fill_mask, 0.0, g),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.data.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inverse),))


def take_rows(x: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _emit("take_rows", (x,), x.data[index], grad_fn)


def pad_rows(x: Tensor, real_index, padded_rows: int) -> Tensor:
    """Scatter packed rows into a zero-filled ``[padded_rows, ...]`` layout."""
    real_index = np.asarray(real_index, dtype=np.int64)
    out = np.zeros((padded_rows,) + x.data.shape[1:])
    out[real_index] = x.data
    return _emit("pad_rows", (x,), out, lambda g: (g[real_index],))


def unpad_rows(x: Tensor, real_index) -> Tensor:
    """Inverse of :func:`pad_rows`: keep only the rows listed in ``real_index``."""
    real_index = np.asarray(real_index, dtype=np.int64)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[real_index] = g
        return (gx,)

    return _emit("unpad_rows", (x,), x.data[real_index], grad_fn)


def total(x: Tensor) -> Tensor:
    return _emit("sum", (x,), np.asarray(x.data.sum()),
                 lambda g: (np.full_like(x.data, float(g)),))


def rope_tables(positions, head_dim: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    if head_dim % 2:
        raise ShapeError(f"rope: head_dim must be even, got {head_dim}")
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary embedding over the last axis (half-split pairing), positions on axis -2."""
    xd = x.data
    half = xd.shape[-1] // 2
    if cos.shape != (xd.shape[-2], half):
        raise ShapeError(f"rope: tables {cos.shape} do not fit input {xd.shape}")
    x1, x2 = xd[..., :half], xd[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def grad_fn(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return _emit("rope", (x,), out, grad_fn)


_OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "softmax_rows": softmax_rows,
    "rmsnorm": rmsnorm,
    "silu": silu,
    "embedding_lookup": embedding_lookup,
    "concat_rows": concat_rows,
    "cross_entropy_rows": cross_entropy_rows,
    "masked_fill": masked_fill,
}


def op_forward(op_kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Dispatch by name. ``attrs`` carries non-tensor arguments (ids, targets, mask)."""
    attrs = attrs or {}
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    if op_kind == "concat_rows":
        return fn(list(inputs))
    if op_kind == "embedding_lookup":
        return fn(inputs[0], attrs["ids"])
    if op_kind == "cross_entropy_rows":
        return fn(inputs[0], attrs["targets"], attrs.get("reduction", "mean"))
    if op_kind == "masked_fill":
        return fn(inputs[0], attrs["mask"], attrs.get("value", NEG_INF))
    if op_kind == "rmsnorm":
        return fn(inputs[0], inputs[1], attrs.get("eps", 1e-6))
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    per_param: list[float]
    max_rel_error: float
    tolerance: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    tolerance: float,
    *,
    step: float = 1e-5,
    samples: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare tape gradients of ``f()`` with central differences.

    ``samples`` limits the number of scalar entries checked (drawn uniformly
    over all parameter entries); ``None`` checks every entry. Relative error
    is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    sizes = [p.data.size for p in params]
    if samples is None:
        picks = [(i, j) for i, n in enumerate(sizes) for j in range(n)]
    else:
        rng = np.random.default_rng(seed)
        flat = rng.choice(sum(sizes), size=min(samples, sum(sizes)), replace=False)
        offsets = np.cumsum([0] + sizes)
        picks = []
        for k in np.sort(flat):
            i = int(np.searchsorted(offsets, k, side="right") - 1)
            picks.append((i, int(k - offsets[i])))

    per_param = [0.0] * len(params)
    for i, j in picks:
        view = params[i].data.reshape(-1)
        orig = view[j]
        view[j] = orig + step
        up = f().item()
        view[j] = orig - step
        down = f().item()
        view[j] = orig
        numeric = (up - down) / (2.0 * step)
        a = float(analytic[i].reshape(-1)[j])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        per_param[i] = max(per_param[i], err)
    return GradCheckReport(per_param, max(per_param, default=0.0), tolerance, len(picks))
