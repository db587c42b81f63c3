"""Small reverse-mode differentiation engine over dense numpy arrays.

Every operation appends a record to the :class:`Tape` that owns its inputs.
:func:`backward` walks the records in reverse and accumulates vector-Jacobian
products into a gradient table keyed by parameter name.

Everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class Tensor:
    __slots__ = ("data", "tape", "name", "_index")

    def __init__(self, data, tape: "Tape", name: str | None = None, index: int = -1):
        self.data = data
        self.tape = tape
        self.name = name
        self._index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


@dataclass
class Tape:
    """Linear record of operations; records are stored in evaluation order."""

    records: list[_Record] = field(default_factory=list)
    check_finite: bool = True

    def _push(self, data, inputs, vjp, name=None) -> Tensor:
        data = np.asarray(data, dtype=np.float64)
        if self.check_finite and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite value produced by {name or 'operation'}")
        t = Tensor(data, self, name, len(self.records))
        self.records.append(_Record(t, tuple(inputs), vjp))
        return t

    def param(self, array, name: str) -> Tensor:
        """Record a named leaf whose gradient will be reported."""
        return self._push(np.array(array, dtype=np.float64), (), None, name)

    def constant(self, array) -> Tensor:
        return self._push(np.asarray(array, dtype=np.float64), (), None)

    def params(self, arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: self.param(v, k) for k, v in arrays.items()}


def _lift(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("tensors belong to different tapes")
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise TypeError("at least one argument must be a Tensor")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    sa, sb = a.shape, b.shape
    return tape._push(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    sa, sb = a.shape, b.shape
    return tape._push(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    ad, bd = a.data, b.data
    return tape._push(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def square(x: Tensor) -> Tensor:
    xd = x.data
    return x.tape._push(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


def rsqrt(x: Tensor) -> Tensor:
    xd = x.data
    out = 1.0 / np.sqrt(xd)
    return x.tape._push(out, (x,), lambda g: (-0.5 * out / xd * g,), "rsqrt")


def elu(x: Tensor) -> Tensor:
    """ELU with alpha = 1: x for x >= 0, exp(x) - 1 otherwise."""
    xd = x.data
    neg = xd < 0
    ex = np.exp(np.where(neg, xd, 0.0))
    out = np.where(neg, ex - 1.0, xd)
    return x.tape._push(out, (x,), lambda g: (np.where(neg, ex, 1.0) * g,), "elu")


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    return tape._push(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(W, b, x) -> Tensor:
    """``W @ x + b`` for a vector ``x``, or row-wise ``x @ W.T + b`` for a matrix."""
    tape = _tape_of(W, b, x)
    W, x = _lift(W, tape), _lift(x, tape)
    Wd, xd = W.data, x.data
    if Wd.ndim != 2 or xd.shape[-1] != Wd.shape[1]:
        raise ValueError(f"linear shape mismatch: W{Wd.shape} x{xd.shape}")
    out = xd @ Wd.T
    if b is None:
        if xd.ndim == 1:
            vjp = lambda g: (np.outer(g, xd), g @ Wd)
        else:
            vjp = lambda g: (g.T @ xd, g @ Wd)
        return tape._push(out, (W, x), vjp, "linear")
    b = _lift(b, tape)
    if b.shape != (Wd.shape[0],):
        raise ValueError(f"bias shape {b.shape} does not match W{Wd.shape}")
    out = out + b.data
    if xd.ndim == 1:
        vjp = lambda g: (np.outer(g, xd), g, g @ Wd)
    else:
        vjp = lambda g: (g.T @ xd, g.sum(axis=0), g @ Wd)
    return tape._push(out, (W, b, x), vjp, "linear")


# -- structural ----------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return x.tape._push(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return tape._push(
        np.concatenate([x.data for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concat",
    )


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``x[index]``; an index of -1 yields a zero row."""
    index = np.asarray(index, dtype=np.int64)
    xd = x.data
    n = xd.shape[0]
    pad = index < 0
    safe = np.where(pad, 0, index)
    out = xd[safe]
    if pad.any():
        out[pad] = 0.0

    def vjp(g):
        gx = np.zeros((n,) + g.shape[index.ndim :])
        keep = ~pad
        np.add.at(gx, safe[keep], g[keep])
        return (gx,)

    return x.tape._push(out, (x,), vjp, "gather_rows")


def segment_sum(x: Tensor, segment: np.ndarray, count: int) -> Tensor:
    """Sum rows of ``x`` into ``count`` buckets given by ``segment``."""
    segment = np.asarray(segment, dtype=np.int64)
    out = np.zeros((count,) + x.shape[1:])
    np.add.at(out, segment, x.data)
    return x.tape._push(out, (x,), lambda g: (g[segment],), "segment_sum")


def segment_mean(x: Tensor, segment: np.ndarray, count: int) -> Tensor:
    segment = np.asarray(segment, dtype=np.int64)
    sizes = np.bincount(segment, minlength=count).astype(np.float64)
    if np.any(sizes == 0):
        raise ValueError("segment_mean over an empty segment")
    out = np.zeros((count,) + x.shape[1:])
    np.add.at(out, segment, x.data)
    out /= sizes.reshape((-1,) + (1,) * (x.data.ndim - 1))
    scale = (1.0 / sizes)[segment].reshape((-1,) + (1,) * (x.data.ndim - 1))
    return x.tape._push(out, (x,), lambda g: (g[segment] * scale,), "segment_mean")


def total(x: Tensor) -> Tensor:
    shape = x.shape
    return x.tape._push(np.sum(x.data), (x,), lambda g: (np.full(shape, g),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return x.tape._push(np.mean(x.data), (x,), lambda g: (np.full(shape, g / n),), "mean")


# -- losses --------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of a (B, C) logit matrix, log-sum-exp stabilized."""
    z = logits.data
    if z.ndim == 1:
        z = z[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B, C = z.shape
    if labels.shape != (B,):
        raise ValueError("one label per row expected")
    if np.any((labels < 0) | (labels >= C)):
        raise ValueError(f"label out of range for {C} classes")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - lse[:, None]
    loss = -logp[np.arange(B), labels].mean()
    shape = logits.shape

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return ((g / B) * p.reshape(shape),)

    return logits.tape._push(loss, (logits,), vjp, "cross_entropy")


def l1(pred: Tensor, target) -> Tensor:
    """Mean absolute error."""
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    diff = pred.data - target
    n = diff.size
    return pred.tape._push(
        np.abs(diff).mean(), (pred,), lambda g: (np.sign(diff) * (g / n),), "l1"
    )


# -- reverse pass --------------------------------------------------------------


def backward(tape: Tape, output: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a recorded scalar with respect to every named parameter."""
    idx = output._index
    if output.tape is not tape or idx < 0 or idx >= len(tape.records) or tape.records[idx].out is not output:
        raise ValueError("output was not recorded on this tape")
    if output.data.size != 1:
        raise ValueError("backward needs a scalar output")
    grads: dict[int, np.ndarray] = {idx: np.ones_like(output.data)}
    for rec in reversed(tape.records[: idx + 1]):
        i = rec.out._index
        g = grads.get(i)
        if g is None or rec.vjp is None:
            continue
        del grads[i]
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None:
                continue
            j = inp._index
            if j in grads:
                grads[j] = grads[j] + gi
            else:
                grads[j] = gi
    table = {}
    for rec in tape.records:
        t = rec.out
        if t.name is not None and rec.vjp is None and not rec.inputs:
            table[t.name] = grads.get(t._index, np.zeros_like(t.data))
    return table


def value_and_grad(f: Callable[[Tape, dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray]):
    """Evaluate ``f`` on a fresh tape; return (value, gradient table)."""
    tape = Tape()
    out = f(tape, tape.params(params))
    return out.item(), backward(tape, out)


def grad_check(
    f: Callable[[Tape, dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
    detail: bool = False,
):
    """Max relative error between reverse-mode and central-difference gradients.

    ``coords`` limits the check to a random subset of parameter entries. With
    ``detail`` the result is ``(error, name, index, analytic, numeric)`` for the
    worst entry.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError("step h must lie in [1e-6, 1e-3]")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, analytic = value_and_grad(f, params)

    def evaluate(p):
        tape = Tape()
        return f(tape, tape.params(p)).item()

    entries = [(k, i) for k, v in params.items() for i in range(v.size)]
    if coords is not None and coords < len(entries):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(entries), size=coords, replace=False)
        entries = [entries[i] for i in sorted(pick)]
    worst = (0.0, None, None, 0.0, 0.0)
    for name, i in entries:
        flat = params[name].reshape(-1)
        keep = flat[i]
        flat[i] = keep + h
        fp = evaluate(params)
        flat[i] = keep - h
        fm = evaluate(params)
        flat[i] = keep
        numeric = (fp - fm) / (2 * h)
        exact = analytic[name].reshape(-1)[i]
        if not (np.isfinite(numeric) and np.isfinite(exact)):
            raise NonFiniteError(f"non-finite gradient at {name}[{i}]")
        err = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
        if err > worst[0]:
            worst = (err, name, i, float(exact), float(numeric))
    return worst if detail else worst[0]
