"""Dense tensors with reverse-mode gradients, on top of numpy.

Every differentiable operation records its parents and a closure mapping the
output gradient to parent gradients. ``Tensor.backward`` walks the recorded
graph in reverse topological order. Values are float32 by default; an
operation fed float64 inputs computes in float64, which is what
:func:`finite_diff_check` relies on.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DataError, DimensionError, NumericError

FLOAT = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


# --------------------------------------------------------------------------- #
# RNG
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class RngState:
    """Seed for the Philox counter-based generator.

    Independent streams are derived by name, so adding a new consumer never
    shifts the numbers another consumer sees.
    """

    seed: int

    def __post_init__(self) -> None:
        if not 0 <= int(self.seed) < 2**64:
            raise DataError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def generator(self, *stream: object) -> np.random.Generator:
        words = [int(self.seed) & 0xFFFFFFFF, int(self.seed) >> 32]
        for part in stream:
            digest = hashlib.sha256(str(part).encode("utf-8")).digest()
            words.extend(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))

    def child(self, *stream: object) -> "RngState":
        """A derived seed, for handing a reproducible stream to another component."""
        return RngState(int(self.generator("child", *stream).integers(0, 2**63)))


# --------------------------------------------------------------------------- #
# Tensor
# --------------------------------------------------------------------------- #


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        arr = np.asarray(data)
        if arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(FLOAT)
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values in tensor of shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------- #
# Elementwise and shape operations
# --------------------------------------------------------------------------- #


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        a = _lift(a)
        return _result(a.data + float(b), (a,), lambda g: (g,))
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        a = _lift(a)
        s = float(b)
        return _result(a.data * s, (a,), lambda g: (g * s,))
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data

    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if need_a else None
        gb = _unbroadcast(g * ad, bd.shape) if need_b else None
        return ga, gb

    return _result(ad * bd, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if need_b else None
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    return sum_all(x) / x.data.size


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)

    def backward(g):
        return (g * (s * (1.0 + xd * (1.0 - s))),)

    return _result(xd * s, (x,), backward)


def log_sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.minimum(xd, 0.0) - np.log1p(np.exp(-np.abs(xd)))

    def backward(g):
        return (g * _sigmoid(-xd),)

    return _result(out, (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))


# --------------------------------------------------------------------------- #
# Normalisation, softmax, losses
# --------------------------------------------------------------------------- #


def _check_finite(x: Tensor, what: str) -> None:
    if not np.isfinite(x.data).all():
        raise NumericError(f"{what}: non-finite input")


def log_softmax_rows(x: Tensor) -> Tensor:
    """Log-softmax along the last axis, stabilised by subtracting the row max."""
    _check_finite(x, "log_softmax_rows")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), backward)


def causal_softmax(scores: Tensor) -> Tensor:
    """Softmax over the last axis of ``[..., T, T]`` with key j > query i masked."""
    t = scores.shape[-1]
    future = np.triu(np.ones((t, t), dtype=bool), k=1)
    masked = np.where(future, -np.inf, scores.data)
    masked = masked - masked.max(axis=-1, keepdims=True)
    e = np.exp(masked)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (scores,), backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gain`` over the trailing axis."""
    if eps <= 0:
        raise DataError("rms_norm eps must be positive")
    if gain.ndim != 1 or x.shape[-1] != gain.shape[0]:
        raise DimensionError(f"rms_norm shape mismatch: x {x.shape}, gain {gain.shape}")
    xd, gd = x.data, gain.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    n = xd * r

    need_gain = gain.requires_grad

    def backward(g):
        gn = g * gd
        gx = r * (gn - n * (gn * n).mean(axis=-1, keepdims=True))
        ggain = (g * n).reshape(-1, gd.shape[0]).sum(axis=0) if need_gain else None
        return gx, ggain

    return _result(n * gd, (x, gain), backward)


def cross_entropy_next_token(logits: Tensor, targets: Sequence[int], mask: Sequence[bool]) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where ``mask`` holds."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [T, V], got {logits.shape}")
    t, v = logits.shape
    tgt = np.asarray(targets, dtype=np.int64)
    m = np.asarray(mask, dtype=bool)
    if tgt.shape != (t,) or m.shape != (t,):
        raise DimensionError(f"targets/mask must have length {t}, got {tgt.shape} and {m.shape}")
    if not m.any():
        raise DataError("cross entropy over an all-false mask is undefined")
    if tgt.min() < 0 or tgt.max() >= v:
        raise IndexError(f"target id out of range [0, {v})")
    _check_finite(logits, "cross_entropy_next_token")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    rows = np.nonzero(m)[0]
    count = len(rows)
    loss = -logp[rows, tgt[rows]].sum() / count

    def backward(g):
        probs = np.exp(logp)
        probs[np.arange(t), tgt] -= 1.0
        probs *= m[:, None]
        return (probs * (g / count),)

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward)


def pick(x: Tensor, rows: Sequence[int], cols: Sequence[int]) -> Tensor:
    """Gather ``x[rows[i], cols[i]]`` into a vector."""
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    shape, dtype = x.shape, x.data.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, (r, c), g)
        return (out,)

    return _result(x.data[r, c], (x,), backward)


# --------------------------------------------------------------------------- #
# Transformer building blocks
# --------------------------------------------------------------------------- #


def embedding(weight: Tensor, ids: Sequence[int]) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")
    shape, dtype = weight.shape, weight.data.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _result(weight.data[idx], (weight,), backward)


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate the two halves of the last axis of ``[..., T, hd]`` by position angles.

    ``cos``/``sin`` are ``[T, hd // 2]``.
    """
    half = x.shape[-1] // 2
    x1, x2 = x.data[..., :half], x.data[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def backward(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return _result(out, (x,), backward)


# --------------------------------------------------------------------------- #
# Gradient verification
# --------------------------------------------------------------------------- #


def _relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-3,
    mode: str = "directional",
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central differences.

    ``loss_fn`` must rebuild the loss from the current ``params`` on every call.
    Parameters are promoted to float64 for the duration of the check and
    restored afterwards.

    In ``"elementwise"`` mode every entry is perturbed on its own. In
    ``"directional"`` mode each parameter array is perturbed along one random
    unit-norm Gaussian direction ``v`` and ``<grad, v>`` is compared with the
    difference quotient, which checks every entry at the cost of two loss
    evaluations per array. Returns the worst relative error
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise DataError(f"eps must lie in [1e-5, 1e-2], got {eps}")
    if mode not in ("directional", "elementwise"):
        raise DataError(f"unknown mode {mode!r}")
    saved = {name: (p.data, p.grad) for name, p in params.items()}
    rng = RngState(seed).generator("finite_diff_check")

    def value() -> float:
        with no_grad():
            out = loss_fn()
        v = float(out.data)
        if not math.isfinite(v):
            raise NumericError("loss is not finite")
        return v

    try:
        for p in params.values():
            p.data = p.data.astype(np.float64)
            p.grad = None
        loss = loss_fn()
        if not np.isfinite(loss.data).all():
            raise NumericError("loss is not finite")
        loss.backward()
        worst = 0.0
        for p in params.values():
            base = p.data.copy()
            grad = p.grad if p.grad is not None else np.zeros_like(base)
            if mode == "elementwise":
                for idx in np.ndindex(base.shape):
                    p.data = base.copy()
                    p.data[idx] += eps
                    up = value()
                    p.data[idx] -= 2 * eps
                    down = value()
                    worst = max(worst, _relative_error(float(grad[idx]), (up - down) / (2 * eps)))
            else:
                direction = rng.standard_normal(base.shape)
                direction /= np.linalg.norm(direction)
                p.data = base + eps * direction
                up = value()
                p.data = base - eps * direction
                down = value()
                analytic = float((grad * direction).sum())
                worst = max(worst, _relative_error(analytic, (up - down) / (2 * eps)))
            p.data = base
        return worst
    finally:
        for name, p in params.items():
            p.data, p.grad = saved[name]
