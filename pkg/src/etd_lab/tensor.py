"""Dense float64 tensors with a reverse-mode gradient tape.

Operations only record onto a tape when one is active (``with Tape() as tape``)
and at least one input requires a gradient. Outside a tape every op is a plain
numpy computation, which is what inference and profiling use.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()
_CHECK_OPS = False


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached a tensor."""


def set_op_finite_checks(enabled: bool) -> None:
    """Check every op output for NaN/Inf (slow; meant for debugging and tests)."""
    global _CHECK_OPS
    _CHECK_OPS = bool(enabled)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, *, _trusted: bool = False):
        if _trusted:
            self.data = data
        else:
            arr = np.array(data, dtype=np.float64)
            _check_finite(arr, "tensor construction")
            self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad, _trusted=True)


def ones(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(tuple(shape)), requires_grad=requires_grad, _trusted=True)


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("out", "parents", "backward", "name")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable, name: str):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.name = name


class Tape:
    """Ordered record of differentiable ops executed while the tape is active.

    Nodes are appended in execution order, so the record is already a
    topological order; :meth:`backward` walks it once in reverse and then
    releases it. A second call raises.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def op_names(self) -> list[str]:
        return [n.name for n in self.nodes]

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable, name: str) -> None:
        if self.consumed:
            raise RuntimeError("tape was already consumed by backward(); start a new Tape")
        node = _Node(out, parents, backward, name)
        out._node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise RuntimeError("backward() called twice on the same tape without a reset")
        if loss.data.shape != ():
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._node is None or not any(n is loss._node for n in reversed(self.nodes)):
            raise ValueError("loss was not recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if parent._node is None:
                    leaves[key] = parent
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for key, leaf in leaves.items():
            g = grads.pop(key)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        # leaves used on the tape but not reachable from the loss get explicit zeros
        for node in self.nodes:
            for parent in node.parents:
                if parent.requires_grad and parent._node is None and parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
        for node in self.nodes:
            node.out._node = None
        self.nodes = []
        self.consumed = True


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``."""
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise RuntimeError("backward() needs the Tape the loss was recorded on")
    tape.backward(loss)


def _out(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable, name: str) -> Tensor:
    if _CHECK_OPS:
        _check_finite(data, name)
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _trusted=True)
    if needs:
        tape.record(out, parents, backward_fn, name)
    return out


# ---------------------------------------------------------------------------
# elementwise


def _check_trailing(a: tuple[int, ...], b: tuple[int, ...], op: str) -> tuple[int, ...]:
    if a == b:
        return a
    big, small = (a, b) if len(a) >= len(b) else (b, a)
    if len(small) == 0 or big[len(big) - len(small):] == small:
        return big
    raise DimensionError(f"{op}: shapes {a} and {b} are not trailing-broadcast compatible")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _out(a.data + b.data, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _out(ad * bd, (a, b), bw, "mul")


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each last-axis row of ``x`` by the matching entry of ``s`` (shape ``x.shape[:-1]``)."""
    if s.shape != x.shape[:-1]:
        raise DimensionError(f"scale_rows: {x.shape} / {s.shape}")
    xd, sd = x.data, s.data[..., None]

    def bw(g):
        return g * sd, (g * xd).sum(-1)

    return _out(xd * sd, (x, s), bw, "scale_rows")


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def neg(a: Tensor) -> Tensor:
    return _out(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    return _out(a.data * c, (a,), lambda g: (g * c,), "scale")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp overflow for very negative x gives 1/(1+inf) = 0, which is the right limit
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _out(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)

    def bw(g):
        return (g * (s * (1.0 + x * (1.0 - s))),)

    return _out(x * s, (a,), bw, "silu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _out(0.5 * x * (1.0 + t), (a,), bw, "gelu")


def scalar_map(a: Tensor, kind: str, c: float | None = None) -> Tensor:
    if kind == "silu":
        return silu(a)
    if kind == "gelu":
        return gelu(a)
    if kind == "neg":
        return neg(a)
    if kind == "scale":
        if c is None:
            raise ValueError("scale needs a constant")
        return scale(a, c)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown scalar_map kind {kind!r}")


def where_rows(keep_new: np.ndarray, new: Tensor, old: Tensor) -> Tensor:
    """Row-wise select: ``new`` where ``keep_new`` (shape ``new.shape[:-1]``) else ``old``."""
    if new.shape != old.shape or keep_new.shape != new.shape[:-1]:
        raise DimensionError(f"where_rows: {keep_new.shape} / {new.shape} / {old.shape}")
    m = keep_new[..., None]

    def bw(g):
        return np.where(m, g, 0.0), np.where(m, 0.0, g)

    return _out(np.where(m, new.data, old.data), (new, old), bw, "where_rows")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _out(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _out(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _out(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _out(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a 2-D matrix shared across ``a``'s leading axes, or has the
    same leading axes as ``a``.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")
    if bd.ndim > 2 and bd.shape[:-2] != ad.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {ad.shape} @ {bd.shape}")

    if bd.ndim == 2 and ad.ndim > 2:
        k, n = bd.shape
        a2 = ad.reshape(-1, k)

        def bw(g):
            g2 = g.reshape(-1, n)
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _out((a2 @ bd).reshape(ad.shape[:-1] + (n,)), (a, b), bw, "matmul")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _out(ad @ bd, (a, b), bw, "matmul")


def softmax_rows(a: Tensor, causal: bool = False) -> Tensor:
    """Softmax over the last axis. ``causal`` zeroes entries above the diagonal
    of the trailing square block (key index > query index)."""
    x = a.data
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    if causal:
        t_q, t_k = x.shape[-2], x.shape[-1]
        future = np.triu(np.ones((t_q, t_k), dtype=bool), k=1)
        x = np.where(future, -np.inf, x)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _out(s, (a,), bw, "softmax")


def rms_norm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    if eps <= 0:
        raise ValueError("rms_norm eps must be positive")
    xd, gd = x.data, gain.data
    if gd.shape != (xd.shape[-1],):
        raise DimensionError(f"rms_norm gain {gd.shape} does not match feature size {xd.shape[-1]}")
    d = xd.shape[-1]
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv

    def bw(g):
        gg = g * gd
        gx = inv * (gg - xhat * (gg * xhat).sum(axis=-1, keepdims=True) / d)
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        return gx, ggain

    return _out(xhat * gd, (x, gain), bw, "rms_norm")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise ValueError(f"token id out of range [0, {v})")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _out(table.data[ids], (table,), bw, "embedding")


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position encoding over the last axis (split-half convention).

    ``cos``/``sin`` have shape ``(T, head_dim)`` and broadcast over leading axes.
    """
    xd = x.data
    h = xd.shape[-1] // 2

    def rot(v):
        return np.concatenate([-v[..., h:], v[..., :h]], axis=-1)

    def rot_t(v):
        return np.concatenate([v[..., h:], -v[..., :h]], axis=-1)

    def bw(g):
        return (g * cos + rot_t(g * sin),)

    return _out(xd * cos + rot(xd) * sin, (x,), bw, "rope")


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is true."""
    z = logits.data
    v = z.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != z.shape[:-1]:
        raise DimensionError(f"targets {targets.shape} do not match logits {z.shape}")
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != targets.shape:
        raise DimensionError(f"mask {mask.shape} does not match targets {targets.shape}")
    sel = targets[mask]
    if sel.size and (sel.min() < 0 or sel.max() >= v):
        raise ValueError(f"target id out of range [0, {v})")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cross_entropy mask selects no positions")
    _check_finite(z, "logits")
    safe_t = np.where(mask, targets, 0)
    m = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=-1, keepdims=True)) + m
    logp_t = np.take_along_axis(z, safe_t[..., None], axis=-1) - lse
    loss = -(logp_t[..., 0] * mask).sum() / n

    def bw(g):
        p = np.exp(z - lse)
        np.put_along_axis(p, safe_t[..., None], np.take_along_axis(p, safe_t[..., None], axis=-1) - 1.0, axis=-1)
        return (p * (mask[..., None] * (float(g) / n)),)

    return _out(np.asarray(loss), (logits,), bw, "cross_entropy")


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)
