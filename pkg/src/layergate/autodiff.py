"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tape` records every differentiable operation in append order; the
backward pass replays the tape once in reverse. Tapes are rebuilt per forward
pass, which keeps the design simple and makes parameter freezing trivial:
a tensor created with :func:`constant` carries no tape node and can never
receive a gradient.

Broadcasting is deliberately restricted to scalar-with-tensor and
equal-shape operands so every backward rule stays auditable.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError


class Tensor:
    """A numpy float64 array plus an optional tape-node id."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Optional["Tape"] = None, node: Optional[int] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def constant(data) -> Tensor:
    """Wrap an array as an untracked tensor; it never receives a gradient."""
    return Tensor(data)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("parents", "rule", "shape")

    def __init__(self, parents: tuple[int, ...], rule, shape: tuple[int, ...]):
        self.parents = parents
        self.rule = rule  # None marks a leaf
        self.shape = shape


class Tape:
    """Append-only record of operations; topological order equals append order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.rule_applications = 0  # set by the most recent backward pass

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data) -> Tensor:
        arr = np.asarray(data, dtype=np.float64)
        self.nodes.append(_Node((), None, arr.shape))
        return Tensor(arr, self, len(self.nodes) - 1)

    def _emit(self, out_data: np.ndarray, parents: tuple[int, ...], rule) -> Tensor:
        self.nodes.append(_Node(parents, rule, out_data.shape))
        return Tensor(out_data, self, len(self.nodes) - 1)


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tracked:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ContractError("operands recorded on different tapes")
    return tape


def _tracked_parents(*tensors: Tensor) -> tuple[int, ...]:
    return tuple(t.node for t in tensors if t.tracked)


def _is_scalar(arr: np.ndarray) -> bool:
    return arr.size == 1


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or _is_scalar(a.data) or _is_scalar(b.data):
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are neither equal nor scalar-with-tensor")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Only scalar broadcasting exists, so a mismatched gradient collapses to a scalar.
    if grad.shape == shape:
        return grad
    return np.sum(grad).reshape(shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with the last two axes; leading axes must match exactly."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2] or ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul: cannot multiply {ad.shape} by {bd.shape}")
    out = ad @ bd
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    a_tracked, b_tracked = a.tracked, b.tracked

    def rule(g):
        outs = []
        if a_tracked:
            outs.append(g @ np.swapaxes(bd, -1, -2))
        if b_tracked:
            outs.append(np.swapaxes(ad, -1, -2) @ g)
        return tuple(outs)

    return tape._emit(out, _tracked_parents(a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "add")
    out = a.data + b.data
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    a_shape, b_shape = a.shape, b.shape
    a_tracked, b_tracked = a.tracked, b.tracked

    def rule(g):
        outs = []
        if a_tracked:
            outs.append(_reduce_to(g, a_shape))
        if b_tracked:
            outs.append(_reduce_to(g, b_shape))
        return tuple(outs)

    return tape._emit(out, _tracked_parents(a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "sub")
    out = a.data - b.data
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    a_shape, b_shape = a.shape, b.shape
    a_tracked, b_tracked = a.tracked, b.tracked

    def rule(g):
        outs = []
        if a_tracked:
            outs.append(_reduce_to(g, a_shape))
        if b_tracked:
            outs.append(_reduce_to(-g, b_shape))
        return tuple(outs)

    return tape._emit(out, _tracked_parents(a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "mul")
    out = a.data * b.data
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    ad, bd = a.data, b.data
    a_tracked, b_tracked = a.tracked, b.tracked

    def rule(g):
        outs = []
        if a_tracked:
            outs.append(_reduce_to(g * bd, ad.shape))
        if b_tracked:
            outs.append(_reduce_to(g * ad, bd.shape))
        return tuple(outs)

    return tape._emit(out, _tracked_parents(a, b), rule)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python float; the multiplier is never differentiated."""
    out = x.data * c
    if not x.tracked:
        return Tensor(out)
    return x.tape._emit(out, (x.node,), lambda g: (g * c,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # overflow-safe without fancy indexing: exp(-|x|) is always <= 1
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(np.asarray(x.data, dtype=np.float64))
    if not x.tracked:
        return Tensor(s)
    return x.tape._emit(s, (x.node,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(np.asarray(x.data, dtype=np.float64))
    out = x.data * s
    if not x.tracked:
        return Tensor(out)
    xd = x.data
    return x.tape._emit(out, (x.node,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),))


def softmax_lastdim(x: Tensor) -> Tensor:
    y = x.data - np.max(x.data, axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= np.sum(y, axis=-1, keepdims=True)
    if not x.tracked:
        return Tensor(y)

    def rule(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return x.tape._emit(y, (x.node,), rule)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the target class per row.

    Stabilized by max-subtraction; the backward rule is
    (softmax - onehot) / rows.
    """
    ld = logits.data
    if ld.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: expected 2-d logits, got {ld.shape}")
    targets = np.asarray(targets)
    b, v = ld.shape
    if targets.shape != (b,):
        raise DimensionError(f"softmax_cross_entropy: targets {targets.shape} do not match batch {b}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target index out of range for {v} classes")
    z = ld - np.max(ld, axis=1, keepdims=True)
    logsumexp = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -np.mean(logp[np.arange(b), targets])
    if not logits.tracked:
        return Tensor(loss)

    def rule(g):
        d = np.exp(logp)
        d[np.arange(b), targets] -= 1.0
        return (d * (float(g) / b),)

    return logits.tape._emit(np.asarray(loss), (logits.node,), rule)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain over the last axis."""
    xd, gd = x.data, gain.data
    if gd.ndim != 1 or xd.shape[-1] != gd.shape[0]:
        raise DimensionError(f"rmsnorm: gain {gd.shape} does not match last axis of {xd.shape}")
    d = xd.shape[-1]
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    out = xd * r * gd
    tape = _tape_of(x, gain)
    if tape is None:
        return Tensor(out)
    x_tracked, g_tracked = x.tracked, gain.tracked

    def rule(g):
        outs = []
        gx = g * gd
        if x_tracked:
            outs.append(gx * r - xd * (np.sum(gx * xd, axis=-1, keepdims=True) * (r ** 3) / d))
        if g_tracked:
            lead = tuple(range(xd.ndim - 1))
            outs.append(np.sum(g * xd * r, axis=lead))
        return tuple(outs)

    return tape._emit(out, _tracked_parents(x, gain), rule)


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a 2-d table; indices may have any shape."""
    td = table.data
    if td.ndim != 2:
        raise DimensionError(f"gather_rows: expected 2-d table, got {td.shape}")
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= td.shape[0]):
        raise IndexError(f"row index out of range for table with {td.shape[0]} rows")
    out = td[idx]
    if not table.tracked:
        return Tensor(out)

    def rule(g):
        acc = np.zeros_like(td)
        np.add.at(acc, idx, g)
        return (acc,)

    return table.tape._emit(out, (table.node,), rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(tuple(shape))
    if not x.tracked:
        return Tensor(out)
    orig = x.shape
    return x.tape._emit(out, (x.node,), lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = x.data.transpose(axes)
    if not x.tracked:
        return Tensor(out)
    inv = tuple(np.argsort(axes))
    return x.tape._emit(out, (x.node,), lambda g: (g.transpose(inv),))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(np.sum(x.data))
    if not x.tracked:
        return Tensor(out)
    shape = x.shape
    return x.tape._emit(out, (x.node,), lambda g: (np.broadcast_to(g, shape).copy(),))


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar loss for every tracked leaf on its tape.

    Visits nodes exactly once in reverse append order; leaves that do not
    feed the loss receive zeros. A constant loss yields an empty map.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.tracked:
        return {}
    tape = loss.tape
    pending: dict[int, np.ndarray] = {loss.node: np.ones((), dtype=np.float64)}
    grads: dict[int, np.ndarray] = {}
    applications = 0
    for nid in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[nid]
        g = pending.pop(nid, None)
        if node.rule is None:
            grads[nid] = g if g is not None else np.zeros(node.shape, dtype=np.float64)
            continue
        if g is None:
            g = np.zeros(node.shape, dtype=np.float64)
        applications += 1
        for pid, pg in zip(node.parents, node.rule(g)):
            if pid in pending:
                pending[pid] = pending[pid] + pg
            else:
                pending[pid] = pg
    tape.rule_applications = applications
    return grads


def grad_for(grads: dict[int, np.ndarray], leaf: Tensor) -> np.ndarray:
    if not leaf.tracked:
        raise ContractError("grad_for: tensor is not tracked on any tape")
    return grads[leaf.node]
