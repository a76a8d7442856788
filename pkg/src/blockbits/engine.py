"""Dense float64 tensors with tape-based reverse-mode differentiation.

Tensors are plain read-only ``numpy.ndarray`` objects of dtype float64. A
:class:`Tape` records a fixed set of primitive ops; :func:`grad` walks the
recording backwards once and returns a gradient per requested parameter.

The op set is closed on purpose: exactly what the toy decoder and the
sensitivity estimators need.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from . import _kernels
from .errors import ContractError, NumericError, ShapeError

# Large finite fill for masked attention scores; exp() of it underflows to 0.
MASK_FILL = -1e9
RMS_EPS = 1e-6

OPS = (
    "param", "const", "matmul", "add", "mul", "scale", "transpose",
    "reshape", "softmax", "rms_norm", "silu", "gelu", "embedding",
    "causal_mask", "cross_entropy", "sum",
)


def as_tensor(x) -> np.ndarray:
    """Copy ``x`` into a read-only float64 array, rejecting non-finite data."""
    arr = np.array(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains non-finite values")
    arr.flags.writeable = False
    return arr


def _frozen(arr):
    if not isinstance(arr, np.ndarray):
        arr = np.array(arr)
    arr.flags.writeable = False
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product over the last two axes with a fixed summation order.

    Leading axes (if any) must be identical on both operands.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul operands {a.shape} and {b.shape} are incompatible")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return _kernels.matmul(a, b)


def _swap_last(x):
    return np.swapaxes(x, -1, -2)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Node:
    """One recorded value. ``parents`` index into the owning tape."""

    __slots__ = ("index", "op", "value", "parents", "aux", "name")

    def __init__(self, index, op, value, parents=(), aux=None, name=None):
        self.index = index
        self.op = op
        self.value = value
        self.parents = parents
        self.aux = aux
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.index}, {self.op}, shape={self.value.shape})"


class Tape:
    """Records primitive ops in execution order.

    With ``record=False`` the tape only evaluates; nothing is retained and
    no gradients can be taken. This is the cheap path for loss evaluation.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    # -- bookkeeping -------------------------------------------------------
    def _push(self, op, value, parents=(), aux=None, name=None):
        value = _frozen(value)
        if not self.record:
            return Node(-1, op, value)
        node = Node(len(self.nodes), op, value, tuple(p.index for p in parents), aux, name)
        self.nodes.append(node)
        return node

    def _check(self, *nodes):
        if self.record:
            for n in nodes:
                if n.index < 0 or n.index >= len(self.nodes) or self.nodes[n.index] is not n:
                    raise ContractError("operand does not belong to this tape")

    # -- leaves ------------------------------------------------------------
    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise ContractError(f"parameter {name!r} recorded twice")
        node = self._push("param", np.array(value, dtype=np.float64), name=name)
        if self.record:
            self.params[name] = node
        return node

    def const(self, value) -> Node:
        return self._push("const", np.array(value, dtype=np.float64))

    # -- ops ---------------------------------------------------------------
    def matmul(self, a: Node, b: Node) -> Node:
        self._check(a, b)
        return self._push("matmul", matmul(a.value, b.value), (a, b))

    def add(self, a: Node, b: Node) -> Node:
        self._check(a, b)
        if a.shape != b.shape:
            raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
        return self._push("add", a.value + b.value, (a, b))

    def mul(self, a: Node, b: Node) -> Node:
        """Elementwise product; ``b`` may also be a vector over ``a``'s last axis."""
        self._check(a, b)
        if a.shape != b.shape and not (b.value.ndim == 1 and a.shape[-1:] == b.shape):
            raise ShapeError(f"mul needs equal shapes or a trailing vector, got {a.shape} and {b.shape}")
        return self._push("mul", a.value * b.value, (a, b))

    def scale(self, a: Node, c: float) -> Node:
        self._check(a)
        c = float(c)
        return self._push("scale", a.value * c, (a,), aux=c)

    def transpose(self, a: Node, axes=None) -> Node:
        self._check(a)
        if axes is None:
            axes = tuple(range(a.value.ndim - 2)) + (a.value.ndim - 1, a.value.ndim - 2)
        axes = tuple(axes)
        return self._push("transpose", np.ascontiguousarray(np.transpose(a.value, axes)), (a,), aux=axes)

    def reshape(self, a: Node, shape) -> Node:
        self._check(a)
        return self._push("reshape", a.value.reshape(shape), (a,), aux=a.shape)

    def softmax(self, a: Node) -> Node:
        self._check(a)
        z = a.value - a.value.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return self._push("softmax", e / e.sum(axis=-1, keepdims=True), (a,))

    def rms_norm(self, a: Node, eps: float = RMS_EPS) -> Node:
        """``x / sqrt(mean(x**2) + eps)`` over the last axis (no gain)."""
        self._check(a)
        r = np.sqrt(np.mean(a.value * a.value, axis=-1, keepdims=True) + eps)
        return self._push("rms_norm", a.value / r, (a,), aux=r)

    def silu(self, a: Node) -> Node:
        self._check(a)
        return self._push("silu", a.value * _sigmoid(a.value), (a,))

    def gelu(self, a: Node) -> Node:
        self._check(a)
        x = a.value
        return self._push("gelu", 0.5 * x * (1.0 + erf(x / math.sqrt(2.0))), (a,))

    def embedding(self, table: Node, ids) -> Node:
        self._check(table)
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise ShapeError("embedding index out of range")
        return self._push("embedding", table.value[ids], (table,), aux=ids)

    def causal_mask(self, a: Node) -> Node:
        """Fill entries above the diagonal of the last two axes with MASK_FILL."""
        self._check(a)
        t, s = a.shape[-2:]
        keep = np.tril(np.ones((t, s), dtype=bool))
        return self._push("causal_mask", np.where(keep, a.value, MASK_FILL), (a,), aux=keep)

    def cross_entropy(self, logits: Node, targets) -> Node:
        """Mean negative log-likelihood of integer ``targets`` under row logits."""
        self._check(logits)
        targets = np.asarray(targets, dtype=np.int64)
        x = logits.value
        if x.ndim != 2 or targets.shape != (x.shape[0],):
            raise ShapeError("cross_entropy expects (n, vocab) logits and n targets")
        z = x - x.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        nll = lse - z[np.arange(x.shape[0]), targets]
        return self._push("cross_entropy", np.array(nll.mean()), (logits,), aux=targets)

    def sum(self, a: Node) -> Node:
        self._check(a)
        return self._push("sum", np.array(a.value.sum()), (a,))

    # -- reverse pass --------------------------------------------------------
    def backward(self, loss: Node) -> list:
        """Adjoint of every node w.r.t. ``loss`` (``None`` where unreachable)."""
        if not self.record:
            raise ContractError("tape was created with record=False")
        self._check(loss)
        if loss.value.size != 1 or loss.value.ndim != 0:
            raise ContractError(f"loss must be a scalar node, got shape {loss.shape}")
        adj: list = [None] * len(self.nodes)
        adj[loss.index] = np.ones(())
        for node in reversed(self.nodes[: loss.index + 1]):
            g = adj[node.index]
            if g is None or not node.parents:
                continue
            for idx, pg in zip(node.parents, _backward_rule(self, node, g)):
                if pg is None:
                    continue
                adj[idx] = pg if adj[idx] is None else adj[idx] + pg
        return adj


def _backward_rule(tape: Tape, node: Node, g):
    vals = [tape.nodes[i].value for i in node.parents]
    op = node.op
    if op == "matmul":
        a, b = vals
        return matmul(g, _swap_last(b)), matmul(_swap_last(a), g)
    if op == "add":
        return g, g
    if op == "mul":
        a, b = vals
        gb = g * a
        if b.shape != a.shape:
            gb = gb.reshape(-1, b.shape[0]).sum(axis=0)
        return g * b, gb
    if op == "scale":
        return (g * node.aux,)
    if op == "transpose":
        return (np.transpose(g, np.argsort(node.aux)),)
    if op == "reshape":
        return (g.reshape(node.aux),)
    if op == "softmax":
        y = node.value
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    if op == "rms_norm":
        y, r = node.value, node.aux
        return ((g - y * (g * y).mean(axis=-1, keepdims=True)) / r,)
    if op == "silu":
        x = vals[0]
        s = _sigmoid(x)
        return (g * s * (1.0 + x * (1.0 - s)),)
    if op == "gelu":
        x = vals[0]
        cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x * pdf),)
    if op == "embedding":
        table = vals[0]
        out = np.zeros_like(table)
        np.add.at(out, node.aux.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)
    if op == "causal_mask":
        return (np.where(node.aux, g, 0.0),)
    if op == "cross_entropy":
        x = vals[0]
        z = x - x.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(x.shape[0]), node.aux] -= 1.0
        return (p * (float(g) / x.shape[0]),)
    if op == "sum":
        return (np.full(vals[0].shape, float(g)),)
    raise ContractError(f"no backward rule for op {op!r}")


def grad(tape: Tape, loss: Node, params) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` for each named parameter in ``params``.

    Parameters that the loss does not depend on get an all-zero gradient.
    Calling this twice on the same tape yields identical arrays.
    """
    names = list(params)
    for name in names:
        if name not in tape.params:
            raise KeyError(f"parameter {name!r} was not recorded on the tape")
    adj = tape.backward(loss)
    out = {}
    for name in names:
        node = tape.params[name]
        g = adj[node.index]
        out[name] = _frozen(np.zeros_like(node.value) if g is None else np.array(g, dtype=np.float64))
    return out


def finite_diff_check(f, params: dict, grads: dict, eps: float = 1e-4,
                      n_coords: int = 32, seed: int = 0, coords=None) -> float:
    """Largest relative gap between ``grads`` and central differences of ``f``.

    ``f`` maps a parameter dict to a float. Coordinates are drawn uniformly
    over all entries of all parameters unless ``coords`` (a list of
    ``(name, flat_index)``) is given. The error per coordinate is
    ``|fd - g| / (|g| + 1e-8)``.
    """
    if not eps > 0:
        raise ContractError("finite-difference step must be positive")
    names = sorted(params)
    if coords is None:
        sizes = np.array([np.asarray(params[n]).size for n in names])
        rng = np.random.default_rng(seed)
        flat = rng.choice(int(sizes.sum()), size=min(n_coords, int(sizes.sum())), replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        coords = []
        for k in np.sort(flat):
            which = int(np.searchsorted(offsets, k, side="right") - 1)
            coords.append((names[which], int(k - offsets[which])))
    work = {n: np.array(params[n], dtype=np.float64) for n in names}
    worst = 0.0
    for name, idx in coords:
        view = work[name].reshape(-1)
        orig = view[idx]
        view[idx] = orig + eps
        fp = f(work)
        view[idx] = orig - eps
        fm = f(work)
        view[idx] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite objective while probing {name}[{idx}]")
        fd = (fp - fm) / (2.0 * eps)
        g = float(np.asarray(grads[name]).reshape(-1)[idx])
        worst = max(worst, abs(fd - g) / (abs(g) + 1e-8))
    return worst
