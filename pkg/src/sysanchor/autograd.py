"""Reverse-mode tape over NumPy arrays with hand-written backward rules.

Only the operations the decoder and its adapter blocks need are
implemented. A node is recorded on the tape only when grad mode is on
and some input requires grad, so frozen prefixes of a model never hit
the tape: with adapters placed late, the backward walk touches nothing
upstream of the first adapter, and frozen weights never accumulate a
gradient even when activation gradients flow through them.
"""

import contextlib

import numpy as np

from . import kernels

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    """Array plus optional gradient and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "label")

    def __init__(self, data, requires_grad=False, label=""):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.label = label

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}, label={self.label!r})"

    def accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def backward(self, grad=None, collect_labels=False):
        """Backpropagate from this node; returns visited labels if asked."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p._backward is not None and id(p) not in seen:
                    stack.append((p, False))
        self.accumulate(grad)
        visited = []
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if collect_labels:
                    visited.append(node.label)
        return visited if collect_labels else None


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, label=""):
    return Tensor(np.asarray(data), requires_grad=True, label=label)


def _make(data, parents, backward, label=""):
    out = Tensor(data, label=label)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def add(a, b, label=""):
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _make(a.data + b.data, (a, b), backward, label)


def add_const(a, c, label=""):
    """a + constant array (broadcast allowed; no gradient flows into c)."""

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)

    return _make(a.data + c, (a,), backward, label)


def scale(a, s, label=""):
    def backward(g):
        if a.requires_grad:
            a.accumulate(g * s)

    return _make(a.data * s, (a,), backward, label)


def mul_const(a, c, label=""):
    """Elementwise product with a constant array (broadcast on c only)."""

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * c)

    return _make(a.data * c, (a,), backward, label)


def matmul(a, b, label=""):
    out = kernels.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            if b.data.ndim == 2:
                a.accumulate(g @ b.data.T)
            else:
                a.accumulate(g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            if b.data.ndim == 2:
                k = a.data.shape[-1]
                n = g.shape[-1]
                b.accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                b.accumulate(a.data.swapaxes(-1, -2) @ g)

    return _make(out, (a, b), backward, label)


def reshape(a, shape, label=""):
    orig = a.data.shape

    def backward(g):
        if a.requires_grad:
            a.accumulate(g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), backward, label)


def swapaxes(a, ax1, ax2, label=""):
    def backward(g):
        if a.requires_grad:
            a.accumulate(g.swapaxes(ax1, ax2))

    return _make(np.ascontiguousarray(a.data.swapaxes(ax1, ax2)), (a,), backward, label)


def rmsnorm(x, gain, eps=1e-6, label=""):
    out = kernels.rmsnorm(x.data, gain.data, eps)

    def backward(g):
        gx, ggain = kernels.rmsnorm_backward(x.data, gain.data, eps, g)
        if x.requires_grad:
            x.accumulate(gx)
        if gain.requires_grad:
            gain.accumulate(ggain)

    return _make(out, (x, gain), backward, label)


def masked_softmax(logits, mask, label=""):
    """Softmax with a constant additive mask of {0, -inf}."""
    probs = kernels.masked_softmax(logits.data, mask)

    def backward(g):
        if logits.requires_grad:
            logits.accumulate(kernels.masked_softmax_backward(probs, g))

    return _make(probs, (logits,), backward, label)


def silu_gate(gate, up, label=""):
    out = kernels.silu_gate(gate.data, up.data)

    def backward(g):
        dgate, dup = kernels.silu_gate_backward(gate.data, up.data, g)
        if gate.requires_grad:
            gate.accumulate(dgate)
        if up.requires_grad:
            up.accumulate(dup)

    return _make(out, (gate, up), backward, label)


def embedding(weight, ids, label=""):
    ids = np.asarray(ids)
    out = weight.data[ids]

    def backward(g):
        if weight.requires_grad:
            if weight.grad is None:
                weight.grad = np.zeros_like(weight.data)
            np.add.at(weight.grad, ids.reshape(-1), g.reshape(-1, g.shape[-1]))

    return _make(out, (weight,), backward, label)


def gather_spans(x, bounds, ell_max, label=""):
    """Copy per-row slices x[b, s_b:e_b] into a zero-padded (B, ell_max, d) block."""
    b_, t, d = x.data.shape
    out = np.zeros((b_, max(ell_max, 1)) + (d,), dtype=x.data.dtype)
    for b in range(b_):
        s, e = int(bounds[b, 0]), int(bounds[b, 1])
        if e > s:
            out[b, : e - s] = x.data[b, s:e]

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for b in range(b_):
                s, e = int(bounds[b, 0]), int(bounds[b, 1])
                if e > s:
                    gx[b, s:e] = g[b, : e - s]
            x.accumulate(gx)

    return _make(out, (x,), backward, label)


def cross_entropy(logits, targets, mask=None, label="loss"):
    """Mean NLL over masked rows of 2-D logits, as a scalar tape node."""
    if mask is None:
        mask = np.ones(logits.data.shape[0], dtype=np.int64)
    loss, probs, count = kernels.cross_entropy(logits.data, targets, mask)

    def backward(g):
        if logits.requires_grad:
            logits.accumulate(
                kernels.cross_entropy_backward(probs, targets, mask, count, float(g))
            )

    out = _make(np.asarray(loss, dtype=np.float64), (logits,), backward, label)
    return out
