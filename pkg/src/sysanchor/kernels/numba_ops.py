"""Numba-compiled kernels, signature-compatible with ``numpy_ops``.

The jitted cores work on contiguous 2-D views; the thin Python wrappers
below flatten leading axes and restore them. Loop order is fixed, so
results are reproducible run to run. Accumulation happens in float64 to
match the reference backend.

Importing this module requires numba; ``kernels/__init__`` falls back to
the NumPy backend when it is missing.
"""

import numpy as np
from numba import njit


def _rows(x):
    """Contiguous 2-D view (N, d) of an array, plus its original shape."""
    a = np.ascontiguousarray(x)
    return a.reshape(-1, a.shape[-1]), x.shape


@njit(cache=True)
def _rmsnorm_fwd(x, gain, eps, out):
    n, d = x.shape
    for i in range(n):
        ss = 0.0
        for j in range(d):
            ss += float(x[i, j]) * float(x[i, j])
        inv = 1.0 / np.sqrt(ss / d + eps)
        for j in range(d):
            out[i, j] = x[i, j] * inv * gain[j]


@njit(cache=True)
def _rmsnorm_bwd(x, gain, eps, gy, gx, ggain):
    n, d = x.shape
    for i in range(n):
        ss = 0.0
        for j in range(d):
            ss += float(x[i, j]) * float(x[i, j])
        inv = 1.0 / np.sqrt(ss / d + eps)
        inner = 0.0
        for j in range(d):
            inner += float(gy[i, j]) * float(gain[j]) * float(x[i, j])
        inner /= d
        for j in range(d):
            gg = gy[i, j] * gain[j]
            gx[i, j] = inv * (gg - x[i, j] * inv * inv * inner)
            ggain[j] += float(gy[i, j]) * float(x[i, j]) * inv


@njit(cache=True)
def _masked_softmax_fwd(z, out):
    n, d = z.shape
    for i in range(n):
        m = -np.inf
        for j in range(d):
            if z[i, j] > m:
                m = z[i, j]
        if m == -np.inf:
            for j in range(d):
                out[i, j] = 0.0
            continue
        s = 0.0
        for j in range(d):
            e = np.exp(float(z[i, j]) - float(m))
            out[i, j] = e
            s += e
        for j in range(d):
            out[i, j] = out[i, j] / s


@njit(cache=True)
def _masked_softmax_bwd(probs, gy, out):
    n, d = probs.shape
    for i in range(n):
        inner = 0.0
        for j in range(d):
            inner += float(probs[i, j]) * float(gy[i, j])
        for j in range(d):
            out[i, j] = probs[i, j] * (gy[i, j] - inner)


@njit(cache=True)
def _silu_gate_fwd(gate, up, out):
    one = gate.dtype.type(1.0)
    n = gate.shape[0]
    for i in range(n):
        sig = one / (one + np.exp(-gate[i]))
        out[i] = gate[i] * sig * up[i]


@njit(cache=True)
def _silu_gate_bwd(gate, up, gy, dgate, dup):
    one = gate.dtype.type(1.0)
    n = gate.shape[0]
    for i in range(n):
        sig = one / (one + np.exp(-gate[i]))
        silu = gate[i] * sig
        dsilu = sig * (one + gate[i] * (one - sig))
        dgate[i] = gy[i] * up[i] * dsilu
        dup[i] = gy[i] * silu


@njit(cache=True)
def _cross_entropy_fwd(logits, targets, mask, probs):
    n, v = logits.shape
    loss = 0.0
    count = 0
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, v):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(v):
            e = np.exp(float(logits[i, j]) - float(m))
            probs[i, j] = e
            s += e
        for j in range(v):
            probs[i, j] = probs[i, j] / s
        if mask[i] != 0:
            count += 1
            loss -= float(logits[i, targets[i]]) - float(m) - np.log(s)
    return loss, count


@njit(cache=True)
def _cross_entropy_bwd(probs, targets, mask, scale, out):
    n, v = probs.shape
    for i in range(n):
        if mask[i] == 0:
            for j in range(v):
                out[i, j] = 0.0
        else:
            for j in range(v):
                out[i, j] = probs[i, j] * scale
            out[i, targets[i]] -= scale


def rmsnorm(x, gain, eps):
    x2, shape = _rows(x)
    out = np.empty_like(x2)
    _rmsnorm_fwd(x2, np.ascontiguousarray(gain), float(eps), out)
    return out.reshape(shape)


def rmsnorm_backward(x, gain, eps, grad_y):
    x2, shape = _rows(x)
    gy2, _ = _rows(grad_y)
    gx = np.empty_like(x2)
    ggain = np.zeros(x.shape[-1], dtype=np.float64)
    _rmsnorm_bwd(x2, np.ascontiguousarray(gain), float(eps), gy2, gx, ggain)
    return gx.reshape(shape), ggain.astype(x.dtype)


def masked_softmax(logits, mask):
    z = logits + mask
    z2, shape = _rows(z)
    out = np.empty_like(z2)
    _masked_softmax_fwd(z2, out)
    return out.reshape(shape)


def masked_softmax_backward(probs, grad_y):
    p2, shape = _rows(probs)
    gy2, _ = _rows(grad_y)
    out = np.empty_like(p2)
    _masked_softmax_bwd(p2, gy2, out)
    return out.reshape(shape)


def silu_gate(gate, up):
    g = np.ascontiguousarray(gate).reshape(-1)
    u = np.ascontiguousarray(up).reshape(-1)
    out = np.empty_like(g)
    _silu_gate_fwd(g, u, out)
    return out.reshape(gate.shape)


def silu_gate_backward(gate, up, grad_y):
    g = np.ascontiguousarray(gate).reshape(-1)
    u = np.ascontiguousarray(up).reshape(-1)
    gy = np.ascontiguousarray(grad_y).reshape(-1)
    dgate = np.empty_like(g)
    dup = np.empty_like(g)
    _silu_gate_bwd(g, u, gy, dgate, dup)
    return dgate.reshape(gate.shape), dup.reshape(up.shape)


def cross_entropy(logits, targets, mask):
    l2 = np.ascontiguousarray(logits)
    probs = np.empty_like(l2)
    loss, count = _cross_entropy_fwd(
        l2, np.ascontiguousarray(targets), np.ascontiguousarray(mask), probs
    )
    return (0.0 if count == 0 else loss / count), probs, count


def cross_entropy_backward(probs, targets, mask, count, grad_loss):
    p2 = np.ascontiguousarray(probs)
    out = np.empty_like(p2)
    scale = p2.dtype.type(grad_loss / max(count, 1))
    _cross_entropy_bwd(
        p2, np.ascontiguousarray(targets), np.ascontiguousarray(mask), scale, out
    )
    return out


def warmup():
    """Trigger compilation of every jitted core on tiny inputs."""
    for dt in (np.float32, np.float64):
        x = np.ones((2, 4), dtype=dt)
        g = np.ones(4, dtype=dt)
        rmsnorm(x, g, 1e-6)
        rmsnorm_backward(x, g, 1e-6, x)
        msk = np.zeros((2, 4), dtype=dt)
        p = masked_softmax(x, msk)
        masked_softmax_backward(p, x)
        silu_gate(x, x)
        silu_gate_backward(x, x, x)
        t = np.zeros(2, dtype=np.int64)
        m = np.ones(2, dtype=np.int64)
        _, pr, c = cross_entropy(x, t, m)
        cross_entropy_backward(pr, t, m, c, 1.0)
