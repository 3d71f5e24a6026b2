"""Pure NumPy reference kernels.

Every function here has a numba twin in ``numba_ops`` with the same
signature; the active backend is selected in ``kernels/__init__``.
Shapes are documented once per function:

    x      : float[..., d]       last axis is the feature axis
    logits : float[..., L]       last axis is the softmax axis
    mask   : additive, values in {0, -inf}, broadcastable to logits

All reductions accumulate in float64 regardless of input dtype so the
two backends agree to tight tolerances.
"""

import numpy as np


def rmsnorm(x, gain, eps):
    """gain_i * x_i / sqrt(mean(x^2) + eps), normalized over the last axis."""
    ms = np.mean(np.square(x, dtype=np.float64), axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    return (x * inv.astype(x.dtype)) * gain


def rmsnorm_backward(x, gain, eps, grad_y):
    """Gradients of rmsnorm w.r.t. x and gain."""
    d = x.shape[-1]
    ms = np.mean(np.square(x, dtype=np.float64), axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(ms + eps)).astype(x.dtype)
    gg = grad_y * gain
    inner = np.mean((gg * x).astype(np.float64), axis=-1, keepdims=True).astype(x.dtype)
    grad_x = inv * (gg - x * (inv * inv) * inner)
    grad_gain = np.sum((grad_y * x * inv).reshape(-1, d), axis=0, dtype=np.float64)
    return grad_x, grad_gain.astype(x.dtype)


def masked_softmax(logits, mask):
    """Softmax over the last axis restricted to entries where mask == 0.

    Rows whose entries are all masked come back as all zeros, not NaN.
    """
    z = logits + mask
    m = np.max(z, axis=-1, keepdims=True)
    alive = np.isfinite(m)
    shifted = z - np.where(alive, m, 0.0)
    e = np.exp(shifted, dtype=np.float64)
    e[~np.isfinite(shifted)] = 0.0
    s = np.sum(e, axis=-1, keepdims=True)
    out = np.where(alive, e / np.where(s == 0.0, 1.0, s), 0.0)
    return out.astype(logits.dtype)


def masked_softmax_backward(probs, grad_y):
    """Gradient w.r.t. logits; masked slots (probs == 0) get zero gradient."""
    inner = np.sum((probs * grad_y).astype(np.float64), axis=-1, keepdims=True)
    return probs * (grad_y - inner.astype(probs.dtype))


def silu_gate(gate, up):
    """silu(gate) * up, the gated activation of a SwiGLU feed-forward."""
    sig = 1.0 / (1.0 + np.exp(-gate))
    return gate * sig * up


def silu_gate_backward(gate, up, grad_y):
    sig = 1.0 / (1.0 + np.exp(-gate))
    silu = gate * sig
    dsilu = sig * (1.0 + gate * (1.0 - sig))
    return grad_y * up * dsilu, grad_y * silu


def cross_entropy(logits, targets, mask):
    """Mean negative log-likelihood over rows where mask is nonzero.

    logits : float (N, V); targets : int (N,); mask : (N,) 0/1.
    Returns (loss, probs, count); probs is the row softmax reused by the
    backward pass. count == 0 yields loss 0.0.
    """
    m = np.max(logits, axis=-1, keepdims=True)
    e = np.exp((logits - m).astype(np.float64))
    s = np.sum(e, axis=-1, keepdims=True)
    probs = (e / s).astype(logits.dtype)
    n = logits.shape[0]
    logp = (logits[np.arange(n), targets] - m[:, 0]).astype(np.float64) - np.log(s[:, 0])
    active = mask.astype(bool)
    count = int(np.count_nonzero(active))
    loss = 0.0 if count == 0 else float(-np.sum(logp[active]) / count)
    return loss, probs, count


def cross_entropy_backward(probs, targets, mask, count, grad_loss):
    """d loss / d logits given the cached row softmax."""
    grad = probs.copy()
    n = probs.shape[0]
    grad[np.arange(n), targets] -= 1.0
    grad *= (mask.astype(probs.dtype) * (grad_loss / max(count, 1)))[:, None]
    return grad
