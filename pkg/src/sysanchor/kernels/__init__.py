"""Numeric kernels with a numba fast path and a pure-NumPy fallback.

The backend is picked once at import from the ``SYSANCHOR_KERNELS``
environment variable:

    auto   (default) use numba when importable, else NumPy
    numba  require the jitted kernels, fail loudly if numba is missing
    numpy  force the reference implementations

``set_backend`` switches at runtime (used by the benchmark and the
parity tests). Matrix products go through BLAS on both backends; the
jitted kernels cover the fused elementwise/rowwise operations where the
NumPy path pays for temporaries.
"""

import os

import numpy as np

from . import numpy_ops

try:
    from . import numba_ops

    NUMBA_AVAILABLE = True
except ImportError:
    numba_ops = None
    NUMBA_AVAILABLE = False

_BACKENDS = {"numpy": numpy_ops}
if NUMBA_AVAILABLE:
    _BACKENDS["numba"] = numba_ops


def _resolve(name):
    if name == "auto":
        name = "numba" if NUMBA_AVAILABLE else "numpy"
    if name not in _BACKENDS:
        if name == "numba":
            raise ImportError("SYSANCHOR_KERNELS=numba but numba is not installed")
        raise ValueError(f"unknown kernel backend {name!r} (use numpy or numba)")
    return name


_active = _resolve(os.environ.get("SYSANCHOR_KERNELS", "auto"))


def set_backend(name):
    """Switch the active kernel backend; returns the previous name."""
    global _active
    prev = _active
    _active = _resolve(name)
    return prev


def get_backend():
    return _active


def backend_module(name=None):
    return _BACKENDS[_active if name is None else _resolve(name)]


def matmul(a, b):
    """Matrix product. Supports (..., m, k) @ (k, n) and batched pairs."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def rmsnorm(x, gain, eps=1e-6):
    x = np.asarray(x)
    gain = np.asarray(gain)
    if gain.shape != (x.shape[-1],):
        raise ValueError(f"rmsnorm gain shape {gain.shape} does not match feature dim {x.shape[-1]}")
    return _BACKENDS[_active].rmsnorm(x, gain, eps)


def rmsnorm_backward(x, gain, eps, grad_y):
    return _BACKENDS[_active].rmsnorm_backward(x, gain, eps, grad_y)


def masked_softmax(logits, mask):
    logits = np.asarray(logits)
    mask = np.broadcast_to(np.asarray(mask, dtype=logits.dtype), logits.shape)
    return _BACKENDS[_active].masked_softmax(logits, mask)


def masked_softmax_backward(probs, grad_y):
    return _BACKENDS[_active].masked_softmax_backward(probs, grad_y)


def silu_gate(gate, up):
    if gate.shape != up.shape:
        raise ValueError(f"silu_gate shape mismatch: {gate.shape} vs {up.shape}")
    return _BACKENDS[_active].silu_gate(gate, up)


def silu_gate_backward(gate, up, grad_y):
    return _BACKENDS[_active].silu_gate_backward(gate, up, grad_y)


def swiglu_ffn(x, gate_w, up_w, down_w):
    """silu(x @ gate_w) * (x @ up_w), projected back down by down_w."""
    return matmul(silu_gate(matmul(x, gate_w), matmul(x, up_w)), down_w)


def cross_entropy(logits, targets, mask=None):
    """Mean NLL over rows of (N, V) logits where mask is nonzero.

    Returns (loss, probs, count); feed probs/count to
    ``cross_entropy_backward`` for the logit gradients.
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects (N, V) logits, got {logits.shape}")
    v = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ValueError(f"target id out of range for vocab {v}")
    if mask is None:
        mask = np.ones(logits.shape[0], dtype=np.int64)
    mask = np.asarray(mask, dtype=np.int64)
    return _BACKENDS[_active].cross_entropy(logits, targets, mask)


def cross_entropy_backward(probs, targets, mask, count, grad_loss=1.0):
    return _BACKENDS[_active].cross_entropy_backward(
        probs, np.asarray(targets, dtype=np.int64), np.asarray(mask, dtype=np.int64),
        count, grad_loss,
    )
