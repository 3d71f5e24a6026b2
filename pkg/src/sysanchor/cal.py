"""Cross-attention adapter block anchored on the system-prompt span.

The block is two residual sublayers. Queries come from the whole
normalized residual stream; keys and values come only from the
system-prompt slice [s, e) of the same stream, held in a compact slot
buffer. An additive mask keeps the block causal: slot j (absolute
position s + j) is visible to query position i iff j <= i - s, and slots
past a row's true span length stay closed in padded batches. A gated
feed-forward sublayer follows. Both output projections start at zero,
so an untrained block is an exact identity on the stream.

Rows whose bounds are (0, 0) carry no system prompt and pass through
both sublayers untouched.
"""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import kernels
from .autograd import Tensor
from .spans import BatchBounds

NEG_INF = float("-inf")


@dataclass
class CalParams:
    """Weights of one block. wo and wd are zero at construction."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    norm1: Tensor
    norm2: Tensor
    gate: Tensor
    up: Tensor
    wd: Tensor
    n_heads: int
    eps: float = 1e-6

    def tensors(self):
        return {
            "wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo,
            "norm1": self.norm1, "norm2": self.norm2,
            "gate": self.gate, "up": self.up, "wd": self.wd,
        }

    @property
    def d(self):
        return self.wq.data.shape[0]


def init_cal_params(d, n_heads, rng, dtype=np.float32, init_std=0.02):
    if d % n_heads != 0:
        raise ValueError(f"head count {n_heads} must divide width {d}")

    def normal(*shape):
        return Tensor(rng.normal(0.0, init_std, size=shape).astype(dtype), requires_grad=True)

    return CalParams(
        wq=normal(d, d),
        wk=normal(d, d),
        wv=normal(d, d),
        wo=Tensor(np.zeros((d, d), dtype=dtype), requires_grad=True),
        norm1=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        norm2=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        gate=normal(d, 4 * d),
        up=normal(d, 4 * d),
        wd=Tensor(np.zeros((4 * d, d), dtype=dtype), requires_grad=True),
        n_heads=n_heads,
    )


def build_mask(s, ell_sys, t, dtype=np.float32):
    """Additive (T, ell_sys) mask: 0 where slot j <= i - s, else -inf."""
    if s < 0 or ell_sys < 0 or s + ell_sys > t:
        raise ValueError(f"span (s={s}, len={ell_sys}) does not fit in T={t}")
    i = np.arange(t)[:, None]
    j = np.arange(max(ell_sys, 1))[None, :]
    open_ = (j <= i - s) & (j < ell_sys)
    return np.where(open_, 0.0, NEG_INF).astype(dtype)


def batch_mask(bounds: BatchBounds, t, ell_max, dtype=np.float32):
    """(B, 1, T, ell_max) additive mask combining causal and padding rules."""
    rows = bounds.rows
    b = rows.shape[0]
    i = np.arange(t)[None, :, None]
    j = np.arange(max(ell_max, 1))[None, None, :]
    s = rows[:, 0][:, None, None]
    ell = (rows[:, 1] - rows[:, 0])[:, None, None]
    open_ = (j <= i - s) & (j < ell)
    return np.where(open_, 0.0, NEG_INF).astype(dtype)[:, None, :, :]


def _split_heads(x, n_heads, label=""):
    b, t, d = x.data.shape
    return ag.swapaxes(ag.reshape(x, (b, t, n_heads, d // n_heads)), 1, 2, label=label)


def _merge_heads(x, label=""):
    b, h, t, dh = x.data.shape
    return ag.reshape(ag.swapaxes(x, 1, 2), (b, t, h * dh), label=label)


def _active_rows(bounds: BatchBounds, dtype):
    return (bounds.lengths > 0).astype(dtype)[:, None, None]


def cal_forward(x, bounds, params, probe=None, label=""):
    """Run one block over a (B, T, d) stream; returns the updated stream.

    ``x`` may be a Tensor (taped when grad mode is on) or a plain array.
    ``probe``, when given, is a dict that receives per-sequence L2 norms
    of the attention delta, the feed-forward delta, and the full block
    delta; recording never alters the computation.
    """
    x = ag.as_tensor(x)
    b, t, d = x.data.shape
    if bounds.batch_size != b:
        raise ValueError(f"bounds batch {bounds.batch_size} != input batch {b}")
    if np.any(bounds.rows[:, 1] > t):
        raise ValueError("span bounds exceed sequence length")
    n_heads = params.n_heads
    dh = d // n_heads
    ell_max = bounds.ell_max
    dtype = x.data.dtype
    active = _active_rows(bounds, dtype)

    xn = ag.rmsnorm(x, params.norm1, params.eps, label=f"{label}.norm1")
    q = _split_heads(ag.matmul(xn, params.wq), n_heads)
    kv_in = ag.gather_spans(xn, bounds.rows, ell_max)
    k = _split_heads(ag.matmul(kv_in, params.wk), n_heads)
    v = _split_heads(ag.matmul(kv_in, params.wv), n_heads)

    scores = ag.scale(ag.matmul(q, ag.swapaxes(k, 2, 3)), 1.0 / np.sqrt(dh))
    mask = batch_mask(bounds, t, ell_max, dtype)
    attn = ag.masked_softmax(scores, mask, label=f"{label}.attn")
    ctx = _merge_heads(ag.matmul(attn, v))
    attn_delta = ag.mul_const(ag.matmul(ctx, params.wo), active, label=f"{label}.attn_out")
    x1 = ag.add(x, attn_delta)

    xn2 = ag.rmsnorm(x1, params.norm2, params.eps, label=f"{label}.norm2")
    gated = ag.silu_gate(ag.matmul(xn2, params.gate), ag.matmul(xn2, params.up))
    ffn_delta = ag.mul_const(ag.matmul(gated, params.wd), active, label=f"{label}.ffn_out")
    x2 = ag.add(x1, ffn_delta)

    if probe is not None:
        full = attn_delta.data + ffn_delta.data
        probe["attn_delta_norm"] = np.linalg.norm(attn_delta.data.reshape(b, -1), axis=1)
        probe["ffn_delta_norm"] = np.linalg.norm(ffn_delta.data.reshape(b, -1), axis=1)
        probe["full_delta_norm"] = np.linalg.norm(full.reshape(b, -1), axis=1)
    return x2


def cal_backward(upstream_grad, x, bounds, params):
    """Gradients of one block for a given upstream stream gradient.

    Retraces the forward to build the tape, then backpropagates.
    Returns ({field: grad}, grad_x).
    """
    for p in params.tensors().values():
        p.grad = None
    xt = Tensor(np.asarray(x), requires_grad=True)
    out = cal_forward(xt, bounds, params)
    out.backward(np.asarray(upstream_grad, dtype=out.data.dtype))
    grads = {
        name: (np.zeros_like(p.data) if p.grad is None else p.grad)
        for name, p in params.tensors().items()
    }
    for p in params.tensors().values():
        p.grad = None
    return grads, (np.zeros_like(xt.data) if xt.grad is None else xt.grad)


@dataclass(frozen=True)
class CalKvCache:
    """Fixed key/value slot buffers computed once at prefill.

    Size depends only on the span lengths, never on how many tokens are
    decoded afterwards.
    """

    k: np.ndarray
    v: np.ndarray
    bounds: BatchBounds

    @property
    def element_count(self):
        return int(self.k.size + self.v.size)


def prefill_kv(x_prefix, bounds, params):
    """Project the system-prompt span of a prefix into an immutable cache.

    Buffers hold exactly (B, ell_max, d) elements for keys and for
    values; with no spans in the batch the cache is empty.
    """
    x_prefix = np.asarray(x_prefix)
    t = x_prefix.shape[1]
    if np.any(bounds.rows[:, 1] > t):
        raise ValueError("prefill must cover every span end")
    xn = kernels.rmsnorm(x_prefix, params.norm1.data, params.eps)
    ell_max = bounds.ell_max
    b, _, d = x_prefix.shape
    kv_in = np.zeros((b, ell_max, d), dtype=x_prefix.dtype)
    for row in range(b):
        s, e = int(bounds.rows[row, 0]), int(bounds.rows[row, 1])
        if e > s:
            kv_in[row, : e - s] = xn[row, s:e]
    k = kernels.matmul(kv_in, params.wk.data)
    v = kernels.matmul(kv_in, params.wv.data)
    k.flags.writeable = False
    v.flags.writeable = False
    return CalKvCache(k=k, v=v, bounds=bounds)


def decode_step(x_new, position, cache, params):
    """Apply the block to one new token per row using the prefill cache.

    ``x_new`` is (B, 1, d) and ``position`` the token's absolute index.
    Matches ``cal_forward`` on the concatenated sequence.
    """
    x_new = np.asarray(x_new)
    b, one, d = x_new.shape
    if one != 1:
        raise ValueError("decode_step consumes exactly one position per row")
    bounds = cache.bounds
    if cache.k.shape[1] == 0:
        return x_new.copy()  # no row carries a span; the block is a no-op
    n_heads = params.n_heads
    dh = d // n_heads
    dtype = x_new.dtype
    active = _active_rows(bounds, dtype)

    xn = kernels.rmsnorm(x_new, params.norm1.data, params.eps)
    q = (xn @ params.wq.data).reshape(b, 1, n_heads, dh).transpose(0, 2, 1, 3)
    k = cache.k.reshape(b, -1, n_heads, dh).transpose(0, 2, 1, 3)
    v = cache.v.reshape(b, -1, n_heads, dh).transpose(0, 2, 1, 3)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))

    j = np.arange(k.shape[2])[None, None, None, :]
    s = bounds.rows[:, 0][:, None, None, None]
    ell = bounds.lengths[:, None, None, None]
    open_ = (j <= position - s) & (j < ell)
    mask = np.where(open_, 0.0, NEG_INF).astype(dtype)
    attn = kernels.masked_softmax(scores, mask)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, 1, d)
    x1 = x_new + (ctx @ params.wo.data) * active

    xn2 = kernels.rmsnorm(x1, params.norm2.data, params.eps)
    ffn = kernels.swiglu_ffn(xn2, params.gate.data, params.up.data, params.wd.data)
    return x1 + ffn * active
