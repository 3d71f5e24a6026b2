"""Toy frozen causal decoder with optional adapter blocks.

A pre-norm decoder (RMSNorm, multi-head causal self-attention, SwiGLU
feed-forward, sinusoidal positions) whose weights are frozen at
construction: the arrays are marked read-only and no mutation API
exists. Adapter blocks run after the complete host layer at the
positions given by a placement strategy; only their parameters carry
``requires_grad``. The incremental decoder keeps a growing key/value
cache per backbone layer and a fixed-size cross-attention cache per
adapter block.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import cal as cal_mod
from . import kernels
from .autograd import Tensor
from .spans import BatchBounds

PLACEMENT_NAMES = (
    "ALL", "EVERY2", "LATEHALF", "LATEHALF2",
    "LATETHIRD", "LATEQUARTER", "LATE8TH", "LAST",
)

_LATE_FRACTIONS = {"LATEHALF": 2, "LATETHIRD": 3, "LATEQUARTER": 4, "LATE8TH": 8}


@dataclass(frozen=True)
class PlacementConfig:
    name: str
    positions: tuple

    @property
    def count(self):
        return len(self.positions)


def resolve_placement(name, n_layers):
    """Resolve a strategy name to 1-indexed layer positions.

    Adapters are inserted after the named layer. Contiguous late-1/k
    strategies occupy {n - ceil(n/k), ..., n}; LATEHALF2 takes every
    other layer of that late-half window, starting at its first layer.
    """
    if n_layers < 2:
        raise ValueError("placement needs at least two layers")
    key = name.upper()
    if key == "ALL":
        positions = range(1, n_layers + 1)
    elif key == "EVERY2":
        positions = range(2, n_layers + 1, 2)
    elif key == "LAST":
        positions = (n_layers,)
    elif key == "LATEHALF2":
        positions = range(n_layers - (-(-n_layers // 2)), n_layers + 1, 2)
    elif key in _LATE_FRACTIONS:
        k = _LATE_FRACTIONS[key]
        positions = range(n_layers - (-(-n_layers // k)), n_layers + 1)
    else:
        raise ValueError(f"unknown placement {name!r}; expected one of {PLACEMENT_NAMES}")
    return PlacementConfig(name=key, positions=tuple(positions))


@dataclass
class ModelConfig:
    n_layers: int = 28
    d: int = 64
    n_heads: int = 4
    vocab_size: int = 128
    max_t: int = 256
    adapter: str = "none"  # none | cal | parallel_mlp
    placement: str = "LATE8TH"
    eps: float = 1e-6
    init_std: float = 0.02
    # Adapter projections use 1/sqrt(d) by default: the 0.02 scale leaves
    # the value path too weak to train out of the zero-init point at this
    # width. 0 means "use the default".
    adapter_init_std: float = 0.0

    def __post_init__(self):
        if self.d % self.n_heads != 0:
            raise ValueError(f"n_heads={self.n_heads} must divide d={self.d}")
        if self.adapter not in ("none", "cal", "parallel_mlp"):
            raise ValueError(f"unknown adapter kind {self.adapter!r}")

    @property
    def resolved_adapter_init_std(self):
        return self.adapter_init_std if self.adapter_init_std > 0 else self.d ** -0.5


@dataclass
class ParallelMlpParams:
    """Zero-initialized gated MLP adapter; identity at step 0 like the CAL block."""

    norm: Tensor
    gate: Tensor
    up: Tensor
    wd: Tensor
    eps: float = 1e-6

    def tensors(self):
        return {"norm": self.norm, "gate": self.gate, "up": self.up, "wd": self.wd}


def init_pmlp_params(d, rng, dtype=np.float32, init_std=0.02):
    def normal(*shape):
        return Tensor(rng.normal(0.0, init_std, size=shape).astype(dtype), requires_grad=True)

    return ParallelMlpParams(
        norm=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        gate=normal(d, 4 * d),
        up=normal(d, 4 * d),
        wd=Tensor(np.zeros((4 * d, d), dtype=dtype), requires_grad=True),
    )


def pmlp_forward(x, params, probe=None, label=""):
    xn = ag.rmsnorm(x, params.norm, params.eps)
    gated = ag.silu_gate(ag.matmul(xn, params.gate), ag.matmul(xn, params.up))
    delta = ag.matmul(gated, params.wd, label=f"{label}.ffn_out")
    out = ag.add(x, delta)
    if probe is not None:
        b = x.data.shape[0]
        norms = np.linalg.norm(delta.data.reshape(b, -1), axis=1)
        probe["attn_delta_norm"] = np.zeros(b, dtype=np.float64)
        probe["ffn_delta_norm"] = norms
        probe["full_delta_norm"] = norms
    return out


_LAYER_FIELDS = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "gate", "up", "down")


def init_backbone_weights(config, rng, dtype=np.float32):
    """Fresh backbone weight arrays in a fixed draw order."""
    d, v = config.d, config.vocab_size
    std = config.init_std

    def normal(*shape):
        return rng.normal(0.0, std, size=shape).astype(dtype)

    weights = {"embed": normal(v, d), "head": normal(d, v)}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        weights[p + "attn_norm"] = np.ones(d, dtype=dtype)
        weights[p + "wq"] = normal(d, d)
        weights[p + "wk"] = normal(d, d)
        weights[p + "wv"] = normal(d, d)
        weights[p + "wo"] = normal(d, d)
        weights[p + "ffn_norm"] = np.ones(d, dtype=dtype)
        weights[p + "gate"] = normal(d, 4 * d)
        weights[p + "up"] = normal(d, 4 * d)
        weights[p + "down"] = normal(4 * d, d)
    weights["final_norm"] = np.ones(d, dtype=dtype)
    return weights


def sinusoidal_positions(max_t, d, dtype=np.float32):
    pos = np.arange(max_t, dtype=np.float64)[:, None]
    dim = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * dim / d)
    table = np.zeros((max_t, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table.astype(dtype)


@dataclass
class Model:
    config: ModelConfig
    backbone: dict
    adapters: dict
    placement: PlacementConfig | None
    positions: np.ndarray
    dtype: object = np.float32

    def adapter_parameters(self):
        """Ordered (name, tensor) pairs of every trainable adapter weight."""
        out = []
        for pos in sorted(self.adapters):
            for fname, tensor in self.adapters[pos].tensors().items():
                out.append((f"adapter.{pos}.{fname}", tensor))
        return out

    def backbone_parameters(self):
        return [(f"backbone.{name}", t) for name, t in self.backbone.items()]

    def state(self):
        """All weights by qualified name; adapter vs backbone split by prefix."""
        out = {f"backbone.{k}": t.data for k, t in self.backbone.items()}
        out.update({name: t.data for name, t in self.adapter_parameters()})
        return out


def backbone_hash(model):
    """SHA-256 over the frozen weights; stable across training runs."""
    h = hashlib.sha256()
    for name in sorted(model.backbone):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.backbone[name].data).tobytes())
    return h.hexdigest()


def build_model(config, seed=0, dtype=np.float32, backbone_weights=None):
    """Assemble a frozen backbone plus fresh adapters at the placement.

    Same seed, same model, bitwise. Backbone arrays are marked read-only;
    there is no API that mutates them afterwards.
    """
    rng = np.random.default_rng(seed)
    weights = backbone_weights if backbone_weights is not None else init_backbone_weights(config, rng, dtype)
    backbone = {}
    for name, arr in weights.items():
        arr = np.ascontiguousarray(arr, dtype=dtype)
        arr.setflags(write=False)
        backbone[name] = Tensor(arr, requires_grad=False, label=f"backbone.{name}")

    placement = None
    adapters = {}
    if config.adapter != "none":
        placement = resolve_placement(config.placement, config.n_layers)
        std = config.resolved_adapter_init_std
        for pos in placement.positions:
            if config.adapter == "cal":
                adapters[pos] = cal_mod.init_cal_params(
                    config.d, config.n_heads, rng, dtype, std
                )
            else:
                adapters[pos] = init_pmlp_params(config.d, rng, dtype, std)
    return Model(
        config=config,
        backbone=backbone,
        adapters=adapters,
        placement=placement,
        positions=sinusoidal_positions(config.max_t, config.d, dtype),
        dtype=dtype,
    )


def causal_mask(t, dtype=np.float32):
    m = np.zeros((t, t), dtype=dtype)
    m[np.triu_indices(t, k=1)] = cal_mod.NEG_INF
    return m


class ProbeRecorder:
    """Per-layer norms collected during a forward pass."""

    def __init__(self):
        self.attn_norms = {}
        self.adapter_attn_norms = {}
        self.adapter_ffn_norms = {}
        self.adapter_full_norms = {}


def _no_span_bounds(batch):
    return BatchBounds(np.zeros((batch, 2), dtype=np.int64))


def forward(model, tokens, bounds=None, probe=None, capture=None):
    """Logits over a (B, T) token batch.

    ``probe`` collects sublayer norms; ``capture`` (a dict) receives the
    per-layer self-attention key/value arrays and each adapter's
    cross-attention cache, for handoff to incremental decoding.
    """
    tokens = np.asarray(tokens)
    b, t = tokens.shape
    cfg = model.config
    if t > cfg.max_t:
        raise ValueError(f"sequence length {t} exceeds max {cfg.max_t}")
    if bounds is None:
        bounds = _no_span_bounds(b)
    if bounds.batch_size != b:
        raise ValueError("bounds batch size does not match token batch")
    w = model.backbone
    n_heads = cfg.n_heads
    dh = cfg.d // n_heads
    mask = causal_mask(t, model.dtype)
    if capture is not None:
        capture["layers"] = []
        capture["adapters"] = {}

    h = ag.add_const(ag.embedding(w["embed"], tokens), model.positions[:t])
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        xn = ag.rmsnorm(h, w[p + "attn_norm"], cfg.eps)
        q = cal_mod._split_heads(ag.matmul(xn, w[p + "wq"]), n_heads)
        k = cal_mod._split_heads(ag.matmul(xn, w[p + "wk"]), n_heads)
        v = cal_mod._split_heads(ag.matmul(xn, w[p + "wv"]), n_heads)
        if capture is not None:
            capture["layers"].append([k.data, v.data])
        scores = ag.scale(ag.matmul(q, ag.swapaxes(k, 2, 3)), 1.0 / np.sqrt(dh))
        attn = ag.masked_softmax(scores, mask)
        ctx = cal_mod._merge_heads(ag.matmul(attn, v))
        attn_out = ag.matmul(ctx, w[p + "wo"], label=f"backbone.layer{i + 1}.attn")
        if probe is not None:
            probe.attn_norms[i + 1] = np.linalg.norm(attn_out.data.reshape(b, -1), axis=1)
        h = ag.add(h, attn_out)
        xn2 = ag.rmsnorm(h, w[p + "ffn_norm"], cfg.eps)
        gated = ag.silu_gate(ag.matmul(xn2, w[p + "gate"]), ag.matmul(xn2, w[p + "up"]))
        h = ag.add(h, ag.matmul(gated, w[p + "down"], label=f"backbone.layer{i + 1}.ffn"))

        pos = i + 1
        if pos in model.adapters:
            params = model.adapters[pos]
            record = {} if probe is not None else None
            if isinstance(params, cal_mod.CalParams):
                if capture is not None:
                    capture["adapters"][pos] = cal_mod.prefill_kv(h.data, bounds, params)
                h = cal_mod.cal_forward(h, bounds, params, probe=record, label=f"adapter.{pos}")
            else:
                h = pmlp_forward(h, params, probe=record, label=f"adapter.{pos}")
            if probe is not None:
                probe.adapter_attn_norms[pos] = record["attn_delta_norm"]
                probe.adapter_ffn_norms[pos] = record["ffn_delta_norm"]
                probe.adapter_full_norms[pos] = record["full_delta_norm"]

    hn = ag.rmsnorm(h, w["final_norm"], cfg.eps)
    return ag.matmul(hn, w["head"], label="head")


def loss_on_batch(model, tokens, bounds=None, loss_mask=None):
    """Next-token cross-entropy; ``loss_mask[b, t]`` gates token t as a target."""
    tokens = np.asarray(tokens)
    b, t = tokens.shape
    logits = forward(model, tokens, bounds)
    pred = ag.reshape(logits, (b * t, model.config.vocab_size))
    targets = np.full((b, t), 0, dtype=np.int64)
    targets[:, :-1] = tokens[:, 1:]
    if loss_mask is None:
        valid = np.ones((b, t), dtype=np.int64)
        valid[:, -1] = 0
    else:
        valid = np.zeros((b, t), dtype=np.int64)
        valid[:, :-1] = np.asarray(loss_mask, dtype=np.int64)[:, 1:]
    return ag.cross_entropy(pred, targets.reshape(-1), valid.reshape(-1))


def backward_adapters_only(model, loss, collect_labels=False):
    """Backpropagate; only adapter tensors end up holding gradients."""
    for _, p in model.adapter_parameters():
        p.grad = None
    visited = loss.backward(collect_labels=collect_labels)
    grads = {
        name: (np.zeros_like(p.data) if p.grad is None else p.grad)
        for name, p in model.adapter_parameters()
    }
    return (grads, visited) if collect_labels else grads


class DecodeSession:
    """Incremental greedy-decoding state for one fixed-length prompt batch.

    Backbone self-attention caches grow by one slot per step; the
    adapter cross-attention caches are built once at prefill and never
    change size.
    """

    def __init__(self, model, tokens, bounds=None):
        tokens = np.asarray(tokens)
        b, t = tokens.shape
        self.model = model
        self.bounds = bounds if bounds is not None else _no_span_bounds(b)
        capture = {}
        with ag.no_grad():
            logits = forward(model, tokens, self.bounds, capture=capture)
        self.layer_kv = capture["layers"]
        self.cal_caches = capture["adapters"]
        self.position = t
        self.last_logits = logits.data[:, -1, :]

    def cal_cache_elements(self):
        return sum(c.element_count for c in self.cal_caches.values())

    def step(self, token_ids):
        """Feed one token per row; returns next-token logits (B, V)."""
        cfg = self.model.config
        if self.position >= cfg.max_t:
            raise ValueError("decode ran past the model's maximum sequence length")
        w = self.model.backbone
        n_heads, dh = cfg.n_heads, cfg.d // cfg.n_heads
        ids = np.asarray(token_ids).reshape(-1)
        b = ids.shape[0]
        x = w["embed"].data[ids][:, None, :] + self.model.positions[self.position]
        zero_mask = np.zeros((1, 1), dtype=self.model.dtype)
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            xn = kernels.rmsnorm(x, w[p + "attn_norm"].data, cfg.eps)
            q = (xn @ w[p + "wq"].data).reshape(b, 1, n_heads, dh).transpose(0, 2, 1, 3)
            k_new = (xn @ w[p + "wk"].data).reshape(b, 1, n_heads, dh).transpose(0, 2, 1, 3)
            v_new = (xn @ w[p + "wv"].data).reshape(b, 1, n_heads, dh).transpose(0, 2, 1, 3)
            k = np.concatenate([self.layer_kv[i][0], k_new], axis=2)
            v = np.concatenate([self.layer_kv[i][1], v_new], axis=2)
            self.layer_kv[i] = [k, v]
            scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
            attn = kernels.masked_softmax(scores, zero_mask)
            ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, 1, cfg.d)
            x = x + ctx @ w[p + "wo"].data
            xn2 = kernels.rmsnorm(x, w[p + "ffn_norm"].data, cfg.eps)
            x = x + kernels.swiglu_ffn(
                xn2, w[p + "gate"].data, w[p + "up"].data, w[p + "down"].data
            )
            pos = i + 1
            if pos in self.model.adapters:
                params = self.model.adapters[pos]
                if isinstance(params, cal_mod.CalParams):
                    x = cal_mod.decode_step(x, self.position, self.cal_caches[pos], params)
                else:
                    xa = kernels.rmsnorm(x, params.norm.data, params.eps)
                    x = x + kernels.swiglu_ffn(
                        xa, params.gate.data, params.up.data, params.wd.data
                    )
        hn = kernels.rmsnorm(x, w["final_norm"].data, cfg.eps)
        self.last_logits = (hn @ w["head"].data)[:, 0, :]
        self.position += 1
        return self.last_logits


def generate_greedy(model, tokens, bounds=None, n_steps=1):
    """Greedy continuation of a prompt batch; returns (B, n_steps) token ids."""
    session = DecodeSession(model, tokens, bounds)
    out = []
    nxt = np.argmax(session.last_logits, axis=-1)
    for _ in range(n_steps):
        out.append(nxt)
        logits = session.step(nxt)
        nxt = np.argmax(logits, axis=-1)
    return np.stack(out, axis=1)
