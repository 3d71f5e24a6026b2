"""Adapter-only SFT loop: cosine schedule with linear warmup, decoupled
weight decay, gradient accumulation and global-norm clipping.

The backbone never appears in the optimizer; its arrays are read-only,
so a buggy update would raise rather than corrupt the model. The same
engine drives the optional backbone pretraining stage, which runs on a
trainable weight set and freezes the result afterwards.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import model as model_mod
from .autograd import Tensor
from .spans import BatchBounds


@dataclass
class TrainConfig:
    lr: float = 2e-4
    warmup_ratio: float = 0.05
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    grad_accum: int = 1
    max_grad_norm: float = 1.0
    epochs: int = 2
    max_seq_len: int = 256
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must be in [0, 1)")

    @property
    def effective_batch(self):
        return self.batch_size * self.grad_accum


def lr_at(step, total_steps, config):
    """Linear ramp to config.lr over the warmup steps, then cosine to zero."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return 0.0
    warmup = int(config.warmup_ratio * total_steps)
    if warmup > 0 and step < warmup:
        return config.lr * step / warmup
    progress = (step - warmup) / max(total_steps - warmup, 1)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Decay applies to matrix weights only; gain vectors are exempt.
    """

    def __init__(self, named_params, config):
        self.params = list(named_params)
        self.config = config
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr):
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
            if c.weight_decay and p.data.ndim >= 2:
                update = update + c.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype)


def global_grad_norm(named_params):
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


def clip_gradients(named_params, max_norm):
    """Scale gradients so the global norm is at most max_norm; returns post-clip norm."""
    norm = global_grad_norm(named_params)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for _, p in named_params:
            if p.grad is not None:
                p.grad *= scale
        return max_norm / (norm + 1e-12) * norm
    return norm


def make_batches(corpus, order, batch_size):
    for start in range(0, len(order) - batch_size + 1, batch_size):
        yield [corpus[i] for i in order[start : start + batch_size]]


def collate(samples, pad_id=0):
    """Right-pad a list of samples to a rectangular batch."""
    t = max(len(s.tokens) for s in samples)
    b = len(samples)
    tokens = np.full((b, t), pad_id, dtype=np.int64)
    mask = np.zeros((b, t), dtype=np.int64)
    rows = np.zeros((b, 2), dtype=np.int64)
    for i, s in enumerate(samples):
        n = len(s.tokens)
        tokens[i, :n] = s.tokens
        mask[i, :n] = s.loss_mask
        rows[i] = s.bounds
    return tokens, BatchBounds(rows), mask


@dataclass
class StepRecord:
    step: int
    loss: float
    grad_norm: float
    lr: float


@dataclass
class TrainState:
    """Everything needed to resume: parameters, moments, step, RNG."""

    step: int
    params: dict
    moments_m: dict
    moments_v: dict
    running_loss: float
    rng_state: dict
    history: list = field(default_factory=list)


def _engine(m, named_params, corpus, config, total_steps, log_path=None,
            checkpoint_every=None, checkpoint_dir=None):
    """Shared optimization loop over an explicit trainable parameter list."""
    if not named_params:
        raise ValueError("nothing to train: model has no trainable parameters")
    if not corpus:
        raise ValueError("empty corpus")
    longest = max(len(s.tokens) for s in corpus)
    if longest > config.max_seq_len:
        raise ValueError(
            f"corpus sample of length {longest} exceeds max_seq_len {config.max_seq_len}"
        )
    rng = np.random.default_rng(config.seed)
    opt = AdamW(named_params, config)
    history = []
    log = open(log_path, "w") if log_path else None
    if log:
        log.write("step,loss,grad_norm,lr\n")
    step = 0
    running = 0.0
    try:
        while step < total_steps:
            order = rng.permutation(len(corpus))
            batches = make_batches(corpus, order, config.batch_size)
            while step < total_steps:
                micro_losses = []
                for _, p in named_params:
                    p.grad = None
                try:
                    for _ in range(config.grad_accum):
                        samples = next(batches)
                        tokens, bounds, mask = collate(samples)
                        loss = model_mod.loss_on_batch(m, tokens, bounds, mask)
                        loss.backward()
                        micro_losses.append(float(loss.data))
                except StopIteration:
                    break
                if config.grad_accum > 1:
                    inv = 1.0 / config.grad_accum
                    for _, p in named_params:
                        if p.grad is not None:
                            p.grad *= inv
                mean_loss = float(np.mean(micro_losses))
                if not math.isfinite(mean_loss):
                    raise RuntimeError(
                        f"non-finite loss {mean_loss} at step {step}; aborting run"
                    )
                gnorm = clip_gradients(named_params, config.max_grad_norm)
                lr = lr_at(step, total_steps, config)
                opt.step(lr)
                running = 0.9 * running + 0.1 * mean_loss if step else mean_loss
                rec = StepRecord(step=step, loss=mean_loss, grad_norm=gnorm, lr=lr)
                history.append(rec)
                if log:
                    log.write(f"{step},{mean_loss:.8g},{gnorm:.8g},{lr:.8g}\n")
                step += 1
                if checkpoint_every and checkpoint_dir and step % checkpoint_every == 0:
                    ckpt.save_tensors(
                        os.path.join(checkpoint_dir, f"step{step:06d}.clrx"), m.state()
                    )
    finally:
        if log:
            log.close()
    state = TrainState(
        step=step,
        params={name: p.data for name, p in named_params},
        moments_m=opt.m,
        moments_v=opt.v,
        running_loss=running,
        rng_state=rng.bit_generator.state,
        history=history,
    )
    return state


def train(m, corpus, config, total_steps=None, log_path=None,
          checkpoint_every=None, checkpoint_dir=None):
    """Train the adapter parameters of an assembled model; backbone untouched."""
    if total_steps is None:
        steps_per_epoch = len(corpus) // config.effective_batch
        total_steps = config.epochs * max(steps_per_epoch, 1)
    return _engine(
        m, m.adapter_parameters(), corpus, config, total_steps,
        log_path=log_path, checkpoint_every=checkpoint_every, checkpoint_dir=checkpoint_dir,
    )


def pretrain_backbone(model_config, corpus, config, total_steps, seed=0):
    """Train a fresh backbone end to end and hand back its weight arrays.

    The result feeds build_model(..., backbone_weights=...), which
    freezes it; this is the only route by which backbone weights are
    ever produced by training.
    """
    rng = np.random.default_rng(seed)
    weights = model_mod.init_backbone_weights(model_config, rng)
    backbone = {k: Tensor(v, requires_grad=True, label=f"backbone.{k}") for k, v in weights.items()}
    trainable = model_mod.Model(
        config=model_config,
        backbone=backbone,
        adapters={},
        placement=None,
        positions=model_mod.sinusoidal_positions(model_config.max_t, model_config.d),
    )
    named = trainable.backbone_parameters()
    _engine(trainable, named, corpus, config, total_steps)
    return {k: t.data.copy() for k, t in backbone.items()}


def save_train_state(state, path):
    """Two files: a tensor container at ``path`` and scalars at ``path + '.json'``."""
    tensors = {}
    for name, arr in state.params.items():
        tensors[f"param.{name}"] = arr
    for name, arr in state.moments_m.items():
        tensors[f"adam_m.{name}"] = arr
    for name, arr in state.moments_v.items():
        tensors[f"adam_v.{name}"] = arr
    ckpt.save_tensors(path, tensors)
    meta = {
        "step": state.step,
        "running_loss": state.running_loss,
        "rng_state": state.rng_state,
        "history": [asdict(h) for h in state.history],
    }
    with open(str(path) + ".json", "w") as f:
        json.dump(meta, f, sort_keys=True)


def load_train_state(path):
    tensors = ckpt.load_tensors(path)
    with open(str(path) + ".json") as f:
        meta = json.load(f)
    params, m_, v_ = {}, {}, {}
    for name, arr in tensors.items():
        kind, _, rest = name.partition(".")
        {"param": params, "adam_m": m_, "adam_v": v_}[kind][rest] = arr
    return TrainState(
        step=int(meta["step"]),
        params=params,
        moments_m=m_,
        moments_v=v_,
        running_loss=float(meta["running_loss"]),
        rng_state=meta["rng_state"],
        history=[StepRecord(**h) for h in meta["history"]],
    )
