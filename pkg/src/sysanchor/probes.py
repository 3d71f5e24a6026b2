"""Activation-magnitude probe and cross-attention cache accounting.

For every placed adapter layer, the probe reports the L2 norm of the
block's feed-forward sublayer delta relative to the host layer's
self-attention output, in percent. Norms are taken per sequence over
the whole (T, d) slab and then averaged over the batch. A second column
reports the full block delta (attention plus feed-forward sublayer) on
the same denominator. Recording is passive: a probed forward produces
bitwise-identical logits to an unprobed one.
"""

from dataclasses import dataclass

import numpy as np

from . import model as model_mod


@dataclass(frozen=True)
class MagnitudeRecord:
    config_name: str
    layer: int
    ratio_ffn_pct: float
    ratio_full_pct: float
    sample_count: int


def measure_magnitudes(m, tokens, bounds):
    """One record per placed adapter layer, in placement order."""
    if not m.adapters:
        return []
    probe = model_mod.ProbeRecorder()
    model_mod.forward(m, tokens, bounds, probe=probe)
    name = m.placement.name if m.placement else ""
    records = []
    n = np.asarray(tokens).shape[0]
    for pos in sorted(m.adapters):
        attn = probe.attn_norms[pos]
        denom = np.where(attn == 0.0, 1.0, attn)
        records.append(
            MagnitudeRecord(
                config_name=name,
                layer=pos,
                ratio_ffn_pct=float(np.mean(probe.adapter_ffn_norms[pos] / denom) * 100.0),
                ratio_full_pct=float(np.mean(probe.adapter_full_norms[pos] / denom) * 100.0),
                sample_count=n,
            )
        )
    return records


def magnitude_csv(records):
    """Heatmap rows; layers without an adapter are simply absent."""
    lines = ["config,layer,ratio_ffn_pct,ratio_full_pct"]
    for r in records:
        lines.append(f"{r.config_name},{r.layer},{r.ratio_ffn_pct:.6g},{r.ratio_full_pct:.6g}")
    return "\n".join(lines) + "\n"


def kv_cache_report(m, tokens, bounds, n_decode_steps):
    """Cross-attention cache element counts per decode step.

    The counts are constant by construction; the report makes that
    observable (and testable) from the outside.
    """
    session = model_mod.DecodeSession(m, tokens, bounds)
    counts = [session.cal_cache_elements()]
    nxt = np.argmax(session.last_logits, axis=-1)
    for _ in range(n_decode_steps):
        logits = session.step(nxt)
        nxt = np.argmax(logits, axis=-1)
        counts.append(session.cal_cache_elements())
    return counts
