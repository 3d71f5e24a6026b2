"""Cross-attention adapter blocks that anchor a privileged system-prompt
span inside a frozen causal decoder, plus the machinery around them:
span detection, placement strategies, adapter-only training, budget and
training-cost calculators, and activation probes.
"""

__version__ = "0.1.0"

from .budget import FlopBudget, LoraBudgetProblem, count_adapter_params, flops, solve_lora_rank, speedup_ratio
from .cal import CalKvCache, CalParams, build_mask, cal_forward, decode_step, init_cal_params, prefill_kv
from .model import Model, ModelConfig, PlacementConfig, build_model, forward, resolve_placement
from .spans import BatchBounds, SpanBounds, batch_bounds, detect_span
from .tokenizer import ToyTokenizer
from .training import TrainConfig, lr_at, train

__all__ = [
    "BatchBounds", "CalKvCache", "CalParams", "FlopBudget", "LoraBudgetProblem",
    "Model", "ModelConfig", "PlacementConfig", "SpanBounds", "ToyTokenizer",
    "TrainConfig", "batch_bounds", "build_mask", "build_model", "cal_forward",
    "count_adapter_params", "decode_step", "detect_span", "flops", "forward",
    "init_cal_params", "lr_at", "prefill_kv", "resolve_placement",
    "solve_lora_rank", "speedup_ratio", "train",
]
