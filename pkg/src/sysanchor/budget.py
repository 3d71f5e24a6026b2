"""Parameter accounting, low-rank budget matching, and the training-cost
model that compares adapter-only backpropagation against full-graph
low-rank tuning.

The FLOP functions are a cost model in exact integer arithmetic, not a
wall-clock claim: forward work is 2 * params * tokens for both methods;
the adapter method backpropagates only through its own parameters,
while the low-rank method pays the full graph plus one recompute pass.
"""

import warnings
from dataclasses import dataclass

LORA_MODULES = ("q", "k", "v", "o", "gate", "up", "down")
CAL_METHOD = "cal"
LORA_METHOD = "lora"


def cal_block_params(d):
    """4d^2 attention + 8d^2 gate/up + 4d^2 down projection + 2d gains."""
    return 16 * d * d + 2 * d


def pmlp_block_params(d):
    """Gated MLP adapter: 8d^2 gate/up + 4d^2 down + d gain."""
    return 12 * d * d + d


def count_adapter_params(config):
    """Exact trainable parameter count of a model config's adapters."""
    from .model import resolve_placement

    if config.adapter == "none":
        return 0
    placement = resolve_placement(config.placement, config.n_layers)
    per_block = cal_block_params(config.d) if config.adapter == "cal" else pmlp_block_params(config.d)
    return placement.count * per_block


@dataclass(frozen=True)
class LoraBudgetProblem:
    """Equal-rank budget match over the seven linear projections per layer."""

    p_target: int
    n_layers: int
    hidden: int
    kv_dim: int
    intermediate: int
    rank_cap: int = 512

    def __post_init__(self):
        if min(self.p_target, self.n_layers, self.hidden, self.kv_dim,
               self.intermediate, self.rank_cap) <= 0:
            raise ValueError("all budget-problem fields must be positive")
        if self.kv_dim > self.hidden:
            raise ValueError("kv_dim cannot exceed hidden size")

    @property
    def per_rank_cost(self):
        """Parameters added per unit of rank in one layer, all seven modules."""
        h, dkv, i = self.hidden, self.kv_dim, self.intermediate
        return 2 * (h + dkv) + 4 * h + 3 * (h + i)

    @property
    def per_rank_cost_uncapped(self):
        """Same, counting only the five modules not subject to the kv cap."""
        h, i = self.hidden, self.intermediate
        return 4 * h + 3 * (h + i)


_MODULE_COST_FACTORS = {
    "q": lambda h, dkv, i: 2 * h,
    "k": lambda h, dkv, i: h + dkv,
    "v": lambda h, dkv, i: h + dkv,
    "o": lambda h, dkv, i: 2 * h,
    "gate": lambda h, dkv, i: h + i,
    "up": lambda h, dkv, i: h + i,
    "down": lambda h, dkv, i: i + h,
}


def realized_lora_params(module_ranks, problem):
    h, dkv, i = problem.hidden, problem.kv_dim, problem.intermediate
    per_layer = sum(
        module_ranks[mod] * _MODULE_COST_FACTORS[mod](h, dkv, i) for mod in LORA_MODULES
    )
    return problem.n_layers * per_layer


@dataclass(frozen=True)
class LoraSolution:
    rank: int
    alpha: int
    module_ranks: dict
    realized_params: int
    capped: bool


def solve_lora_rank(problem):
    """Round-to-nearest equal rank; k/v capped at kv_dim with the leftover
    budget redistributed as a single shared rank over the other five
    modules. Ties round half to even. A rank of zero means the budget
    cannot afford one rank unit and is flagged as infeasible.
    """
    r = round(problem.p_target / (problem.n_layers * problem.per_rank_cost))
    capped = False
    if r > problem.kv_dim:
        capped = True
        h, dkv = problem.hidden, problem.kv_dim
        kv_spend = problem.n_layers * 2 * dkv * (h + dkv)
        residual = problem.p_target - kv_spend
        r = round(residual / (problem.n_layers * problem.per_rank_cost_uncapped))
        r = max(r, 0)
    r = min(r, problem.rank_cap)
    if r == 0:
        warnings.warn("budget below the cost of a single rank unit; rank solved to 0")
    ranks = {mod: r for mod in LORA_MODULES}
    if capped:
        ranks["k"] = ranks["v"] = problem.kv_dim
    return LoraSolution(
        rank=r,
        alpha=2 * r,
        module_ranks=ranks,
        realized_params=realized_lora_params(ranks, problem),
        capped=capped,
    )


@dataclass(frozen=True)
class FlopBudget:
    """(base params, adapter params, sequence length) for the cost model."""

    p_base: int
    p_adapter: int
    seq_len: int

    def __post_init__(self):
        if self.p_base <= 0 or self.seq_len <= 0:
            raise ValueError("base parameter count and sequence length must be positive")
        if self.p_adapter < 0:
            raise ValueError("adapter parameter count cannot be negative")


@dataclass(frozen=True)
class FlopCounts:
    forward: int
    backward: int

    @property
    def total(self):
        return self.forward + self.backward


def flops(method, budget):
    """Forward/backward FLOPs per sample. The forward term is shared;
    backward is 2 * P_a * S for adapter-only training and
    4 * (P_b + P_a) * S (full graph plus recompute) for low-rank tuning.
    """
    fwd = 2 * (budget.p_base + budget.p_adapter) * budget.seq_len
    if method == CAL_METHOD:
        bwd = 2 * budget.p_adapter * budget.seq_len
    elif method == LORA_METHOD:
        bwd = 4 * (budget.p_base + budget.p_adapter) * budget.seq_len
    else:
        raise ValueError(f"unknown method {method!r}; use {CAL_METHOD!r} or {LORA_METHOD!r}")
    return FlopCounts(forward=fwd, backward=bwd)


def speedup_ratio(budget):
    """Total-FLOP ratio of low-rank tuning to adapter-only training.

    Equals 6(P_b + P_a) / (2(P_b + P_a) + 2 P_a): 3 as P_a tends to 0,
    2 at P_a == P_b, strictly decreasing in between.
    """
    return flops(LORA_METHOD, budget).total / flops(CAL_METHOD, budget).total
