"""Device memory accounting and recompute/swap plan selection.

Static memory per device is the sharded weight + gradient pair at the
training dtype plus the fp32 master copy and two optimizer moments, the
latter sharded across data parallel ranks:

    bytes = 2 * dtype_bytes * P_device + (4 + 8) * P_device / dp

Activation accounting groups every intra-layer tensor into one of four
releasable buckets (attention path, kv-only subset of it, token
permutation buffers, expert FFN intermediates) plus the router
probabilities, which can be swapped to host memory instead of recomputed.
With every option enabled only the layer-boundary activations remain: the
attention block input and the FFN block input, 2 * hidden * dtype_bytes
per token per layer. Peak bytes scale with the micro batches a stage keeps
alive under the 1F1B schedule (stage 0 is the worst).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .cluster import HardwareDescription, kernel_time
from .errors import InfeasibleMemoryError
from .model import ModelConfig, count_parameters, flops_per_token, _attention_params, _layer_norm_params
from .parallel import ChunkWeights, ParallelPlan, assign_chunks, micro_batch_count

RECOMPUTE_OPTIONS = ("mla_qkv", "mla_kv_only", "permute", "swiglu_activation")
SWAP_OPTIONS = ("probs",)


@dataclass(frozen=True)
class MemoryPlan:
    recompute: frozenset = frozenset()
    swap: frozenset = frozenset()
    full_layer: bool = False

    def __post_init__(self):
        unknown = set(self.recompute) - set(RECOMPUTE_OPTIONS)
        if unknown:
            raise ValueError(f"unknown recompute options: {sorted(unknown)}")
        unknown = set(self.swap) - set(SWAP_OPTIONS)
        if unknown:
            raise ValueError(f"unknown swap options: {sorted(unknown)}")
        if "mla_qkv" in self.recompute and "mla_kv_only" in self.recompute:
            raise ValueError("mla_qkv and mla_kv_only are mutually exclusive")

    @staticmethod
    def everything() -> "MemoryPlan":
        return MemoryPlan(
            recompute=frozenset(("mla_qkv", "permute", "swiglu_activation")),
            swap=frozenset(SWAP_OPTIONS),
        )


@dataclass(frozen=True)
class MemoryReport:
    static_bytes: float
    activation_bytes: float
    capacity_bytes: float
    feasible: bool
    plan: MemoryPlan
    time_added: float = 0.0

    @property
    def total_bytes(self) -> float:
        return self.static_bytes + self.activation_bytes

    @property
    def headroom_bytes(self) -> float:
        return self.capacity_bytes - self.total_bytes


def _item_params_per_device(cfg: ModelConfig, plan: ParallelPlan, name: str) -> float:
    """Parameters one device owns for a single layer item."""
    h = cfg.hidden_size
    attn = (_attention_params(cfg) + _layer_norm_params(cfg)) / plan.tp
    expert = cfg.expert_param_count
    if name.startswith("dense_"):
        return attn + 3 * h * cfg.dense_ffn_intermediate_size / plan.tp
    if name.startswith("moe_") or name.startswith("mtp_"):
        held = cfg.num_routed_experts // (plan.tp * plan.ep)
        value = (
            attn
            + h * cfg.num_routed_experts  # router, replicated
            + held * expert
            + cfg.num_shared_experts * expert / plan.tp
        )
        if name.startswith("mtp_"):
            value += (2 * h * h + 2 * h) / plan.tp
        return value
    if name == "head_loss":
        return h * cfg.vocab_size / plan.tp
    raise ValueError(f"unknown layer item {name!r}")


def static_memory(cfg: ModelConfig, plan: ParallelPlan) -> float:
    """Worst per-device static bytes (weights, grads, optimizer shard)."""
    if plan.dp < 1:
        raise ValueError("plan.dp must be resolved (>= 1)")
    assignment = assign_chunks(cfg, plan)
    per_stage = [0.0] * plan.pp
    for chunk in assignment.chunks:
        for name, _ in chunk.items:
            per_stage[chunk.pp_stage] += _item_params_per_device(cfg, plan, name)
    per_stage[0] += cfg.vocab_size * cfg.hidden_size / plan.tp  # input embedding
    worst = max(per_stage)
    return 2 * cfg.dtype_bytes * worst + 12.0 * worst / plan.dp


def _activation_buckets(cfg: ModelConfig, kind: str) -> dict:
    """Stored bytes per token for one layer, grouped by release option."""
    b = cfg.dtype_bytes
    h = cfg.hidden_size
    m = cfg.mla
    heads = cfg.num_attention_heads
    kv_part = (m.kv_rank + m.rope_dim) + (heads * m.head_dim + m.rope_dim) + heads * m.head_dim
    q_part = m.q_rank + heads * (m.head_dim + m.rope_dim)
    ctx = heads * m.head_dim
    buckets = {
        "boundary": 2 * h * b,
        "mla_kv_only": kv_part * b,
        "mla_q_rest": (q_part + ctx) * b,
        "permute": 0.0,
        "swiglu_activation": 0.0,
        "probs": 0.0,
    }
    if kind == "dense":
        buckets["swiglu_activation"] = 2 * cfg.dense_ffn_intermediate_size * b
    else:
        active = cfg.top_k + cfg.num_shared_experts
        buckets["permute"] = (2 * cfg.top_k + cfg.num_shared_experts) * h * b
        buckets["swiglu_activation"] = active * 2 * cfg.expert_intermediate_size * b
        buckets["probs"] = cfg.num_routed_experts * 4.0
    return buckets


def _kept_bytes_per_token(cfg: ModelConfig, kind: str, plan: MemoryPlan) -> float:
    buckets = _activation_buckets(cfg, kind)
    if plan.full_layer:
        return buckets["boundary"]
    kept = buckets["boundary"]
    if "mla_qkv" in plan.recompute:
        pass  # releases both attention buckets
    elif "mla_kv_only" in plan.recompute:
        kept += buckets["mla_q_rest"]
    else:
        kept += buckets["mla_kv_only"] + buckets["mla_q_rest"]
    if "permute" not in plan.recompute:
        kept += buckets["permute"]
    if "swiglu_activation" not in plan.recompute:
        kept += buckets["swiglu_activation"]
    if "probs" not in plan.swap:
        kept += buckets["probs"]
    return kept


def in_flight_micro_batches(plan: ParallelPlan, stage: int, m: int | None = None) -> int:
    """Forward activations stage ``stage`` holds at the 1F1B peak, counted
    in chunk units."""
    p, v = plan.pp, plan.vpp
    if v == 1:
        peak = p - stage
    else:
        peak = (p - stage - 1) * 2 + (v - 1) * p + 1
    if m is not None:
        peak = min(peak, m * v)
    return peak


def _tokens_per_device(cfg: ModelConfig, plan: ParallelPlan) -> float:
    return plan.micro_batch_size * cfg.seq_len / (plan.tp * plan.cp)


def activation_peak(cfg: ModelConfig, plan: ParallelPlan, mem_plan: MemoryPlan) -> float:
    """Peak activation bytes on the worst (first) pipeline stage."""
    try:
        m = micro_batch_count(plan)
    except Exception:
        m = None
    assignment = assign_chunks(cfg, plan)
    tokens = _tokens_per_device(cfg, plan)
    stage_chunks = [c for c in assignment.chunks if c.pp_stage == 0]
    per_mb = 0.0
    for chunk in stage_chunks:
        for name, _ in chunk.items:
            if name.startswith("dense_"):
                per_mb += _kept_bytes_per_token(cfg, "dense", mem_plan) * tokens
            elif name.startswith(("moe_", "mtp_")):
                per_mb += _kept_bytes_per_token(cfg, "moe", mem_plan) * tokens
            # head_loss: logits freed within the micro batch, not accumulated
    per_chunk = per_mb / max(1, len(stage_chunks))
    return in_flight_micro_batches(plan, 0, m) * per_chunk


def plan_time_cost(
    cfg: ModelConfig,
    plan: ParallelPlan,
    hw: HardwareDescription,
    mem_plan: MemoryPlan,
) -> float:
    """Seconds one device adds per step for recompute and swap traffic."""
    try:
        m = micro_batch_count(plan)
    except Exception:
        m = 1
    tokens = _tokens_per_device(cfg, plan)
    layers_per_stage = math.ceil((cfg.num_layers + cfg.num_mtp_layers) / plan.pp)
    moe_fraction = cfg.num_moe_layers / max(1, cfg.num_layers)
    b = cfg.dtype_bytes
    h = cfg.hidden_size

    per_layer = 0.0
    if mem_plan.full_layer:
        fwd_flops = flops_per_token(cfg).per_layer["moe"] * tokens
        per_layer += kernel_time(fwd_flops, 0.0, hw, dtype_bytes=b)
    if "mla_qkv" in mem_plan.recompute:
        per_layer += kernel_time(2.0 * _attention_params(cfg) * tokens, 0.0, hw, dtype_bytes=b)
    elif "mla_kv_only" in mem_plan.recompute:
        mla = cfg.mla
        kv_params = (
            cfg.hidden_size * mla.kv_rank
            + cfg.hidden_size * mla.rope_dim
            + 2 * mla.kv_rank * cfg.num_attention_heads * mla.head_dim
        )
        per_layer += kernel_time(2.0 * kv_params * tokens, 0.0, hw, dtype_bytes=b)
    if "permute" in mem_plan.recompute:
        moved = 2 * cfg.top_k * h * b * tokens * moe_fraction
        per_layer += moved / hw.hbm_bandwidth
    if "swiglu_activation" in mem_plan.recompute:
        active = cfg.top_k + cfg.num_shared_experts
        moved = 3 * active * cfg.expert_intermediate_size * b * tokens * moe_fraction
        per_layer += moved / hw.hbm_bandwidth
    if "probs" in mem_plan.swap:
        transfer = 2.0 * cfg.num_routed_experts * 4.0 * tokens * moe_fraction
        transfer_time = transfer / hw.host_to_device_bandwidth
        layer_fwd = kernel_time(
            flops_per_token(cfg).per_layer["moe"] * tokens,
            0.0,
            hw,
            dtype_bytes=b,
        )
        slack = 2.0 * layer_fwd
        per_layer += max(0.0, transfer_time - slack)
    return per_layer * layers_per_stage * m


def memory_report(
    cfg: ModelConfig,
    plan: ParallelPlan,
    hw: HardwareDescription,
    mem_plan: MemoryPlan,
    capacity: float | None = None,
) -> MemoryReport:
    cap = hw.hbm_capacity if capacity is None else capacity
    static = static_memory(cfg, plan)
    act = activation_peak(cfg, plan, mem_plan)
    return MemoryReport(
        static_bytes=static,
        activation_bytes=act,
        capacity_bytes=cap,
        feasible=static + act <= cap,
        plan=mem_plan,
        time_added=plan_time_cost(cfg, plan, hw, mem_plan),
    )


def candidate_plans() -> list:
    """Every valid fine-grained option combination, deterministic order."""
    attn_choices = (frozenset(), frozenset(("mla_kv_only",)), frozenset(("mla_qkv",)))
    toggles = (frozenset(), frozenset(("permute",)))
    ffn = (frozenset(), frozenset(("swiglu_activation",)))
    swaps = (frozenset(), frozenset(("probs",)))
    plans = []
    for a in attn_choices:
        for t in toggles:
            for f in ffn:
                for s in swaps:
                    plans.append(MemoryPlan(recompute=a | t | f, swap=s))
    return plans


def select_memory_plan(
    cfg: ModelConfig,
    plan: ParallelPlan,
    hw: HardwareDescription,
    capacity: float | None = None,
) -> MemoryReport:
    """Cheapest feasible fine-grained plan.

    Ranked by added time, then fewer options, then kv-only preferred over
    the full attention path, then option names. Raises
    InfeasibleMemoryError when even the maximal set does not fit.
    """
    reports = []
    for mp in candidate_plans():
        rep = memory_report(cfg, plan, hw, mp, capacity)
        if rep.feasible:
            reports.append(rep)
    if not reports:
        full = memory_report(cfg, plan, hw, MemoryPlan.everything(), capacity)
        raise InfeasibleMemoryError(
            f"static {full.static_bytes:.3e} + activations {full.activation_bytes:.3e} "
            f"exceed capacity {full.capacity_bytes:.3e} even with every option enabled"
        )

    def key(rep: MemoryReport):
        names = sorted(rep.plan.recompute | rep.plan.swap)
        return (
            rep.time_added,
            len(names),
            1 if "mla_qkv" in rep.plan.recompute else 0,
            names,
        )

    return min(reports, key=key)
