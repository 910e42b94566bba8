"""Scoring single configurations and ranking a design space.

Training cost comes from the timeline simulator: chunk compute times from
a roofline kernel model, cross-stage activation transfers, and per-slot
expert-dispatch collectives, all scheduled under the interleaved 1F1B
order. Inference cost is a deliberately coarse cluster-level roofline for
batched decode; it ranks design directions rather than predicting
deployment latency. `search_space` scores every candidate in a design
space on both axes, normalizes each axis to its best candidate, and ranks
by the weighted sum.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .cluster import HardwareDescription, kernel_time
from .comm import CommEvent, dispatch_volumes
from .errors import MoesimError
from .memory import (
    MemoryPlan,
    MemoryReport,
    memory_report,
    select_memory_plan,
    _item_params_per_device,
)
from .model import DesignSpace, ModelConfig, count_parameters, enumerate_design_space, flops_per_token, model_id
from .parallel import ParallelPlan, assign_chunks, micro_batch_count, require_valid
from .pipeline import (
    ChunkCost,
    OverlapPolicy,
    StepReport,
    build_1f1b_schedule,
    dataflow_parent,
    simulate_timeline,
    slot_id,
    summarize,
)

ITEM_KIND = {"dense": "dense", "moe": "moe", "mtp": "mtp", "head": "head"}


@dataclass(frozen=True)
class SimulationFeatures:
    """Executor behaviors the simulator can toggle on or off."""

    comm_overlap: bool = True
    decouple_dw: bool = True
    fine_grained_memory: bool = True
    host_gmm_first: bool = True
    dispatch_mechanism: str = "hierarchical"
    inference_batch: int = 4096

    def policy(self) -> OverlapPolicy:
        return OverlapPolicy(
            overlap_comm=self.comm_overlap,
            decouple_dw=self.decouple_dw,
            host_gmm_first=self.host_gmm_first,
        )


@dataclass(frozen=True)
class CostReport:
    model: str
    mode: str
    step_time: float
    tps: float
    mfu: float
    bubble_ratio: float = 0.0
    comm_overlap_rate: float = 1.0
    exposed_comm_time: float = 0.0
    memory: MemoryReport | None = None


def _item_kind(name: str) -> str:
    if name == "head_loss":
        return "head"
    return name.split("_", 1)[0]


def chunk_costs_from_model(
    cfg: ModelConfig,
    plan: ParallelPlan,
    hw: HardwareDescription,
) -> dict:
    """Roofline forward/backward seconds for every (pp, vpp) chunk."""
    profile = flops_per_token(cfg)
    tokens_dev = plan.micro_batch_size * cfg.seq_len / (plan.tp * plan.cp)
    assignment = assign_chunks(cfg, plan)
    costs = {}
    for chunk in assignment.chunks:
        flops = 0.0
        weight_bytes = 0.0
        for name, _ in chunk.items:
            flops += profile.per_layer[_item_kind(name)] * tokens_dev
            weight_bytes += _item_params_per_device(cfg, plan, name) * cfg.dtype_bytes
        act_bytes = 2.0 * cfg.hidden_size * cfg.dtype_bytes * tokens_dev * max(1, len(chunk.items))
        fwd = kernel_time(flops, weight_bytes + act_bytes, hw, dtype_bytes=cfg.dtype_bytes)
        costs[(chunk.pp_stage, chunk.vpp_stage)] = ChunkCost(fwd=fwd, bwd=2.0 * fwd)
    return costs


def _stage_crossing_resource(plan: ParallelPlan, hw: HardwareDescription) -> str:
    if hw.num_nodes > 1 and plan.tp * plan.cp >= hw.devices_per_node:
        return "inter_link"
    return "intra_link"


def boundary_transfer_events(
    schedule,
    cfg: ModelConfig,
    plan: ParallelPlan,
    hw: HardwareDescription,
) -> list:
    """Point-to-point activation sends along every cross-stage dependency.

    When the model trains an extra next-token prediction stream, its hidden
    state rides along with the main one, doubling the payload.
    """
    tokens_dev = plan.micro_batch_size * cfg.seq_len / (plan.tp * plan.cp)
    streams = 2 if cfg.num_mtp_layers > 0 else 1
    volume = tokens_dev * cfg.hidden_size * cfg.dtype_bytes * streams
    resource = _stage_crossing_resource(plan, hw)
    events = []
    for slots in schedule:
        for sl in slots:
            parent = dataflow_parent(sl, len(schedule), plan.vpp)
            if parent is None or parent.pp_stage == sl.pp_stage:
                continue
            sid = slot_id(sl)
            events.append(
                CommEvent(
                    id=f"p2p:{sid}",
                    kind="p2p",
                    resource=resource,
                    bytes=volume,
                    direction=sl.phase,
                    dependencies=(slot_id(parent),),
                    device=sl.pp_stage,
                    feeds=sid,
                )
            )
    return events


def slot_dispatch_events(
    schedule,
    cfg: ModelConfig,
    plan: ParallelPlan,
    hw: HardwareDescription,
    mechanism: str = "hierarchical",
) -> list:
    """Expert dispatch and combine collectives for every schedule slot.

    Each slot carries one transfer per network tier sized by the chunk's
    expert-routed layers (dispatch plus combine, hence the factor two).
    Events depend on the slot's upstream dataflow and gate the slot itself,
    so overlap can only come from other micro batches' compute.
    """
    if plan.ep == 1:
        return []
    assignment = assign_chunks(cfg, plan)
    tokens_dev = int(plan.micro_batch_size * cfg.seq_len / (plan.tp * plan.cp))
    vols = dispatch_volumes(
        mechanism, tokens_dev, cfg.hidden_size, cfg.dtype_bytes, cfg.top_k, plan.tp, plan.ep
    )
    routed = {}
    for chunk in assignment.chunks:
        n = sum(1 for name, _ in chunk.items if _item_kind(name) in ("moe", "mtp"))
        routed[(chunk.pp_stage, chunk.vpp_stage)] = n
    inter_group = plan.ep if mechanism == "hierarchical" else plan.ep * plan.tp
    if mechanism == "alltoall":
        inter_group = plan.ep
    inter_kind = "alltoall" if mechanism == "alltoall" else "allgather"
    intra_group = min(plan.ep * plan.tp, hw.devices_per_node)
    events = []
    for slots in schedule:
        for sl in slots:
            layers = routed[(sl.pp_stage, sl.vpp_stage)]
            if layers == 0:
                continue
            sid = slot_id(sl)
            parent = dataflow_parent(sl, len(schedule), plan.vpp)
            deps = (slot_id(parent),) if parent is not None else ()
            scale = 2.0 * layers
            prior = deps
            if hw.num_nodes > 1 and vols.inter_node_bytes > 0:
                inter_id = f"disp:{sid}:inter"
                events.append(
                    CommEvent(
                        id=inter_id,
                        kind=inter_kind,
                        resource="inter_link",
                        bytes=vols.inter_node_bytes * scale,
                        direction=sl.phase,
                        dependencies=deps,
                        device=sl.pp_stage,
                        group_size=inter_group,
                        feeds=sid,
                    )
                )
                prior = (inter_id,)
            if vols.intra_node_bytes > 0:
                events.append(
                    CommEvent(
                        id=f"disp:{sid}:intra",
                        kind="alltoall",
                        resource="intra_link",
                        bytes=vols.intra_node_bytes * scale,
                        direction=sl.phase,
                        dependencies=prior,
                        device=sl.pp_stage,
                        group_size=intra_group,
                        feeds=sid,
                    )
                )
    return events


def training_report(
    cfg: ModelConfig,
    plan: ParallelPlan,
    hw: HardwareDescription,
    features: SimulationFeatures | None = None,
) -> CostReport:
    """Simulate one training step and summarize throughput and MFU."""
    features = features or SimulationFeatures()
    plan = require_valid(plan, cfg, hw)
    if features.fine_grained_memory:
        mem = select_memory_plan(cfg, plan, hw)
    else:
        mem = memory_report(cfg, plan, hw, MemoryPlan(full_layer=True))
    m = micro_batch_count(plan)
    schedule = build_1f1b_schedule(plan.pp, m, plan.vpp)
    costs = chunk_costs_from_model(cfg, plan, hw)
    events = boundary_transfer_events(schedule, cfg, plan, hw)
    events += slot_dispatch_events(schedule, cfg, plan, hw, features.dispatch_mechanism)
    report = simulate_timeline(schedule, costs, events, policy=features.policy(), hw=hw)
    step_time = report.step_time + mem.time_added
    mfu, tps = summarize(step_time, cfg, plan, hw)
    return CostReport(
        model=model_id(cfg),
        mode="training",
        step_time=step_time,
        tps=tps,
        mfu=mfu,
        bubble_ratio=report.bubble_ratio,
        comm_overlap_rate=report.comm_overlap_rate,
        exposed_comm_time=report.exposed_comm_time,
        memory=mem,
    )


def inference_report(
    cfg: ModelConfig,
    hw: HardwareDescription,
    batch: int | None = None,
    features: SimulationFeatures | None = None,
) -> CostReport:
    """Cluster-level decode roofline: batched single-token steps.

    Compute is twice the activated matmul parameters plus attention over a
    compressed per-token cache; traffic is one sweep of the weights plus
    the cache reads. The slower of the two bounds sets the step time.
    """
    features = features or SimulationFeatures()
    b = batch if batch is not None else features.inference_batch
    params = count_parameters(cfg)
    ctx = cfg.seq_len
    heads = cfg.num_attention_heads
    mla = cfg.mla
    attn_flops_tok = 2.0 * heads * (mla.kv_rank + mla.rope_dim) * ctx + 2.0 * heads * mla.kv_rank * ctx
    flops_tok = 2.0 * params.activated_matmul + attn_flops_tok * cfg.num_layers
    weight_bytes = params.total * cfg.dtype_bytes
    cache_bytes = float(b) * cfg.num_layers * ctx * (mla.kv_rank + mla.rope_dim) * cfg.dtype_bytes
    peak = hw.world_size * hw.peak_for_dtype_bytes(cfg.dtype_bytes) * hw.matmul_efficiency
    bw = hw.world_size * hw.hbm_bandwidth
    step = max(b * flops_tok / peak, (weight_bytes + cache_bytes) / bw)
    tps = b / step
    mfu = b * flops_tok / (step * hw.world_size * hw.peak_for_dtype_bytes(cfg.dtype_bytes))
    return CostReport(
        model=model_id(cfg),
        mode="inference",
        step_time=step,
        tps=tps,
        mfu=mfu,
    )


@dataclass(frozen=True)
class RankedCandidate:
    model: str
    score: float
    training: CostReport | None
    inference: CostReport | None


@dataclass(frozen=True)
class SearchOutcome:
    ranked: tuple
    skipped: tuple  # (model_id, reason) pairs

    def top(self, k: int) -> tuple:
        return self.ranked[:k]


def _score_one(args):
    cfg, plan, hw, features, mode = args
    name = model_id(cfg)
    try:
        train = training_report(cfg, plan, hw, features) if mode in ("both", "training") else None
        infer = inference_report(cfg, hw, features=features) if mode in ("both", "inference") else None
        return (name, train, infer, None)
    except MoesimError as exc:
        return (name, None, None, f"{type(exc).__name__}: {exc}")


def search_space(
    space: DesignSpace | list,
    plan: ParallelPlan,
    hw: HardwareDescription,
    features: SimulationFeatures | None = None,
    mode: str = "both",
    weights: tuple = (0.5, 0.5),
    top: int | None = None,
    workers: int = 1,
) -> SearchOutcome:
    """Score every candidate and rank by normalized combined throughput.

    Candidates whose plan or memory is infeasible are collected with the
    failure reason instead of aborting the search. Ranking normalizes each
    axis to the best candidate so the weights compare like with like; ties
    break on the model id, making the order total and deterministic.
    """
    if mode not in ("both", "training", "inference"):
        raise ValueError(f"unknown mode {mode!r}")
    features = features or SimulationFeatures()
    configs = enumerate_design_space(space) if isinstance(space, DesignSpace) else list(space)
    jobs = [(cfg, plan, hw, features, mode) for cfg in configs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_score_one, jobs))
    else:
        results = [_score_one(j) for j in jobs]

    scored = [(n, t, i) for n, t, i, err in results if err is None]
    skipped = tuple((n, err) for n, _, _, err in results if err is not None)
    if not scored:
        return SearchOutcome(ranked=(), skipped=skipped)

    max_train = max((t.tps for _, t, _ in scored if t), default=0.0)
    max_inf = max((i.tps for _, _, i in scored if i), default=0.0)
    w_train, w_inf = weights
    ranked = []
    for name, train, infer in scored:
        score = 0.0
        if train and max_train > 0:
            score += w_train * train.tps / max_train
        if infer and max_inf > 0:
            score += w_inf * infer.tps / max_inf
        if mode == "training" and max_train > 0:
            score = train.tps / max_train
        elif mode == "inference" and max_inf > 0:
            score = infer.tps / max_inf
        ranked.append(RankedCandidate(name, score, train, infer))
    ranked.sort(key=lambda r: (-r.score, r.model))
    if top is not None:
        ranked = ranked[:top]
    return SearchOutcome(ranked=tuple(ranked), skipped=skipped)
