"""Parallelism plan validation and layer-to-chunk assignment.

A plan factorizes the cluster as tp * pp * dp * cp == world_size, with
expert parallelism nested inside data parallelism (dp >= ep, ep | dp) and
experts sharded across tp * ep devices, so num_routed_experts must divide
evenly by tp * ep.

Chunk assignment splits the ordered layer items (dense layers, expert
layers, extra-token blocks, then the head+loss) into pp * vpp contiguous
chunks minimizing the maximum chunk weight. The split is exact (dynamic
program over contiguous partitions), with ties broken toward the earliest
split positions. Chunk i maps to pipeline stage i % pp, virtual stage
i // pp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .cluster import HardwareDescription
from .errors import InfeasibleChunkingError, NonDivisibleError, PlanError
from .model import ModelConfig


@dataclass(frozen=True)
class ParallelPlan:
    tp: int = 1
    pp: int = 1
    vpp: int = 1
    ep: int = 1
    dp: int = 0  # 0 means "derive from world size"
    cp: int = 1
    micro_batch_size: int = 1
    global_batch_size: int = 0  # sequences per step; 0 means unspecified

    def __post_init__(self):
        for name in ("tp", "pp", "vpp", "ep", "cp", "micro_batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.dp < 0 or self.global_batch_size < 0:
            raise ValueError("dp and global_batch_size must be >= 0")


@dataclass(frozen=True)
class PlanCheck:
    ok: bool
    errors: tuple
    plan: ParallelPlan  # with dp resolved when derivable


def validate_plan(plan: ParallelPlan, cfg: ModelConfig, hw: HardwareDescription) -> PlanCheck:
    """Check a plan against the model and cluster; never raises.

    dp == 0 is resolved to world_size / (tp * pp * cp) when that divides
    evenly. The returned plan carries the resolved dp.
    """
    errors = []
    world = hw.world_size
    grid = plan.tp * plan.pp * plan.cp
    dp = plan.dp
    if dp == 0:
        if world % grid == 0:
            dp = world // grid
        else:
            errors.append(
                f"cannot derive dp: tp*pp*cp={grid} does not divide world_size={world}"
            )
            dp = 1
    resolved = replace(plan, dp=dp)

    if plan.tp * plan.pp * dp * plan.cp != world:
        errors.append(
            f"tp*pp*dp*cp={plan.tp * plan.pp * dp * plan.cp} != world_size={world}"
        )
    if dp < plan.ep:
        errors.append(f"dp={dp} < ep={plan.ep}")
    elif dp % plan.ep:
        errors.append(f"ep={plan.ep} does not divide dp={dp}")
    if cfg.num_routed_experts % (plan.tp * plan.ep):
        errors.append(
            f"num_routed_experts={cfg.num_routed_experts} not divisible by "
            f"tp*ep={plan.tp * plan.ep}"
        )
    n_items = cfg.num_layers + cfg.num_mtp_layers + 1
    if n_items < plan.pp * plan.vpp:
        errors.append(
            f"{n_items} layer items cannot fill pp*vpp={plan.pp * plan.vpp} chunks"
        )
    if plan.global_batch_size:
        denom = dp * plan.micro_batch_size
        if plan.global_batch_size % denom:
            errors.append(
                f"global_batch_size={plan.global_batch_size} not divisible by "
                f"dp*micro_batch_size={denom}"
            )
        elif plan.vpp > 1:
            m = plan.global_batch_size // denom
            if m % plan.pp:
                errors.append(
                    f"interleaved schedule needs micro_batches % pp == 0, got "
                    f"{m} % {plan.pp}"
                )
    return PlanCheck(not errors, tuple(errors), resolved)


def require_valid(plan: ParallelPlan, cfg: ModelConfig, hw: HardwareDescription) -> ParallelPlan:
    check = validate_plan(plan, cfg, hw)
    if not check.ok:
        raise PlanError(check.errors)
    return check.plan


def micro_batch_count(plan: ParallelPlan) -> int:
    if plan.global_batch_size <= 0:
        raise NonDivisibleError("global_batch_size is not set")
    if plan.dp <= 0:
        raise NonDivisibleError("dp is unresolved; validate the plan first")
    denom = plan.dp * plan.micro_batch_size
    if plan.global_batch_size % denom:
        raise NonDivisibleError(
            f"global_batch_size={plan.global_batch_size} not divisible by "
            f"dp*micro_batch_size={denom}"
        )
    return plan.global_batch_size // denom


@dataclass(frozen=True)
class ChunkWeights:
    """Relative step-time weight of each layer item kind.

    Every transformer layer counts as one unit by default, dense included;
    the extra-prediction block and the loss head carry their published
    relative costs. Callers can discount dense layers when their measured
    step share is known."""

    moe: float = 1.0
    dense: float = 1.0
    mtp_body: float = 1.05
    head_loss: float = 1.5


@dataclass(frozen=True)
class ChunkAssignment:
    pp_stage: int
    vpp_stage: int
    items: tuple  # (name, weight) pairs
    weight: float


@dataclass(frozen=True)
class StageAssignment:
    chunks: tuple
    max_chunk_weight: float
    baseline_weight: float

    @property
    def overflow_ratio(self) -> float:
        return self.max_chunk_weight / self.baseline_weight

    def chunk(self, pp_stage: int, vpp_stage: int) -> ChunkAssignment:
        for c in self.chunks:
            if c.pp_stage == pp_stage and c.vpp_stage == vpp_stage:
                return c
        raise KeyError((pp_stage, vpp_stage))


def partition_contiguous(weights, num_chunks: int) -> list[list[int]]:
    """Split indices 0..n-1 into num_chunks contiguous non-empty runs
    minimizing the max run weight; earliest split positions win ties.

    Returns the list of index lists. Exact via dynamic programming.
    """
    n = len(weights)
    if num_chunks < 1:
        raise ValueError("num_chunks must be >= 1")
    if n < num_chunks:
        raise InfeasibleChunkingError(f"{n} items into {num_chunks} chunks")
    prefix = [0.0]
    for w in weights:
        prefix.append(prefix[-1] + w)

    def seg(i, j):  # weight of items[i:j]
        return prefix[j] - prefix[i]

    # best[k][j] = minimal max chunk weight for items[j:] split into k chunks
    best = [[math.inf] * (n + 1) for _ in range(num_chunks + 1)]
    best[0][n] = 0.0
    for k in range(1, num_chunks + 1):
        # items[j:] needs at least k items and leaves room for k-1 more cuts
        for j in range(n - k, -1, -1):
            acc = math.inf
            for e in range(j + 1, n - k + 2):
                cand = max(seg(j, e), best[k - 1][e])
                if cand < acc:
                    acc = cand
            best[k][j] = acc

    # Walk back greedily: each chunk ends at the earliest position that
    # still lets the suffix stay within the optimal bound.
    target = best[num_chunks][0]
    chunks = []
    j = 0
    for k in range(num_chunks, 0, -1):
        for e in range(j + 1, n - k + 2):
            if seg(j, e) <= target and best[k - 1][e] <= target:
                chunks.append(list(range(j, e)))
                j = e
                break
    return chunks


def layer_items(cfg: ModelConfig, weights: ChunkWeights | None = None) -> list[tuple]:
    """Ordered (name, weight) items entering the chunk partition."""
    w = weights or ChunkWeights()
    items = [(f"dense_{i}", w.dense) for i in range(cfg.num_dense_layers)]
    items += [(f"moe_{i}", w.moe) for i in range(cfg.num_moe_layers)]
    items += [(f"mtp_{i}", w.mtp_body) for i in range(cfg.num_mtp_layers)]
    items.append(("head_loss", w.head_loss))
    return items


def assign_chunks(
    cfg: ModelConfig,
    plan: ParallelPlan,
    weights: ChunkWeights | None = None,
) -> StageAssignment:
    w = weights or ChunkWeights()
    items = layer_items(cfg, w)
    num_chunks = plan.pp * plan.vpp
    runs = partition_contiguous([wt for _, wt in items], num_chunks)
    chunks = []
    for idx, run in enumerate(runs):
        picked = tuple(items[i] for i in run)
        chunks.append(
            ChunkAssignment(
                pp_stage=idx % plan.pp,
                vpp_stage=idx // plan.pp,
                items=picked,
                weight=sum(wt for _, wt in picked),
            )
        )
    max_weight = max(c.weight for c in chunks)
    baseline = math.ceil(len(items) / num_chunks) * w.moe
    return StageAssignment(tuple(chunks), max_weight, baseline)
