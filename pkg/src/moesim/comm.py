"""Expert dispatch traffic models.

Volumes are counted in token units and scaled by hidden_size * dtype_bytes.
``tokens`` always means tokens held by one device for one micro batch.
Three dispatch mechanisms are modeled:

* allgather: every device in the tp*ep group receives the full gathered
  token buffer, so the buffer spans tokens * tp * ep token units and the
  traffic is charged to the slower tier the group spans.
* alltoall: each token travels once per selected expert, tokens * top_k.
* hierarchical: an inter-node allgather among the ep peer devices
  (tokens * (ep - 1) received token units) followed by an intra-node
  alltoall of the selected copies (tokens * top_k). The inter phase of one
  direction is independent of the intra phase of the opposite direction,
  which is what lets forward and backward dispatch overlap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .cluster import HardwareDescription
from .model import ModelConfig
from .parallel import ParallelPlan

MECHANISMS = ("allgather", "alltoall", "hierarchical")


@dataclass(frozen=True)
class DispatchVolumes:
    mechanism: str
    inter_node_bytes: float
    intra_node_bytes: float

    @property
    def total_bytes(self) -> float:
        return self.inter_node_bytes + self.intra_node_bytes


@dataclass(frozen=True)
class CommEvent:
    """One communication op for the timeline simulator.

    ``feeds`` optionally names a schedule slot (or another event) that must
    wait for this event; ``dependencies`` name events or slots this event
    waits for. ``group_size`` > 1 makes the duration follow the collective
    cost model; otherwise the event is a plain transfer.
    """

    id: str
    kind: str  # allgather | alltoall | p2p | ...
    resource: str  # inter_link | intra_link
    bytes: float
    direction: str = "fwd"  # fwd | bwd
    dependencies: tuple = ()
    device: int = 0
    group_size: int = 0
    feeds: str | None = None


def dispatch_volumes(
    mechanism: str,
    tokens: int,
    hidden: int,
    dtype_bytes: int,
    topk: int,
    tp: int,
    ep: int,
) -> DispatchVolumes:
    """Bytes crossing each network tier to dispatch one device's tokens."""
    if mechanism not in MECHANISMS:
        raise ValueError(f"unknown dispatch mechanism {mechanism!r}")
    if min(tokens, hidden, dtype_bytes, topk, tp, ep) < 1 and tokens != 0:
        raise ValueError("tokens may be zero; all other factors must be >= 1")
    unit = hidden * dtype_bytes
    if mechanism == "allgather":
        inter_units = tokens * tp * ep
        intra_units = 0
    elif mechanism == "alltoall":
        inter_units = tokens * topk
        intra_units = 0
    else:
        inter_units = tokens * (ep - 1)
        intra_units = tokens * topk
    return DispatchVolumes(mechanism, inter_units * unit, intra_units * unit)


def hierarchical_events(
    tokens: int,
    cfg: ModelConfig,
    plan: ParallelPlan,
    hw: HardwareDescription,
    prefix: str = "disp",
) -> list[CommEvent]:
    """Two-phase dispatch events for one micro batch, both directions.

    Phase one is the cross-node allgather among ep peers, phase two the
    local alltoall; within a direction phase two depends on phase one. On a
    single-node cluster the phase-one list is empty and only the local
    alltoall remains.
    """
    vols = dispatch_volumes(
        "hierarchical", tokens, cfg.hidden_size, cfg.dtype_bytes, cfg.top_k, plan.tp, plan.ep
    )
    events: list[CommEvent] = []
    for direction in ("fwd", "bwd"):
        deps: tuple = ()
        if hw.num_nodes > 1 and vols.inter_node_bytes > 0:
            inter_id = f"{prefix}:{direction}:inter"
            events.append(
                CommEvent(
                    id=inter_id,
                    kind="allgather",
                    resource="inter_link",
                    bytes=vols.inter_node_bytes,
                    direction=direction,
                    group_size=plan.ep,
                )
            )
            deps = (inter_id,)
        events.append(
            CommEvent(
                id=f"{prefix}:{direction}:intra",
                kind="alltoall",
                resource="intra_link",
                bytes=vols.intra_node_bytes,
                direction=direction,
                dependencies=deps,
                group_size=min(plan.ep * plan.tp, hw.devices_per_node),
            )
        )
    return events


def tp_exposed_time(comm_time: float, tiles: int) -> float:
    """Exposed fraction of tensor-parallel collective time when the matmul
    and its collective are cut into ``tiles`` interleaved pieces."""
    if tiles < 1:
        raise ValueError("tiles must be >= 1")
    if comm_time < 0:
        raise ValueError("comm_time must be >= 0")
    return comm_time / tiles
