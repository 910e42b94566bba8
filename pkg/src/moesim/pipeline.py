"""Pipeline schedules and the step timeline simulation.

The schedule is the one-forward-one-backward family: classic 1F1B when
vpp == 1, and the interleaved variant when vpp > 1 (which requires the
micro batch count to divide evenly by the stage count; plans violating
that are rejected at validation). The simulation executes the schedule's
slots plus any communication events on per-device resources (compute,
inter_link, intra_link, host) and reports step time, bubble fraction,
communication overlap, and host-induced idle time.

Slot ids follow ``{phase}:p{stage}:v{chunk}:m{micro_batch}`` and may be
referenced from CommEvent dependencies and ``feeds``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from . import engine
from .cluster import CommGroup, HardwareDescription, collective_time
from .comm import CommEvent
from .model import ModelConfig
from .parallel import ParallelPlan

# Fractions of a forward chunk spent in the host-visible sub-ops when host
# dispatch is modeled. The grouped expert matmul dominates.
PREPROCESS_FRACTION = 0.05
PERMUTE_FRACTION = 0.15
GMM_FRACTION = 0.80


@dataclass(frozen=True)
class ScheduleSlot:
    pp_stage: int
    vpp_stage: int
    micro_batch: int
    phase: str  # "fwd" | "bwd"


@dataclass(frozen=True)
class ChunkCost:
    fwd: float
    bwd: float


@dataclass(frozen=True)
class OverlapPolicy:
    """Which masking features the executor applies."""

    overlap_comm: bool = True
    decouple_dw: bool = True
    dw_fraction: float = 0.3
    host_gmm_first: bool = True

    def __post_init__(self):
        if not 0 <= self.dw_fraction < 1:
            raise ValueError("dw_fraction must be in [0, 1)")


SERIALIZED = OverlapPolicy(overlap_comm=False, decouple_dw=False, host_gmm_first=False)


@dataclass
class StepReport:
    step_time: float
    bubble_ratio: float
    comm_overlap_rate: float
    exposed_comm_time: float
    host_idle_time: float
    per_stage_busy: tuple
    mfu: float = 0.0
    tps: float = 0.0
    timeline: engine.TimelineResult | None = None


def analytic_bubble_ratio(p: int, m: int, v: int = 1) -> float:
    """Idle fraction of an ideal interleaved 1F1B pipeline."""
    if min(p, m, v) < 1:
        raise ValueError("p, m, and v must be >= 1")
    return (p - 1) / (v * m + p - 1)


def slot_id(slot: ScheduleSlot) -> str:
    return f"{slot.phase}:p{slot.pp_stage}:v{slot.vpp_stage}:m{slot.micro_batch}"


def _interleaved_order(i: int, p: int, v: int, backward: bool):
    group, r = divmod(i, p * v)
    chunk, lane = divmod(r, p)
    if backward:
        chunk = v - 1 - chunk
    return chunk, group * p + lane


def build_1f1b_schedule(p: int, m: int, v: int = 1) -> list:
    """Per-stage slot sequences for the (interleaved) 1F1B schedule."""
    if min(p, m, v) < 1:
        raise ValueError("p, m, and v must be >= 1")
    if v > 1 and m % p:
        raise ValueError("interleaved schedule requires micro_batches % pp == 0")
    total = m * v
    stages = []
    for s in range(p):
        if v == 1:
            warmup = min(p - s - 1, m)
            fwd_order = [(0, mb) for mb in range(m)]
            bwd_order = [(0, mb) for mb in range(m)]
        else:
            warmup = min((p - s - 1) * 2 + (v - 1) * p, total)
            fwd_order = [_interleaved_order(i, p, v, False) for i in range(total)]
            bwd_order = [_interleaved_order(i, p, v, True) for i in range(total)]
        slots = []
        fi = bi = 0
        while fi < warmup:
            c, mb = fwd_order[fi]
            fi += 1
            slots.append(ScheduleSlot(s, c, mb, "fwd"))
        while fi < total:
            c, mb = fwd_order[fi]
            fi += 1
            slots.append(ScheduleSlot(s, c, mb, "fwd"))
            c, mb = bwd_order[bi]
            bi += 1
            slots.append(ScheduleSlot(s, c, mb, "bwd"))
        while bi < total:
            c, mb = bwd_order[bi]
            bi += 1
            slots.append(ScheduleSlot(s, c, mb, "bwd"))
        stages.append(slots)
    return stages


def dataflow_parent(slot: ScheduleSlot, p: int, v: int) -> ScheduleSlot | None:
    """The slot whose completion feeds this one, or None for graph sources."""
    s, c, mb = slot.pp_stage, slot.vpp_stage, slot.micro_batch
    if slot.phase == "fwd":
        if s > 0:
            return ScheduleSlot(s - 1, c, mb, "fwd")
        if c > 0:
            return ScheduleSlot(p - 1, c - 1, mb, "fwd")
        return None
    if s < p - 1:
        return ScheduleSlot(s + 1, c, mb, "bwd")
    if c < v - 1:
        return ScheduleSlot(0, c + 1, mb, "bwd")
    return ScheduleSlot(p - 1, v - 1, mb, "fwd")


def uniform_chunk_costs(p: int, v: int, fwd: float, bwd: float) -> dict:
    return {(s, c): ChunkCost(fwd, bwd) for s in range(p) for c in range(v)}


def _comm_seconds(ev: CommEvent, hw: HardwareDescription) -> float:
    latency, bandwidth = hw.tier(ev.resource)
    if ev.group_size > 1:
        group = CommGroup(ev.group_size, ev.resource == "inter_link", latency, bandwidth)
        return collective_time(ev.kind, ev.bytes, group)
    return latency + ev.bytes / bandwidth


def simulate_timeline(
    schedule,
    chunk_costs,
    comm_events=(),
    policy: OverlapPolicy | None = None,
    hw: HardwareDescription | None = None,
) -> StepReport:
    """Execute the schedule plus comm events and measure the step.

    chunk_costs maps (pp_stage, vpp_stage) to ChunkCost. Comm events run on
    their link resource; with policy.overlap_comm False they additionally
    occupy the device's compute stream (fully exposed), inserted right
    before the slot each one feeds. Backward slots are split into an
    immediate part and a deferrable weight-gradient part when
    policy.decouple_dw is set; downstream work waits only on the immediate
    part. Host dispatch is modeled when hw.host_dispatch_time > 0.
    """
    policy = policy or OverlapPolicy()
    if comm_events and hw is None:
        raise ValueError("hw is required when comm events are present")
    p = len(schedule)
    v = 1 + max((sl.vpp_stage for slots in schedule for sl in slots), default=0)

    host_time = hw.host_dispatch_time if hw is not None else 0.0
    split_fwd = host_time > 0

    tasks = []
    # slot -> (first task id, task id downstream deps wait on, device)
    anchors = {}
    slot_tasks = {}  # slot id -> [task ids on compute]

    for s, slots in enumerate(schedule):
        for sl in slots:
            sid = slot_id(sl)
            cost = chunk_costs[(sl.pp_stage, sl.vpp_stage)]
            ids = []
            if sl.phase == "fwd" and split_fwd:
                parts = [
                    (f"{sid}:pre", PREPROCESS_FRACTION * cost.fwd, "preprocess", True),
                    (f"{sid}:permute", PERMUTE_FRACTION * cost.fwd, "permute", False),
                    (f"{sid}:gmm", GMM_FRACTION * cost.fwd, "gmm", False),
                ]
                if policy.host_gmm_first:
                    # Dispatch the longer device-side op first.
                    head, rest = parts[:1], sorted(
                        parts[1:], key=lambda q: -q[1]
                    )
                    parts = head + rest
                for tid, dur, kind, sync in parts:
                    tasks.append(
                        engine.Task(
                            tid,
                            device=s,
                            resources=("compute",),
                            duration=dur,
                            kind=kind,
                            host_time=host_time,
                            sync_host=sync,
                        )
                    )
                    ids.append(tid)
                dep_anchor = ids[-1]
            elif sl.phase == "bwd" and policy.decouple_dw and cost.bwd > 0:
                dx = f"{sid}:dx"
                dw = f"{sid}:dw"
                tasks.append(
                    engine.Task(
                        dx,
                        device=s,
                        resources=("compute",),
                        duration=(1 - policy.dw_fraction) * cost.bwd,
                        kind="bwd_dx",
                        host_time=host_time,
                    )
                )
                tasks.append(
                    engine.Task(
                        dw,
                        device=s,
                        resources=("compute",),
                        duration=policy.dw_fraction * cost.bwd,
                        kind="bwd_dw",
                        host_time=host_time,
                    )
                )
                ids = [dx, dw]
                dep_anchor = dx
            else:
                dur = cost.fwd if sl.phase == "fwd" else cost.bwd
                tasks.append(
                    engine.Task(
                        sid,
                        device=s,
                        resources=("compute",),
                        duration=dur,
                        kind=sl.phase,
                        host_time=host_time,
                    )
                )
                ids = [sid]
                dep_anchor = sid
            anchors[sid] = (ids[0], dep_anchor, s)
            slot_tasks[sid] = ids

    # Dataflow edges between slots.
    extra_deps = {}  # first task id -> list of dep anchor ids
    for slots in schedule:
        for sl in slots:
            parent = dataflow_parent(sl, p, v)
            if parent is None:
                continue
            pid = slot_id(parent)
            if pid not in anchors:
                continue
            first, _, _ = anchors[slot_id(sl)]
            extra_deps.setdefault(first, []).append(anchors[pid][1])

    # Communication events. Each one is anchored into its device's program
    # order: just before the slot it feeds on that device, just after the
    # same-device slot it consumes from, or at the end of the program.
    # Same-device event dependencies are pulled into the bucket ahead of
    # their dependents, so every serial chain built from this order is a
    # linear extension of the dependency graph whatever order the caller
    # built the event list in. With overlap off the events additionally
    # occupy the compute stream at that anchored position.
    comm_tasks = []
    task_of = {}
    by_event = {}
    fed_slot = {}  # comm id -> same-device slot it feeds
    prod_slot = {}  # comm id -> same-device slot it consumes from
    slot_pos = {}  # (device, slot id) -> position in the device's order
    for s, slots in enumerate(schedule):
        for idx, sl in enumerate(slots):
            slot_pos[(s, slot_id(sl))] = idx
    for ev in comm_events:
        deps = []
        own_slot_dep = None
        for d in ev.dependencies:
            if d in anchors:
                deps.append(anchors[d][1])
                if anchors[d][2] == ev.device:
                    own_slot_dep = d
            else:
                deps.append(d)
        resources = (ev.resource,)
        if not policy.overlap_comm:
            resources = ("compute", ev.resource)
        t = engine.Task(
            ev.id,
            device=ev.device,
            resources=resources,
            duration=_comm_seconds(ev, hw),
            deps=tuple(deps),
            kind="comm",
            host_time=host_time,
        )
        comm_tasks.append(t)
        task_of[ev.id] = t
        by_event[ev.id] = ev
        if ev.feeds is not None:
            if ev.feeds in anchors:
                first, _, dev = anchors[ev.feeds]
                extra_deps.setdefault(first, []).append(ev.id)
                if dev == ev.device:
                    fed_slot[ev.id] = ev.feeds
            else:
                extra_deps.setdefault(ev.feeds, []).append(ev.id)
        if own_slot_dep is not None:
            prod_slot[ev.id] = own_slot_dep

    before_slot = {}  # slot id -> [comm ids spliced before it]
    after_slot = {}  # slot id -> [comm ids spliced after it]
    tail_comm = {}  # device -> [comm ids appended at the end]
    placed = set()

    def emit(ev, bucket):
        if ev.id in placed:
            return
        placed.add(ev.id)
        for d in ev.dependencies:
            dep = by_event.get(d)
            if dep is not None and dep.device == ev.device:
                emit(dep, bucket)
        bucket.append(ev.id)

    def anchor_key(item):
        idx, ev = item
        if ev.id in fed_slot:
            return (slot_pos[(ev.device, fed_slot[ev.id])], 0, idx)
        return (slot_pos[(ev.device, prod_slot[ev.id])], 1, idx)

    anchored = [
        (i, ev)
        for i, ev in enumerate(comm_events)
        if ev.id in fed_slot or ev.id in prod_slot
    ]
    for _, ev in sorted(anchored, key=anchor_key):
        if ev.id in fed_slot:
            emit(ev, before_slot.setdefault(fed_slot[ev.id], []))
        else:
            emit(ev, after_slot.setdefault(prod_slot[ev.id], []))
    for ev in comm_events:
        if ev.id not in placed:
            emit(ev, tail_comm.setdefault(ev.device, []))

    all_tasks = []
    for t in tasks + comm_tasks:
        deps = tuple(t.deps) + tuple(extra_deps.get(t.id, ()))
        all_tasks.append(replace(t, deps=deps) if deps != t.deps else t)

    chains = {}
    for s, slots in enumerate(schedule):
        chain = []
        for sl in slots:
            sid = slot_id(sl)
            if not policy.overlap_comm:
                chain.extend(before_slot.get(sid, ()))
            chain.extend(slot_tasks[sid])
            if not policy.overlap_comm:
                chain.extend(after_slot.get(sid, ()))
        if not policy.overlap_comm:
            chain.extend(tail_comm.get(s, ()))
        chains[(s, "compute")] = chain

    def comm_program(dev: int) -> list:
        if dev >= p:
            return list(tail_comm.get(dev, ()))
        out = []
        for sl in schedule[dev]:
            sid = slot_id(sl)
            out.extend(before_slot.get(sid, ()))
            out.extend(after_slot.get(sid, ()))
        out.extend(tail_comm.get(dev, ()))
        return out

    comm_devices = sorted({t.device for t in comm_tasks})
    for dev in comm_devices:
        ordered = comm_program(dev)
        for tid in ordered:
            link = [r for r in task_of[tid].resources if r != "compute"][0]
            chains.setdefault((dev, link), []).append(tid)
        if not policy.overlap_comm and dev >= p:
            # Events on devices without a schedule stage still need a
            # compute chain to serialize into.
            chains.setdefault((dev, "compute"), []).extend(ordered)

    host_order = None
    if host_time > 0:
        # The host launches every task of its device, comm included, in
        # program order; a comm event is dispatched where it was anchored.
        host_order = {}
        for s, slots in enumerate(schedule):
            order = []
            for sl in slots:
                sid = slot_id(sl)
                order.extend(before_slot.get(sid, ()))
                order.extend(slot_tasks[sid])
                order.extend(after_slot.get(sid, ()))
            order.extend(tail_comm.get(s, ()))
            host_order[s] = order
        for dev in comm_devices:
            if dev >= p:
                host_order[dev] = comm_program(dev)

    result = engine.run_tasks(all_tasks, chains, host_order)

    compute_kinds = {"fwd", "bwd", "bwd_dx", "bwd_dw", "preprocess", "permute", "gmm"}
    busy = []
    for s in range(p):
        total = sum(
            result.tasks[tid].duration
            for tid in result.chains.get((s, "compute"), ())
            if result.tasks[tid].kind in compute_kinds
        )
        busy.append(total)
    makespan = result.makespan
    bubble = 0.0
    if makespan > 0:
        bubble = 1.0 - sum(busy) / (p * makespan)

    total_comm = sum(t.duration for t in comm_tasks)
    overlapped = 0.0
    merged = {}
    for t in comm_tasks:
        if t.device not in merged:
            merged[t.device] = engine.merged_busy_intervals(
                result, t.device, kinds=compute_kinds
            )
        overlapped += engine.overlap_with(
            merged[t.device], result.start[t.id], result.end[t.id]
        )
    exposed = total_comm - overlapped
    rate = 1.0 if total_comm == 0 else overlapped / total_comm

    host_idle = sum(result.host_delay.values())

    return StepReport(
        step_time=makespan,
        bubble_ratio=bubble,
        comm_overlap_rate=rate,
        exposed_comm_time=exposed,
        host_idle_time=host_idle,
        per_stage_busy=tuple(busy),
        timeline=result,
    )


def summarize(
    step_time: float,
    cfg: ModelConfig,
    plan: ParallelPlan,
    hw: HardwareDescription,
) -> tuple:
    """(mfu, tokens_per_second) for one training step of the given length."""
    from .model import flops_per_token

    if step_time <= 0:
        raise ValueError("step_time must be positive")
    if plan.global_batch_size <= 0:
        raise ValueError("plan.global_batch_size must be set")
    tokens = plan.global_batch_size * cfg.seq_len
    tps = tokens / step_time
    fwd = flops_per_token(cfg).forward_per_token
    peak = hw.peak_for_dtype_bytes(cfg.dtype_bytes)
    mfu = tps * fwd * 3.0 / (hw.world_size * peak)
    return mfu, tps
