"""Abstract cluster description and first-order cost primitives.

Collective costs follow the latency/bandwidth model. ``volume`` is always
the full logical payload in bytes (the gathered buffer for allgather, the
per-rank send buffer for alltoall); the wire only carries the (g-1)/g
fraction that is not already local, which the formulas account for.
"""

from __future__ import annotations

from dataclasses import dataclass, field


_DTYPE_NAMES = {1: "fp8", 2: "bf16", 4: "fp32"}

COLLECTIVE_KINDS = ("allgather", "reducescatter", "allreduce", "alltoall", "p2p")


@dataclass(frozen=True)
class CommGroup:
    size: int
    spans_nodes: bool
    latency: float
    bandwidth: float

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("group size must be >= 1")
        if self.latency < 0 or self.bandwidth <= 0:
            raise ValueError("latency must be >= 0 and bandwidth > 0")


@dataclass(frozen=True)
class HardwareDescription:
    name: str
    peak_flops: dict  # dtype name -> FLOP/s per device
    hbm_capacity: float  # bytes per device
    hbm_bandwidth: float  # bytes/s per device
    intra_node_bandwidth: float  # bytes/s per device
    intra_node_latency: float  # seconds
    inter_node_bandwidth: float  # bytes/s per device
    inter_node_latency: float  # seconds
    devices_per_node: int
    num_nodes: int
    matmul_efficiency: float = 1.0
    host_dispatch_time: float = 0.0  # host-side seconds to launch one op
    host_to_device_bandwidth: float = field(default=64e9)

    def __post_init__(self):
        if self.devices_per_node < 1 or self.num_nodes < 1:
            raise ValueError("devices_per_node and num_nodes must be >= 1")
        if not self.peak_flops:
            raise ValueError("peak_flops must list at least one dtype")
        for rate in self.peak_flops.values():
            if rate <= 0:
                raise ValueError("peak FLOP rates must be positive")
        for name in (
            "hbm_capacity",
            "hbm_bandwidth",
            "intra_node_bandwidth",
            "inter_node_bandwidth",
            "host_to_device_bandwidth",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.matmul_efficiency <= 1:
            raise ValueError("matmul_efficiency must be in (0, 1]")
        if self.host_dispatch_time < 0:
            raise ValueError("host_dispatch_time must be >= 0")

    @property
    def world_size(self) -> int:
        return self.devices_per_node * self.num_nodes

    def peak_for_dtype_bytes(self, dtype_bytes: int) -> float:
        name = _DTYPE_NAMES.get(dtype_bytes)
        if name in self.peak_flops:
            return self.peak_flops[name]
        if dtype_bytes == 2 and "fp16" in self.peak_flops:
            return self.peak_flops["fp16"]
        raise KeyError(f"no peak FLOP rate listed for {dtype_bytes}-byte dtype")

    def comm_group(self, size: int, spans_nodes: bool) -> CommGroup:
        if spans_nodes:
            return CommGroup(size, True, self.inter_node_latency, self.inter_node_bandwidth)
        return CommGroup(size, False, self.intra_node_latency, self.intra_node_bandwidth)

    def tier(self, resource: str) -> tuple[float, float]:
        """(latency, bandwidth) of a link tier named by its resource."""
        if resource == "inter_link":
            return self.inter_node_latency, self.inter_node_bandwidth
        if resource == "intra_link":
            return self.intra_node_latency, self.intra_node_bandwidth
        raise ValueError(f"unknown link resource {resource!r}")


def collective_time(kind: str, volume_bytes: float, group: CommGroup) -> float:
    """Seconds for one collective of the given logical payload.

    A group of size 1 costs nothing regardless of kind or volume.
    """
    if volume_bytes < 0:
        raise ValueError("volume must be non-negative")
    if kind not in COLLECTIVE_KINDS:
        raise ValueError(f"unknown collective kind {kind!r}")
    g = group.size
    if g <= 1:
        return 0.0
    ring = (g - 1) * group.latency + ((g - 1) / g) * volume_bytes / group.bandwidth
    if kind in ("allgather", "reducescatter"):
        return ring
    if kind == "allreduce":
        return 2.0 * ring
    if kind == "alltoall":
        return group.latency + ((g - 1) / g) * volume_bytes / group.bandwidth
    # p2p: pairwise transfer of the whole payload
    return group.latency + volume_bytes / group.bandwidth


def kernel_time(
    flops: float,
    bytes_moved: float,
    hw: HardwareDescription,
    efficiency: float | None = None,
    dtype_bytes: int = 2,
) -> float:
    """Roofline estimate: slower of the compute and HBM traffic terms."""
    if flops < 0 or bytes_moved < 0:
        raise ValueError("flops and bytes_moved must be non-negative")
    eff = hw.matmul_efficiency if efficiency is None else efficiency
    if not 0 < eff <= 1:
        raise ValueError("efficiency must be in (0, 1]")
    peak = hw.peak_for_dtype_bytes(dtype_bytes)
    return max(flops / (peak * eff), bytes_moved / hw.hbm_bandwidth)
