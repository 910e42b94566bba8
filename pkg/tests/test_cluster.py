"""Collective cost model and device roofline."""

import pytest

from moesim.cluster import CommGroup, HardwareDescription, collective_time, kernel_time


def make_hw(**overrides):
    base = dict(
        name="test",
        peak_flops={"bf16": 100e12, "fp8": 200e12, "fp32": 50e12},
        hbm_capacity=64e9,
        hbm_bandwidth=1e12,
        intra_node_bandwidth=100e9,
        intra_node_latency=1e-6,
        inter_node_bandwidth=20e9,
        inter_node_latency=5e-6,
        devices_per_node=8,
        num_nodes=4,
    )
    base.update(overrides)
    return HardwareDescription(**base)


def test_allgather_alpha_beta_hand_value():
    group = CommGroup(size=4, spans_nodes=False, latency=1e-6, bandwidth=100e9)
    vol = 4e9
    # 3 latency hops plus 3/4 of the payload over the wire
    expected = 3 * 1e-6 + (3 / 4) * vol / 100e9
    assert collective_time("allgather", vol, group) == pytest.approx(expected)
    assert collective_time("reducescatter", vol, group) == pytest.approx(expected)


def test_allreduce_is_twice_allgather():
    group = CommGroup(size=8, spans_nodes=True, latency=5e-6, bandwidth=20e9)
    vol = 1e9
    ag = collective_time("allgather", vol, group)
    assert collective_time("allreduce", vol, group) == pytest.approx(2 * ag)


def test_alltoall_single_latency_term():
    group = CommGroup(size=4, spans_nodes=False, latency=1e-6, bandwidth=100e9)
    vol = 4e9
    expected = 1e-6 + (3 / 4) * vol / 100e9
    assert collective_time("alltoall", vol, group) == pytest.approx(expected)


def test_p2p_full_payload():
    group = CommGroup(size=2, spans_nodes=True, latency=5e-6, bandwidth=20e9)
    assert collective_time("p2p", 1e9, group) == pytest.approx(5e-6 + 1e9 / 20e9)


def test_single_member_group_costs_nothing():
    group = CommGroup(size=1, spans_nodes=False, latency=1e-6, bandwidth=100e9)
    for kind in ("allgather", "reducescatter", "allreduce", "alltoall"):
        assert collective_time(kind, 1e9, group) == 0.0


def test_unknown_collective_rejected():
    group = CommGroup(size=2, spans_nodes=False, latency=1e-6, bandwidth=100e9)
    with pytest.raises(ValueError):
        collective_time("broadcast-tree", 1e9, group)


def test_kernel_time_is_max_of_bounds():
    hw = make_hw()
    # compute bound: 1e12 flops at 100 TFLOP/s = 10 ms, traffic tiny
    assert kernel_time(1e12, 1e6, hw) == pytest.approx(1e12 / 100e12)
    # bandwidth bound: 1e10 bytes at 1 TB/s = 10 ms, flops tiny
    assert kernel_time(1e6, 1e10, hw) == pytest.approx(1e10 / 1e12)


def test_kernel_time_efficiency_and_dtype():
    hw = make_hw(matmul_efficiency=0.5)
    assert kernel_time(1e12, 0, hw) == pytest.approx(1e12 / (100e12 * 0.5))
    # fp8 doubles the peak
    assert kernel_time(1e12, 0, hw, dtype_bytes=1) == pytest.approx(1e12 / (200e12 * 0.5))
    # explicit efficiency overrides the sheet
    assert kernel_time(1e12, 0, hw, efficiency=1.0) == pytest.approx(1e12 / 100e12)


def test_world_size_and_tier_lookup():
    hw = make_hw()
    assert hw.world_size == 32
    lat, bw = hw.tier("intra_link")
    assert (lat, bw) == (1e-6, 100e9)
    lat, bw = hw.tier("inter_link")
    assert (lat, bw) == (5e-6, 20e9)


def test_comm_group_constructor_by_span():
    hw = make_hw()
    local = hw.comm_group(4, spans_nodes=False)
    remote = hw.comm_group(4, spans_nodes=True)
    assert local.bandwidth == 100e9 and remote.bandwidth == 20e9
    assert local.latency == 1e-6 and remote.latency == 5e-6


def test_peak_for_dtype_bytes():
    hw = make_hw()
    assert hw.peak_for_dtype_bytes(2) == 100e12
    assert hw.peak_for_dtype_bytes(1) == 200e12
    assert hw.peak_for_dtype_bytes(4) == 50e12


def test_invalid_hardware_rejected():
    with pytest.raises(ValueError):
        make_hw(devices_per_node=0)
    with pytest.raises(ValueError):
        make_hw(peak_flops={})
