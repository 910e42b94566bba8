"""Device memory accounting and plan selection.

The tiny model used throughout has hand-countable weights:

    attention      688   (q 192+144, kv 96+32+48+48, out 128)
    layer norms     50   (2h + q_rank + kv_rank)
    dense ffn      384   (3 * 16 * 8)
    expert         384   router 64 (h * 4 experts)
    mtp combine    544   (2h*h + 2h)
    head/embed    1600   each (16 * 100)

so a dense item is 1122, a moe item 2722, the mtp item 3266, and a
single-stage device owns 13032 parameters including the embedding.
"""

import pytest

from moesim.cluster import HardwareDescription
from moesim.errors import InfeasibleMemoryError
from moesim.memory import (
    MemoryPlan,
    activation_peak,
    candidate_plans,
    in_flight_micro_batches,
    memory_report,
    select_memory_plan,
    static_memory,
)
from moesim.model import MlaDims, ModelConfig
from moesim.parallel import ParallelPlan


def tiny_config():
    return ModelConfig(
        num_layers=3,
        hidden_size=16,
        num_attention_heads=2,
        num_routed_experts=4,
        top_k=2,
        expert_intermediate_size=8,
        num_shared_experts=1,
        num_dense_layers=1,
        dense_ffn_intermediate_size=8,
        mla=MlaDims(q_rank=12, kv_rank=6, head_dim=4, rope_dim=2),
        num_mtp_layers=1,
        vocab_size=100,
        seq_len=64,
    )


def single_stage_plan(dp=1, gbs=1):
    return ParallelPlan(tp=1, pp=1, vpp=1, ep=1, dp=dp, micro_batch_size=1, global_batch_size=gbs)


def small_hw(**overrides):
    args = dict(
        name="membox",
        peak_flops={"bf16": 1e12},
        hbm_capacity=16e9,
        hbm_bandwidth=1e12,
        intra_node_bandwidth=100e9,
        intra_node_latency=1e-6,
        inter_node_bandwidth=25e9,
        inter_node_latency=5e-6,
        devices_per_node=8,
        num_nodes=1,
    )
    args.update(overrides)
    return HardwareDescription(**args)


def test_static_memory_optimizer_sharding():
    cfg = tiny_config()
    # dtype grads and weights cost 4 bytes per weight, the fp32 master and
    # both moments cost 12 more, sharded across dp
    assert static_memory(cfg, single_stage_plan(dp=1)) == pytest.approx(16 * 13032)
    assert static_memory(cfg, single_stage_plan(dp=4)) == pytest.approx(7 * 13032)


def test_static_memory_two_stage_split():
    cfg = tiny_config()
    plan = ParallelPlan(tp=1, pp=2, vpp=1, ep=1, dp=1, micro_batch_size=1, global_batch_size=2)
    # best contiguous split is [dense, moe, moe | mtp, head]; stage 0 also
    # holds the input embedding: 1122 + 2722 + 2722 + 1600 = 8166
    assert static_memory(cfg, plan) == pytest.approx(16 * 8166)


def test_static_memory_tensor_parallel_sharding():
    cfg = tiny_config()
    plan = ParallelPlan(tp=2, pp=1, vpp=1, ep=1, dp=1, micro_batch_size=1, global_batch_size=1)
    # sharded: attention+norms 369, dense ffn 192, held experts 2*384,
    # shared 192, mtp combine 272, head 800, embedding 800; router 64 is
    # replicated on every rank
    dense = 369 + 192
    moe = 369 + 64 + 768 + 192
    mtp = moe + 272
    total = dense + 2 * moe + mtp + 800 + 800
    assert static_memory(cfg, plan) == pytest.approx(16 * total)
    assert static_memory(cfg, plan) < static_memory(cfg, single_stage_plan())


def test_activation_peak_keep_everything():
    cfg = tiny_config()
    # per token: boundary 64, attention kv 52 + rest 64, permute 160,
    # expert ffn 96, probs 16; dense layer keeps 212, moe/mtp keep 452
    act = activation_peak(cfg, single_stage_plan(), MemoryPlan())
    assert act == pytest.approx(64 * (212 + 3 * 452))


def test_activation_peak_all_options_hits_boundary_floor():
    cfg = tiny_config()
    plan = single_stage_plan()
    floor = activation_peak(cfg, plan, MemoryPlan(full_layer=True))
    everything = activation_peak(cfg, plan, MemoryPlan.everything())
    assert floor == pytest.approx(64 * 4 * 64)
    assert everything == pytest.approx(floor)


def test_activation_peak_kv_only_sits_between():
    cfg = tiny_config()
    plan = single_stage_plan()
    none = activation_peak(cfg, plan, MemoryPlan())
    kv = activation_peak(cfg, plan, MemoryPlan(recompute=frozenset(("mla_kv_only",))))
    qkv = activation_peak(cfg, plan, MemoryPlan(recompute=frozenset(("mla_qkv",))))
    assert kv == pytest.approx(64 * (160 + 3 * 400))
    assert qkv == pytest.approx(64 * (96 + 3 * 336))
    assert qkv < kv < none


def test_in_flight_micro_batches():
    flat = ParallelPlan(tp=1, pp=4, vpp=1, ep=1, dp=1, micro_batch_size=1)
    assert [in_flight_micro_batches(flat, s) for s in range(4)] == [4, 3, 2, 1]
    inter = ParallelPlan(tp=1, pp=16, vpp=2, ep=1, dp=1, micro_batch_size=1)
    assert in_flight_micro_batches(inter, 0) == 47
    assert in_flight_micro_batches(inter, 15) == 17
    # never more than the chunks that exist
    assert in_flight_micro_batches(inter, 0, m=1) == 2
    assert in_flight_micro_batches(flat, 0, m=2) == 2


def test_report_totals_and_headroom():
    cfg = tiny_config()
    plan = single_stage_plan()
    rep = memory_report(cfg, plan, small_hw(), MemoryPlan(), capacity=400_000.0)
    assert rep.total_bytes == pytest.approx(rep.static_bytes + rep.activation_bytes)
    assert rep.headroom_bytes == pytest.approx(400_000.0 - rep.total_bytes)
    assert rep.static_bytes == pytest.approx(16 * 13032)
    assert rep.feasible


def test_feasibility_boundary_is_inclusive():
    cfg = tiny_config()
    plan = single_stage_plan()
    hw = small_hw()
    exact = memory_report(cfg, plan, hw, MemoryPlan()).total_bytes
    assert memory_report(cfg, plan, hw, MemoryPlan(), capacity=exact).feasible
    assert not memory_report(cfg, plan, hw, MemoryPlan(), capacity=exact - 1).feasible


def test_probs_swap_costs_no_time_at_this_scale():
    cfg = tiny_config()
    plan = single_stage_plan()
    rep = memory_report(cfg, plan, small_hw(), MemoryPlan(swap=frozenset(("probs",))))
    # two transfers of 3 kB hide easily behind the expert matmuls
    assert rep.time_added == 0.0


def test_select_prefers_doing_nothing_when_memory_is_ample():
    cfg = tiny_config()
    rep = select_memory_plan(cfg, single_stage_plan(), small_hw())
    assert rep.plan == MemoryPlan()
    assert rep.time_added == 0.0


def test_select_picks_free_swap_under_mild_pressure():
    cfg = tiny_config()
    plan = single_stage_plan()
    hw = small_hw()
    static = 16 * 13032
    # room for the probs-swap footprint but not the keep-everything one
    cap = static + 64 * (212 + 3 * 436) + 1
    rep = select_memory_plan(cfg, plan, hw, capacity=cap)
    assert rep.plan == MemoryPlan(swap=frozenset(("probs",)))
    assert rep.time_added == 0.0


def test_select_matches_brute_force_ranking():
    cfg = tiny_config()
    plan = single_stage_plan()
    hw = small_hw()
    static = 16 * 13032
    for cap in [static + 17_000, static + 70_000, static + 90_000, static + 101_000]:
        want = None
        for mp in candidate_plans():
            rep = memory_report(cfg, plan, hw, mp, capacity=cap)
            if not rep.feasible:
                continue
            names = sorted(rep.plan.recompute | rep.plan.swap)
            key = (
                rep.time_added,
                len(names),
                1 if "mla_qkv" in rep.plan.recompute else 0,
                names,
            )
            if want is None or key < want[0]:
                want = (key, rep.plan)
        got = select_memory_plan(cfg, plan, hw, capacity=cap)
        assert got.plan == want[1]


def test_select_raises_when_nothing_fits():
    cfg = tiny_config()
    with pytest.raises(InfeasibleMemoryError):
        select_memory_plan(cfg, single_stage_plan(), small_hw(), capacity=float(16 * 13032))


def test_candidate_plans_cover_the_lattice_once():
    plans = candidate_plans()
    assert len(plans) == 24
    assert len(set(plans)) == 24
    assert MemoryPlan() in plans
    assert all(not p.full_layer for p in plans)


def test_plan_option_validation():
    with pytest.raises(ValueError):
        MemoryPlan(recompute=frozenset(("gelu",)))
    with pytest.raises(ValueError):
        MemoryPlan(swap=frozenset(("weights",)))
    with pytest.raises(ValueError):
        MemoryPlan(recompute=frozenset(("mla_qkv", "mla_kv_only")))
    everything = MemoryPlan.everything()
    assert "mla_qkv" in everything.recompute
    assert "probs" in everything.swap
