"""Command line front end.

Subcommands map onto the library's main entry points:

* ``validate``    check a parallel plan against a model and cluster
* ``simulate``    one training step or a decode roofline for one model
* ``search``      rank a design space, writing a JSON and a CSV report
* ``balance``     run the expert placement benchmark on a synthetic trace
* ``trace-stats`` balance metrics for a saved routing trace

Exit codes: 0 success, 1 invalid content (bad config, infeasible plan),
2 missing or unreadable files. All file output is deterministic: reruns
with the same inputs produce byte-identical bytes.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from .balance import RoutingTrace, aux_loss, generate_trace, run_balance_simulation, trace_statistics
from .configio import load_cluster, load_model, load_plan, load_space, load_trace_spec
from .errors import MoesimError
from .model import model_id
from .parallel import validate_plan
from .search import SimulationFeatures, inference_report, search_space, training_report

CSV_HEADER = "# moesim-csv v1"


@dataclasses.dataclass
class RunManifest:
    command: str
    model: str | None = None
    cluster: str | None = None
    plan: str | None = None
    space: str | None = None
    trace: str | None = None
    spec: str | None = None
    out: str | None = None
    mode: str = "training"
    batch: int | None = None
    top: int | None = None
    workers: int = 1
    seed: int = 0
    devices: int = 8
    interval: int = 1
    window: int = 1
    save_trace: str | None = None
    dispatch: str = "hierarchical"
    no_overlap: bool = False


def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (frozenset, set)):
        return sorted(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(x) for x in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(x) for x in obj]
    return obj


def _write_json(path: str, payload) -> None:
    text = json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n"
    with open(path, "w") as fh:
        fh.write(text)


def _features(manifest: RunManifest) -> SimulationFeatures:
    if manifest.no_overlap:
        return SimulationFeatures(
            comm_overlap=False,
            decouple_dw=False,
            host_gmm_first=False,
            dispatch_mechanism=manifest.dispatch,
        )
    return SimulationFeatures(dispatch_mechanism=manifest.dispatch)


def _cmd_validate(manifest: RunManifest) -> int:
    cfg = load_model(manifest.model)
    hw = load_cluster(manifest.cluster)
    plan = load_plan(manifest.plan)
    check = validate_plan(plan, cfg, hw)
    if not check.ok:
        for err in check.errors:
            print(f"invalid: {err}")
        return 1
    r = check.plan
    print(
        f"plan ok: tp={r.tp} pp={r.pp} vpp={r.vpp} ep={r.ep} cp={r.cp} "
        f"dp={r.dp} micro_batch_size={r.micro_batch_size} "
        f"world={hw.world_size}"
    )
    if manifest.out:
        _write_json(manifest.out, {"ok": True, "plan": r})
    return 0


def _cmd_simulate(manifest: RunManifest) -> int:
    cfg = load_model(manifest.model)
    hw = load_cluster(manifest.cluster)
    features = _features(manifest)
    if manifest.mode == "inference":
        report = inference_report(cfg, hw, batch=manifest.batch, features=features)
        print(f"model {report.model}")
        print(f"decode step {report.step_time:.6f} s")
        print(f"tokens/s {report.tps:.6e}")
        print(f"mfu {report.mfu:.4f}")
    else:
        plan = load_plan(manifest.plan)
        report = training_report(cfg, plan, hw, features)
        print(f"model {report.model}")
        print(f"step {report.step_time:.6f} s")
        print(f"tokens/s {report.tps:.6e}")
        print(f"mfu {report.mfu:.4f}")
        print(f"bubble {report.bubble_ratio:.4f}")
        print(f"comm overlap {report.comm_overlap_rate:.4f}")
        mem = report.memory
        print(
            f"memory {mem.total_bytes / 1e9:.2f} GB of {mem.capacity_bytes / 1e9:.2f} GB, "
            f"plan [{', '.join(sorted(mem.plan.recompute | mem.plan.swap)) or 'none'}]"
        )
    if manifest.out:
        _write_json(manifest.out, report)
    return 0


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _cmd_search(manifest: RunManifest) -> int:
    space = load_space(manifest.space)
    hw = load_cluster(manifest.cluster)
    plan = load_plan(manifest.plan)
    outcome = search_space(
        space,
        plan,
        hw,
        features=_features(manifest),
        mode=manifest.mode if manifest.mode in ("both", "training", "inference") else "both",
        top=manifest.top,
        workers=manifest.workers,
    )
    for i, cand in enumerate(outcome.ranked, start=1):
        t = f"train {cand.training.tps:.3e} tok/s" if cand.training else ""
        d = f"decode {cand.inference.tps:.3e} tok/s" if cand.inference else ""
        parts = " ".join(x for x in (t, d) if x)
        print(f"{i:3d}. {cand.model} score {cand.score:.4f} {parts}")
    for name, reason in outcome.skipped:
        print(f"skipped {name}: {reason}")
    if manifest.out:
        _write_json(manifest.out, outcome)
        csv_path = manifest.out[: -len(".json")] + ".csv" if manifest.out.endswith(".json") else manifest.out + ".csv"
        rows = [
            CSV_HEADER,
            "rank,model,score,train_tps,train_mfu,train_step_time,inference_tps,inference_mfu",
        ]
        for i, cand in enumerate(outcome.ranked, start=1):
            t = cand.training
            d = cand.inference
            rows.append(
                ",".join(
                    [
                        str(i),
                        cand.model,
                        _csv_cell(cand.score),
                        _csv_cell(t.tps) if t else "",
                        _csv_cell(t.mfu) if t else "",
                        _csv_cell(t.step_time) if t else "",
                        _csv_cell(d.tps) if d else "",
                        _csv_cell(d.mfu) if d else "",
                    ]
                )
            )
        with open(csv_path, "w") as fh:
            fh.write("\n".join(rows) + "\n")
    if not outcome.ranked:
        print("no feasible candidate")
        return 1
    return 0


def _cmd_balance(manifest: RunManifest) -> int:
    spec = load_trace_spec(manifest.spec)
    result = run_balance_simulation(
        spec,
        manifest.devices,
        replan_interval=manifest.interval,
        history_window=manifest.window,
        seed=manifest.seed,
    )
    print(f"static mean cv  {result.static_cv.mean():.4f}")
    print(f"managed mean cv {result.managed_cv.mean():.4f}")
    print(f"cv reduction    {result.mean_cv_reduction:.4f}")
    print(f"replans         {len(result.replan_steps)}")
    if manifest.save_trace:
        generate_trace(spec, manifest.seed).save(manifest.save_trace)
    if manifest.out:
        _write_json(
            manifest.out,
            {
                "static_mean_cv": float(result.static_cv.mean()),
                "managed_mean_cv": float(result.managed_cv.mean()),
                "mean_cv_reduction": result.mean_cv_reduction,
                "replan_steps": list(result.replan_steps),
                "static_cv": result.static_cv,
                "managed_cv": result.managed_cv,
            },
        )
    return 0


def _cmd_trace_stats(manifest: RunManifest) -> int:
    trace = RoutingTrace.load(manifest.trace)
    loss = aux_loss(trace)
    stats = trace_statistics(trace)
    counts = trace.expert_counts().sum(axis=0)
    print(f"steps {trace.steps} tokens/step {trace.tokens_per_step} top_k {trace.top_k}")
    print(f"experts {trace.num_experts}")
    print(f"aux loss {loss.mean_loss:.6f}")
    print(f"hottest expert share {counts.max() / counts.sum():.4f} (uniform {stats.uniform_share:.4f})")
    if manifest.out:
        _write_json(
            manifest.out,
            {
                "aux_loss": loss.mean_loss,
                "expert_token_counts": counts,
                "task_expert_share": stats.task_expert_share,
                "uniform_share": stats.uniform_share,
            },
        )
    return 0


_COMMANDS = {
    "validate": _cmd_validate,
    "simulate": _cmd_simulate,
    "search": _cmd_search,
    "balance": _cmd_balance,
    "trace-stats": _cmd_trace_stats,
}


def run(manifest: RunManifest) -> int:
    try:
        return _COMMANDS[manifest.command](manifest)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MoesimError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moesim", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, *names):
        if "model" in names:
            p.add_argument("--model", required=True, help="model config JSON")
        if "cluster" in names:
            p.add_argument("--cluster", required=True, help="cluster description JSON")
        if "plan" in names:
            p.add_argument("--plan", required=True, help="parallel plan JSON")
        p.add_argument("--out", help="write a JSON report here")

    p = sub.add_parser("validate", help="check a plan against a model and cluster")
    add_common(p, "model", "cluster", "plan")

    p = sub.add_parser("simulate", help="simulate one training step or decode throughput")
    add_common(p, "model", "cluster")
    p.add_argument("--plan", help="parallel plan JSON (training mode)")
    p.add_argument("--mode", choices=("training", "inference"), default="training")
    p.add_argument("--batch", type=int, help="decode batch size (inference mode)")
    p.add_argument("--dispatch", choices=("hierarchical", "alltoall", "allgather"), default="hierarchical")
    p.add_argument("--no-overlap", action="store_true", help="serialize comm with compute")

    p = sub.add_parser("search", help="rank every model in a design space")
    add_common(p, "cluster", "plan")
    p.add_argument("--space", required=True, help="design space JSON")
    p.add_argument("--mode", choices=("both", "training", "inference"), default="both")
    p.add_argument("--top", type=int, help="keep only the best N candidates")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--dispatch", choices=("hierarchical", "alltoall", "allgather"), default="hierarchical")
    p.add_argument("--no-overlap", action="store_true")

    p = sub.add_parser("balance", help="expert placement benchmark on a synthetic trace")
    p.add_argument("--spec", required=True, help="trace spec JSON")
    p.add_argument("--devices", type=int, default=8)
    p.add_argument("--interval", type=int, default=1, help="replan every N steps")
    p.add_argument("--window", type=int, default=1, help="load history window")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save-trace", dest="save_trace", help="also save the generated trace CSV")
    p.add_argument("--out", help="write a JSON report here")

    p = sub.add_parser("trace-stats", help="balance metrics for a saved trace")
    p.add_argument("--trace", required=True, help="routing trace CSV")
    p.add_argument("--out", help="write a JSON report here")

    return parser


def manifest_from_args(args: argparse.Namespace) -> RunManifest:
    fields = {f.name for f in dataclasses.fields(RunManifest)}
    data = {k: v for k, v in vars(args).items() if k in fields and v is not None}
    return RunManifest(**data)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "simulate" and args.mode == "training" and not args.plan:
        build_parser().error("simulate --mode training requires --plan")
    return run(manifest_from_args(args))


if __name__ == "__main__":
    sys.exit(main())
