"""Command-line front end: validate-profile, plan, simulate, compare, inject-fault.

Exit codes: 0 on success, 1 on validation or infeasibility problems, 2 on
internal invariant violations (an estimate exceeding its simulation).
Diagnostics go to stderr; results go to ``--out`` or stdout. Machine-format
output is canonical JSON and byte-identical for identical inputs and seed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import fault_tolerance, planner, profiles, simulator
from .cost_model import comm_volume_hdp, comm_volume_hpp, flops_proportional_cuts
from .errors import EstimateExceedsSimulation, PipePlanError
from .jsonio import canonical_dumps
from .planfile import load_plan, plan_to_document, save_plan
from .profiles import capacity, load_profile

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_INTERNAL = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage errors; those are input problems here
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="pipeplan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, profile=False, plan=False):
        if profile:
            p.add_argument("--profile", required=True, help="workload profile path")
        if plan:
            p.add_argument("--plan", required=True, help="plan file path")
        p.add_argument("--format", choices=["human", "machine"], default="human")
        p.add_argument("--out", help="write the report here instead of stdout")
        p.add_argument("--seed", type=int, default=0,
                       help="recorded in machine reports for sweep bookkeeping")

    p = sub.add_parser("validate-profile", help="load a profile and report all violations")
    common(p, profile=True)

    p = sub.add_parser("plan", help="compute the optimal hybrid pipeline plan")
    common(p, profile=True)
    p.add_argument("-M", type=int, required=True, help="micro-batches per round")
    p.add_argument("-B", type=int, required=True, help="micro-batch size")
    p.add_argument("--k-policy", choices=sorted(planner.K_POLICIES), default="paper")
    p.add_argument("--block-size", type=int, default=1)

    p = sub.add_parser("simulate", help="simulate one round of a planned pipeline")
    common(p, plan=True)
    p.add_argument("-M", type=int, default=None,
                   help="must match the plan file when given")

    p = sub.add_parser("compare", help="communication-volume and latency comparison")
    common(p, profile=True, plan=True)

    p = sub.add_parser("inject-fault", help="fail one device and build the replay plan")
    common(p, profile=True, plan=True)
    p.add_argument("--device", required=True, help="device id to fail")
    p.add_argument("--fail-at-ms", type=float, default=0.0,
                   help="logical time of the last heartbeat before the fault")
    return parser


def _emit(doc: dict, human: str, args) -> None:
    text = canonical_dumps(doc) if args.format == "machine" else human
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _cmd_validate_profile(args) -> int:
    from .jsonio import read_document

    doc = read_document(args.profile)
    violations = [str(v) for v in profiles.iter_violations(doc)]
    report = {"command": "validate-profile", "profile": str(args.profile),
              "seed": args.seed, "valid": not violations, "violations": violations}
    lines = [f"profile: {args.profile}"]
    if violations:
        lines += [f"INVALID ({len(violations)} violation(s))"] + [
            f"  - {v}" for v in violations]
    else:
        lines.append("OK")
    _emit(report, "\n".join(lines) + "\n", args)
    return EXIT_OK if not violations else EXIT_INVALID


def _plan_summary(plan) -> str:
    lines = [
        f"model: {plan.model_name}",
        f"stages: {plan.num_stages}  M={plan.micro_batch_count} "
        f"B={plan.micro_batch_size}  k-policy={plan.k_policy}",
        f"estimated round latency: {plan.estimated_round_latency_ms:.3f} ms "
        f"(dominant step {plan.dominant_step})",
    ]
    for s in plan.stages:
        alloc = ", ".join(f"{d}:{n}" for d, n in sorted(s.allocation.items()))
        lines.append(
            f"  stage {s.stage_index}: layers {s.layer_start}..{s.layer_end} "
            f"on [{alloc}]  K={s.k_inflight}")
    return "\n".join(lines) + "\n"


def _cmd_plan(args) -> int:
    profile = load_profile(args.profile)
    plan = planner.plan(profile, args.M, args.B, k_policy=args.k_policy,
                        block_size=args.block_size)
    doc = plan_to_document(plan)
    doc["seed"] = args.seed
    _emit(doc, _plan_summary(plan), args)
    return EXIT_OK


def _events_lines(result) -> str:
    lines = []
    for e in result.events:
        mb = "-" if e.micro_batch is None else e.micro_batch
        lines.append(f"{e.step}\t{mb}\t{e.kind}\t{e.start_ms!r}\t{e.end_ms!r}")
    return "\n".join(lines) + "\n"


def _cmd_simulate(args) -> int:
    plan = load_plan(args.plan)
    if args.M is not None and args.M != plan.micro_batch_count:
        raise _UsageError(
            f"-M {args.M} conflicts with the plan file's M={plan.micro_batch_count}")
    result = simulator.simulate_round(plan)
    report = simulator.validate_estimate(plan, result)
    doc = {
        "command": "simulate",
        "seed": args.seed,
        "comm_model": report.comm_model,
        "round_latency_ms": result.round_latency_ms,
        "estimate_ms": report.estimate_ms,
        "relative_gap": report.relative_gap,
        "dominant_step": report.dominant_step,
        "bubble_ms_per_step": list(result.bubble_ms),
        "peak_resident_microbatches": list(result.peak_resident_microbatches),
        "micro_batch_count": result.micro_batch_count,
    }
    human = (
        f"comm model: {report.comm_model}\n"
        f"simulated round latency: {result.round_latency_ms:.3f} ms\n"
        f"planner estimate: {report.estimate_ms:.3f} ms "
        f"(gap {100 * report.relative_gap:.2f}%)\n"
        f"bubbles per step: "
        + " ".join(f"{b:.3f}" for b in result.bubble_ms) + "\n"
        f"peak resident micro-batches: "
        + " ".join(str(p) for p in result.peak_resident_microbatches) + "\n"
    )
    _emit(doc, human, args)
    if args.out:
        events_path = Path(args.out).with_suffix(".events.txt")
        events_path.write_text(_events_lines(result), encoding="utf-8")
    return EXIT_OK


def _cmd_compare(args) -> int:
    profile = load_profile(args.profile)
    plan = load_plan(args.plan)
    M, B = plan.micro_batch_count, plan.micro_batch_size

    hpp_volume = comm_volume_hpp(profile, plan.stages, M, B)

    # HDP counterpart: same device partition, each group pipelining the full
    # model internally, mini-batch shares proportional to group capacity
    groups = [list(s.devices) for s in plan.stages]
    full = (0, profile.num_layers - 1)
    caps = [sum(capacity(profile, d, full, B) for d in g) for g in groups]
    total_cap = sum(caps)
    betas = [int(M * B * c / total_cap) for c in caps]
    for idx in sorted(range(len(betas)), key=lambda i: -caps[i]):
        if sum(betas) >= M * B:
            break
        betas[idx] += M * B - sum(betas)
    cut_shares = [[capacity(profile, d, full, B) for d in g] for g in groups]
    cuts = [flops_proportional_cuts(profile.layer_flops(), shares)
            for shares in cut_shares]
    hdp_volume = comm_volume_hdp(profile, groups, betas, cuts)

    pp = planner.pure_pipeline_plan(profile, M, B, k_policy=plan.k_policy)
    dp = planner.pure_data_parallel_plan(profile, M, B)
    pp_volume = comm_volume_hpp(profile, pp.stages, M, B)
    dp_volume = comm_volume_hpp(profile, dp.stages, M, B)

    doc = {
        "command": "compare",
        "seed": args.seed,
        "volumes_bytes": {
            "hpp": hpp_volume,
            "hdp": hdp_volume,
            "pure_pp": pp_volume,
            "pure_dp": dp_volume,
        },
        "estimated_latency_ms": {
            "hpp": plan.estimated_round_latency_ms,
            "pure_pp": pp.estimated_round_latency_ms,
            "pure_dp": dp.estimated_round_latency_ms,
        },
    }
    human = (
        "communication volume per round (bytes):\n"
        f"  HPP (this plan): {hpp_volume}\n"
        f"  HDP (same groups, parameter server): {hdp_volume}\n"
        f"  pure PP: {pp_volume}\n"
        f"  pure DP: {dp_volume}\n"
        "estimated round latency (ms):\n"
        f"  HPP (this plan): {plan.estimated_round_latency_ms:.3f}\n"
        f"  pure PP: {pp.estimated_round_latency_ms:.3f}\n"
        f"  pure DP: {dp.estimated_round_latency_ms:.3f}\n"
    )
    _emit(doc, human, args)
    return EXIT_OK


def _detection_timeline(device: str, fail_at_ms: float, cfg) -> dict:
    """Drive the liveness machine tick by tick until the failure is declared."""
    state = fault_tolerance.initial_liveness([device], cfg, start_ms=fail_at_ms)
    now = fail_at_ms
    transitions = []
    detected_at = None
    while detected_at is None:
        now += cfg.heartbeat_interval_ms
        state, failures = fault_tolerance.liveness_step(state, now)
        status = state.devices[device].status
        transitions.append({"now_ms": now, "status": status})
        if failures:
            detected_at = now
    return {"last_heartbeat_ms": fail_at_ms, "detected_at_ms": detected_at,
            "transitions": transitions}


def _cmd_inject_fault(args) -> int:
    profile = load_profile(args.profile)
    plan = load_plan(args.plan)
    planned_devices = {d for s in plan.stages for d in s.devices}
    if args.device not in planned_devices:
        raise _UsageError(
            f"device {args.device!r} is not part of the plan "
            f"(planned: {', '.join(sorted(planned_devices))})")
    cfg = fault_tolerance.LivenessConfig()
    detection = _detection_timeline(args.device, args.fail_at_ms, cfg)
    replay = fault_tolerance.replay_for_failures(profile, plan, [args.device])
    new_plan_doc = plan_to_document(replay.new_plan)
    doc = {
        "command": "inject-fault",
        "seed": args.seed,
        "failed_device": replay.failed_device,
        "failed_stage": replay.failed_stage_index,
        "detection": detection,
        "old_partition": [list(r) for r in replay.old_partition],
        "new_partition": [list(r) for r in replay.new_partition],
        "migrations": [
            {"layer": op.layer_id, "from_stage": op.from_stage,
             "to_stage": op.to_stage, "bytes": op.nbytes}
            for op in replay.migrations
        ],
        "migration_bytes": replay.migration_bytes,
        "restores": [
            {"layer": op.layer_id, "source_device": op.source_device,
             "to_stage": op.to_stage, "bytes": op.nbytes}
            for op in replay.restores
        ],
        "restore_bytes": replay.restore_bytes,
        "latency_before_ms": plan.estimated_round_latency_ms,
        "latency_after_ms": replay.new_plan.estimated_round_latency_ms,
        "new_plan": new_plan_doc,
    }
    human_lines = [
        f"failed device: {replay.failed_device} (stage {replay.failed_stage_index})",
        f"detected at t={detection['detected_at_ms']:.0f} ms "
        f"(last heartbeat t={detection['last_heartbeat_ms']:.0f} ms)",
        f"new partition: {[list(r) for r in replay.new_partition]}",
        f"migrations: {len(replay.migrations)} op(s), {replay.migration_bytes} bytes",
        f"restores: {len(replay.restores)} layer(s), {replay.restore_bytes} bytes "
        f"from backup",
        f"estimated latency: {plan.estimated_round_latency_ms:.3f} ms -> "
        f"{replay.new_plan.estimated_round_latency_ms:.3f} ms",
    ]
    _emit(doc, "\n".join(human_lines) + "\n", args)
    if args.out:
        save_plan(replay.new_plan, Path(args.out).with_suffix(".newplan.json"))
    return EXIT_OK


_COMMANDS = {
    "validate-profile": _cmd_validate_profile,
    "plan": _cmd_plan,
    "simulate": _cmd_simulate,
    "compare": _cmd_compare,
    "inject-fault": _cmd_inject_fault,
}


def run(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except EstimateExceedsSimulation as err:
        print(f"internal error: {err}", file=sys.stderr)
        return EXIT_INTERNAL
    except (PipePlanError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
