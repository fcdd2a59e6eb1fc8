"""Versioned JSON documents for plans, self-contained enough to simulate.

A plan document stores the stage list (layer ranges, device groups,
micro-batch allocations, in-flight bounds) plus the derived step timeline,
so ``simulate`` can run without the original profile. The same canonical
writer as profiles keeps outputs byte-stable.
"""

from __future__ import annotations

from .cost_model import Step, StepTimeline
from .errors import ParseError
from .jsonio import read_document, write_document
from .planner import PlanConfig

PLAN_FORMAT_VERSION = 1


def plan_to_document(plan: PlanConfig) -> dict:
    return {
        "format_version": PLAN_FORMAT_VERSION,
        "model_name": plan.model_name,
        "micro_batch_count": plan.micro_batch_count,
        "micro_batch_size": plan.micro_batch_size,
        "k_policy": plan.k_policy,
        "block_size": plan.block_size,
        "optimizer": plan.optimizer,
        "estimated_round_latency_ms": plan.estimated_round_latency_ms,
        "dominant_step": plan.dominant_step,
        "stages": [
            {
                "stage_index": s.stage_index,
                "layer_start": s.layer_start,
                "layer_end": s.layer_end,
                "devices": list(s.devices),
                "allocation": dict(sorted(s.allocation.items())),
                "k_inflight": s.k_inflight,
            }
            for s in plan.stages
        ],
        "timeline": [
            {
                "kind": step.kind,
                "stage_index": step.stage_index,
                "fp_ms": step.fp_ms,
                "bp_ms": step.bp_ms,
                "allreduce_ms": step.allreduce_ms,
            }
            for step in plan.timeline.steps
        ],
    }


def plan_from_document(doc: dict) -> PlanConfig:
    from .cost_model import StageSpec

    version = doc.get("format_version")
    if version != PLAN_FORMAT_VERSION:
        raise ParseError(f"unsupported plan format_version {version!r}")
    try:
        stages = [
            StageSpec(
                layer_start=s["layer_start"],
                layer_end=s["layer_end"],
                devices=tuple(s["devices"]),
                allocation={str(k): int(v) for k, v in s["allocation"].items()},
                stage_index=s["stage_index"],
                k_inflight=s["k_inflight"],
            )
            for s in doc["stages"]
        ]
        steps = [
            Step(kind=t["kind"], stage_index=t["stage_index"],
                 fp_ms=float(t["fp_ms"]), bp_ms=float(t["bp_ms"]),
                 allreduce_ms=float(t["allreduce_ms"]))
            for t in doc["timeline"]
        ]
        timeline = StepTimeline(
            steps=steps,
            dominant_index=doc["dominant_step"],
            micro_batch_count=doc["micro_batch_count"],
            micro_batch_size=doc["micro_batch_size"],
        )
        return PlanConfig(
            model_name=doc["model_name"],
            stages=stages,
            micro_batch_count=doc["micro_batch_count"],
            micro_batch_size=doc["micro_batch_size"],
            k_policy=doc["k_policy"],
            block_size=doc["block_size"],
            optimizer=doc["optimizer"],
            timeline=timeline,
            estimated_round_latency_ms=doc["estimated_round_latency_ms"],
            dominant_step=doc["dominant_step"],
        )
    except (KeyError, TypeError) as err:
        raise ParseError(f"malformed plan document: {err}") from err


def save_plan(plan: PlanConfig, path) -> None:
    write_document(plan_to_document(plan), path)


def load_plan(path) -> PlanConfig:
    return plan_from_document(read_document(path))
