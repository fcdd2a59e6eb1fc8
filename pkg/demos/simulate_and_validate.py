#!/usr/bin/env python3
"""Simulate one training round of a planned pipeline and check the estimate.

Loads the committed 4-device CNN profile, plans it, replays the schedule
event by event, prints a text Gantt of the round, and verifies the analytic
latency estimate stays below the simulated truth.
"""

from pathlib import Path

from pipeplan import load_profile, plan, simulate_round, validate_estimate

PROFILE = Path(__file__).resolve().parent.parent / "tests" / "data" / "cnn_4dev.json"


def text_gantt(result, width=78):
    scale = width / result.round_latency_ms
    steps = sorted({e.step for e in result.events})
    for s in steps:
        row = [" "] * width
        for e in result.events:
            if e.step != s:
                continue
            lo = int(e.start_ms * scale)
            hi = max(lo + 1, int(e.end_ms * scale))
            mark = {"FP": "F", "BP": "B", "FwdComm": ">", "BwdComm": "<",
                    "AllReduce": "#"}[e.kind]
            for x in range(lo, min(hi, width)):
                row[x] = mark
        print(f"step {s}: {''.join(row)}")


def main() -> None:
    profile = load_profile(PROFILE)
    cfg = plan(profile, micro_batch_count=4, micro_batch_size=8)
    print(f"planned {cfg.num_stages} stages, estimate "
          f"{cfg.estimated_round_latency_ms:.1f} ms (dominant step "
          f"{cfg.dominant_step})")

    result = simulate_round(cfg, profile=profile)
    print(f"simulated round: {result.round_latency_ms:.1f} ms\n")
    text_gantt(result)

    report = validate_estimate(cfg, result)
    print(f"\nestimate {report.estimate_ms:.1f} ms <= simulated "
          f"{report.simulated_ms:.1f} ms "
          f"(gap {100 * report.relative_gap:.1f}%, {report.comm_model} links)")
    print("bubbles per step:",
          " ".join(f"{b:.1f}" for b in result.bubble_ms))
    print("peak resident micro-batches per stage:",
          result.peak_resident_microbatches)


if __name__ == "__main__":
    main()
