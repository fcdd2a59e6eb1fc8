import math

import numpy as np
import pytest

from pipeplan.cost_model import COMMUNICATION, EXECUTION, Step
from pipeplan.errors import EstimateExceedsSimulation
from pipeplan.planner import plan
from pipeplan.simulator import (
    ALLREDUCE,
    BP_EVENT,
    FP_EVENT,
    SimResult,
    bubble_count,
    bubble_from_events,
    simulate_round,
    simulate_timeline,
    validate_estimate,
)

from .conftest import make_profile
from .oracles import random_instance

MB = 1_000_000


def exec_step(fp, bp, ar=0.0, stage=0):
    return Step(EXECUTION, stage, fp, bp, ar)


def comm_step(fp, bp):
    return Step(COMMUNICATION, None, fp, bp, 0.0)


class TestSingleStage:
    def test_round_is_m_times_fp_plus_bp_plus_allreduce(self):
        steps = [exec_step(2.0, 3.0, ar=4.0)]
        events, latency = simulate_timeline(steps, 3, {0: 1})
        assert latency == pytest.approx(3 * 5.0 + 4.0)
        assert bubble_from_events(events, 0) == pytest.approx(0.0)

    def test_alternates_one_forward_one_backward(self):
        steps = [exec_step(1.0, 1.0)]
        events, _ = simulate_timeline(steps, 3, {0: 1})
        kinds = [e.kind for e in events if e.kind != ALLREDUCE]
        assert kinds == [FP_EVENT, BP_EVENT] * 3


class TestHandTickedTwoStage:
    """Two stages, free communication, fp = bp = 1, M = 2, K = (3, 1).

    Ticking the rules by hand: stage 1 admits one micro-batch at a time, so
    it strictly alternates F0 B0 F1 B1 starting at t=1; stage 0 runs F0 F1,
    waits for the gradient of micro-batch 0, then B0 F.. B1; the round ends
    with stage 0's B1 at t=6.
    """

    def setup_method(self):
        self.steps = [exec_step(1.0, 1.0), comm_step(0.0, 0.0),
                      exec_step(1.0, 1.0, stage=1)]
        self.events, self.latency = simulate_timeline(self.steps, 2, {0: 3, 2: 1})

    def window(self, step, kind, mb):
        for e in self.events:
            if e.step == step and e.kind == kind and e.micro_batch == mb:
                return (e.start_ms, e.end_ms)
        raise AssertionError(f"missing event {step}/{kind}/{mb}")

    def test_round_latency(self):
        assert self.latency == pytest.approx(6.0)

    def test_exact_schedule(self):
        assert self.window(0, FP_EVENT, 0) == (0.0, 1.0)
        assert self.window(0, FP_EVENT, 1) == (1.0, 2.0)
        assert self.window(2, FP_EVENT, 0) == (1.0, 2.0)
        assert self.window(2, BP_EVENT, 0) == (2.0, 3.0)
        assert self.window(2, FP_EVENT, 1) == (3.0, 4.0)
        assert self.window(0, BP_EVENT, 0) == (3.0, 4.0)
        assert self.window(2, BP_EVENT, 1) == (4.0, 5.0)
        assert self.window(0, BP_EVENT, 1) == (5.0, 6.0)


class TestEventRules:
    def timeline_events(self, M=3, k0=5, k1=1):
        steps = [exec_step(1.0, 2.0), comm_step(0.5, 0.5), exec_step(1.5, 1.0, stage=1)]
        return steps, *simulate_timeline(steps, M, {0: k0, 2: k1})

    def test_dependency_soundness(self):
        steps, events, _ = self.timeline_events()
        fp_end = {}
        bp_end = {}
        for e in events:
            if e.kind in (FP_EVENT, "FwdComm"):
                fp_end[(e.micro_batch, e.step)] = e.end_ms
            elif e.kind in (BP_EVENT, "BwdComm"):
                bp_end[(e.micro_batch, e.step)] = e.end_ms
        for e in events:
            if e.micro_batch is None:
                continue
            if e.kind in (FP_EVENT, "FwdComm") and e.step > 0:
                assert e.start_ms >= fp_end[(e.micro_batch, e.step - 1)]
            if e.kind in (BP_EVENT, "BwdComm") and e.step < len(steps) - 1:
                assert e.start_ms >= bp_end[(e.micro_batch, e.step + 1)]

    def test_work_conservation_per_step(self):
        M = 4
        steps, events, _ = self.timeline_events(M=M)
        for s, step in enumerate(steps):
            busy = math.fsum(e.end_ms - e.start_ms for e in events if e.step == s)
            expected = M * (step.fp_ms + step.bp_ms)
            if step.kind == EXECUTION:
                expected += step.allreduce_ms
            assert busy == pytest.approx(expected)

    def test_one_task_at_a_time_per_step(self):
        steps, events, _ = self.timeline_events(M=5)
        for s in range(len(steps)):
            spans = sorted((e.start_ms, e.end_ms) for e in events if e.step == s)
            for (s1, e1), (s2, _) in zip(spans, spans[1:]):
                assert s2 >= e1

    def test_determinism(self):
        _, events_a, lat_a = self.timeline_events(M=4)
        _, events_b, lat_b = self.timeline_events(M=4)
        assert events_a == events_b
        assert lat_a == lat_b


class TestResidencyBound:
    def test_peak_residents_respect_admission(self):
        rng = np.random.default_rng(515)
        for _ in range(40):
            profile, M, B = random_instance(rng, max_layers=4, max_devices=3)
            try:
                cfg = plan(profile, M, B)
            except Exception:
                continue
            result = simulate_round(cfg, profile=profile)
            for stage, peak in zip(cfg.stages,
                                   result.peak_resident_microbatches):
                assert peak <= stage.k_inflight

    def test_gpipe_like_k_fills_to_m(self):
        steps = [exec_step(1.0, 1.0), comm_step(0.0, 0.0), exec_step(1.0, 1.0, stage=1)]
        events, _ = simulate_timeline(steps, 3, {0: 99, 2: 99})
        result = SimResult(events=events, round_latency_ms=0.0, bubble_ms=(),
                           peak_resident_microbatches=(), peak_memory_bytes=(),
                           micro_batch_count=3)
        from pipeplan.simulator import _peak_residents

        peaks = _peak_residents(events, steps, 3)
        assert peaks[0] == 3  # head stage buffers the whole mini-batch


class TestBubbles:
    def test_single_stage_has_no_bubbles(self):
        profile = make_profile([(MB, MB, 10)], [("only", 10**9, 2.0)])
        cfg = plan(profile, 3, 4)
        result = simulate_round(cfg, profile=profile)
        assert bubble_count(result, 0) == pytest.approx(0.0)

    def test_dominant_step_is_bubble_free_on_compact_fixture(self):
        # three-step pipeline whose tail execution step paces everything
        steps = [exec_step(1.0, 1.0), comm_step(0.5, 0.5), exec_step(3.0, 3.0, stage=1)]
        from pipeplan.planner import dominant_index

        dm = dominant_index(steps, 4)
        events, _ = simulate_timeline(steps, 4, {0: 3, 2: 1})
        assert bubble_from_events(events, dm) == pytest.approx(0.0)
        bubbles = [bubble_from_events(events, s) for s in range(3)]
        assert bubbles[dm] == min(bubbles)


class TestValidateEstimate:
    def test_single_stage_gap_is_zero(self):
        profile = make_profile([(MB, MB, 10)], [("only", 10**9, 2.0)])
        cfg = plan(profile, 3, 4)
        report = validate_estimate(cfg, simulate_round(cfg, profile=profile))
        assert report.relative_gap == pytest.approx(0.0)
        assert report.comm_model == "half-duplex"

    def test_cnn_fixture_reports_nonnegative_gap(self, cnn_profile):
        cfg = plan(cnn_profile, 4, 8)
        report = validate_estimate(cfg, simulate_round(cfg, profile=cnn_profile))
        assert report.relative_gap >= 0.0

    def test_estimate_above_simulation_is_an_error(self, cnn_profile):
        cfg = plan(cnn_profile, 4, 8)
        result = simulate_round(cfg, profile=cnn_profile)
        cfg.estimated_round_latency_ms = result.round_latency_ms * 1.5
        with pytest.raises(EstimateExceedsSimulation):
            validate_estimate(cfg, result)


@pytest.mark.xfail(strict=True, reason=(
    "known model edge: when a communication step dominates and a deeper "
    "execution step carries a large AllReduce, the analytic estimate can "
    "exceed the simulated latency, because that deep step's backward wave "
    "really overlaps upstream transfers running on a different resource "
    "while the phase model assumes it stays aligned behind the dominant "
    "step's span"))
def test_estimate_soundness_counterexample():
    from pipeplan.cost_model import StepTimeline, round_latency
    from pipeplan.planner import dominant_index

    steps = [exec_step(27.96, 36.056),
             comm_step(35.231, 35.231),
             exec_step(9.002, 24.444, ar=95.36, stage=1)]
    M = 2
    timeline = StepTimeline(steps, dominant_index(steps, M), M, 2)
    estimate, _ = round_latency(timeline)
    _, simulated = simulate_timeline(steps, M, {0: 3, 2: 1})
    assert estimate <= simulated + 1e-6
