"""Closed-loop engine tests: integration, event localization, trace rules."""
import math

import numpy as np
import pytest

from etcbf.controllers import GreedyWeights
from etcbf.simulate import (
    ControllerKind,
    DomainExit,
    SimConfig,
    integrate_zoh,
    locate_event,
    run_closed_loop,
    verify_trace,
)
from etcbf.systems import Box, ClassKappa, ControlAffineSystem, SafetySpec, ScalarField
from etcbf.triggers import TriggerCase, TriggerParams

PARAMS = TriggerParams()
W = GreedyWeights()
GAIN = np.array([[-0.5, -1.0]])


def short_cfg(t_end=2.0, dt=0.01):
    return SimConfig(t_end=t_end, dt=dt, x0=np.array([1.0, 1.0]))


class TestIntegrateZoh:
    def test_linear_flow_is_exact(self, benchmark_system):
        sys_, _ = benchmark_system
        out = integrate_zoh(sys_, np.array([0.0, 1.0]), np.array([0.0]), 0.0, 1.0, 0.01)
        assert out[-1][0] == 1.0
        assert out[-1][1] == pytest.approx([1.0, 1.0], abs=1e-14)

    def test_constant_input_closed_form(self, benchmark_system):
        sys_, _ = benchmark_system
        out = integrate_zoh(sys_, np.zeros(2), np.array([1.0]), 0.0, 2.0, 0.01)
        assert out[-1][1] == pytest.approx([2.0, 2.0], abs=1e-12)

    def test_step_halving_agreement(self, benchmark_system):
        sys_, _ = benchmark_system
        x0 = np.array([1.0, 1.0])
        u = np.array([-1.1])
        coarse = integrate_zoh(sys_, x0, u, 0.0, 3.0, 0.01)[-1][1]
        fine = integrate_zoh(sys_, x0, u, 0.0, 3.0, 0.005)[-1][1]
        assert np.max(np.abs(coarse - fine)) <= 1e-10

    def test_final_sample_lands_exactly_on_endpoint(self, benchmark_system):
        sys_, _ = benchmark_system
        out = integrate_zoh(sys_, np.zeros(2), np.array([0.1]), 0.0, 0.737, 0.01)
        assert out[-1][0] == 0.737

    def test_domain_exit_carries_last_inside_sample(self):
        sys_ = ControlAffineSystem(
            n=1, m=1,
            f=lambda x: np.array([1.0]),
            g=lambda x: np.array([[0.0]]),
            domain=Box(lower=[-1.0], upper=[1.0]),
        )
        with pytest.raises(DomainExit) as info:
            integrate_zoh(sys_, np.zeros(1), np.zeros(1), 0.0, 5.0, 0.1)
        assert info.value.last_t == pytest.approx(1.0, abs=1e-9)
        assert info.value.last_x == pytest.approx([1.0], abs=1e-9)


class TestLocateEvent:
    def test_linear_root(self):
        t = locate_event(lambda t: 1.0 - t, 0.0, 2.0, 1e-9)
        assert t == pytest.approx(1.0, abs=1e-8)

    def test_cosine_root(self):
        t = locate_event(math.cos, 0.0, 2.0, 1e-9)
        assert t == pytest.approx(math.pi / 2.0, abs=1e-8)

    def test_unbracketed_rejected(self):
        with pytest.raises(ValueError, match="bracket"):
            locate_event(lambda t: 1.0, 0.0, 1.0, 1e-9)


class TestRunClosedLoop:
    def test_state_feedback_enters_unsafe_region(self, benchmark_system):
        sys_, spec = benchmark_system
        tr = run_closed_loop("state_feedback", spec, sys_, SimConfig(), PARAMS, W, gain=GAIN)
        assert tr.summary().min_h < 0.0

    def test_periodic_controllers_update_every_step(self, benchmark_system):
        sys_, spec = benchmark_system
        cfg = short_cfg(t_end=1.0)
        for name in ("greedy_continuous", "baseline_qp", "state_feedback"):
            tr = run_closed_loop(name, spec, sys_, cfg, PARAMS, W, gain=GAIN)
            assert tr.summary().update_count == 100
            assert tr.samples[-1].t == 1.0

    def test_bit_identical_reruns(self, benchmark_system):
        sys_, spec = benchmark_system
        cfg = short_cfg(t_end=3.0)
        a = run_closed_loop("greedy_et", spec, sys_, cfg, PARAMS, W)
        b = run_closed_loop("greedy_et", spec, sys_, cfg, PARAMS, W)
        assert len(a.samples) == len(b.samples)
        for sa, sb in zip(a.samples, b.samples):
            assert sa.t == sb.t
            assert np.array_equal(sa.x, sb.x)
            assert np.array_equal(sa.u, sb.u)
            assert (sa.V, sa.h, sa.p, sa.q) == (sb.V, sb.h, sb.p, sb.q)
        assert [e.t for e in a.executions] == [e.t for e in b.executions]

    def test_zero_order_hold_is_bitwise(self, benchmark_system):
        sys_, spec = benchmark_system
        tr = run_closed_loop("greedy_et", spec, sys_, short_cfg(t_end=5.0), PARAMS, W)
        exec_times = [e.t for e in tr.executions]
        exec_inputs = [e.u for e in tr.executions]
        for s in tr.samples:
            idx = np.searchsorted(exec_times, s.t, side="right") - 1
            assert np.array_equal(s.u, exec_inputs[idx])

    def test_execution_times_strictly_increase(self, benchmark_system):
        sys_, spec = benchmark_system
        for name in ("greedy_et", "greedy_st"):
            tr = run_closed_loop(name, spec, sys_, short_cfg(t_end=5.0), PARAMS, W)
            times = [e.t for e in tr.executions]
            assert all(b > a for a, b in zip(times, times[1:]))

    def test_event_localization_accuracy(self, benchmark_system):
        # At a stability or safety firing instant the corresponding margin
        # vanishes to within the bisection tolerance.
        from etcbf.systems import safety_margin, stability_margin
        from etcbf.triggers import TriggerEventKind

        sys_, spec = benchmark_system
        tr = run_closed_loop("greedy_et", spec, sys_, SimConfig(), PARAMS, W)
        seen = set()
        for prev, nxt in zip(tr.executions, tr.executions[1:]):
            if nxt.event is TriggerEventKind.STABILITY_ZERO:
                assert abs(stability_margin(spec, sys_, nxt.x, prev.u)) <= 1e-6
                seen.add("p")
            elif nxt.event is TriggerEventKind.SAFETY_ZERO:
                assert abs(safety_margin(spec, sys_, nxt.x, prev.u)) <= 1e-6
                seen.add("q")
        assert seen == {"p", "q"}

    def test_update_count_stable_under_step_halving(self, benchmark_system):
        sys_, spec = benchmark_system
        coarse = run_closed_loop("greedy_et", spec, sys_, SimConfig(dt=0.01), PARAMS, W)
        fine = run_closed_loop("greedy_et", spec, sys_, SimConfig(dt=0.005), PARAMS, W)
        assert abs(coarse.summary().update_count - fine.summary().update_count) <= 1

    def test_degenerate_horizon(self, benchmark_system):
        sys_, spec = benchmark_system
        cfg = SimConfig(t_end=0.0, dt=0.01, x0=np.array([1.0, 1.0]))
        tr = run_closed_loop("greedy_et", spec, sys_, cfg, PARAMS, W)
        assert len(tr.samples) == 1
        assert tr.executions == []
        assert tr.summary().update_count == 0
        assert math.isinf(tr.summary().min_inter_execution)

    def test_domain_exit_attaches_partial_trace(self, benchmark_system):
        sys_, spec = benchmark_system
        unstable_gain = np.array([[1.0, 1.0]])
        with pytest.raises(DomainExit) as info:
            run_closed_loop("state_feedback", spec, sys_, SimConfig(), PARAMS, W,
                            gain=unstable_gain)
        assert info.value.trace is not None
        assert len(info.value.trace.samples) > 0

    def test_summary_recomputable_from_samples(self, benchmark_system):
        sys_, spec = benchmark_system
        tr = run_closed_loop("greedy_st", spec, sys_, short_cfg(t_end=4.0), PARAMS, W)
        s = tr.summary()
        assert s.update_count == len(tr.executions)
        assert s.min_h == min(x.h for x in tr.samples)
        assert s.final_V == tr.samples[-1].V
        gaps = np.diff([e.t for e in tr.executions])
        assert s.min_inter_execution == pytest.approx(float(gaps.min()))


class TestVerifyTrace:
    def test_safety_only_durations_respect_budget(self, benchmark_system):
        sys_, spec = benchmark_system
        tr = run_closed_loop("greedy_et", spec, sys_, SimConfig(), PARAMS, W)
        rep = verify_trace(tr, spec, sys_, PARAMS, dense_step=0.01 / 20)
        case2 = [a for a in rep.intervals if a.case is TriggerCase.SAFETY_ONLY]
        assert case2, "benchmark run should contain safety-only intervals"
        assert all(a.duration <= PARAMS.tau_bd + 1e-9 for a in case2)

    def test_single_interval_trace(self, benchmark_system):
        sys_, spec = benchmark_system
        cfg = SimConfig(t_end=0.1, dt=0.01, x0=np.array([1.0, 1.0]))
        tr = run_closed_loop("greedy_st", spec, sys_, cfg, PARAMS, W)
        rep = verify_trace(tr, spec, sys_, PARAMS)
        assert len(rep.intervals) == 1
        assert math.isinf(rep.min_inter_execution)
        assert rep.intervals[0].min_q >= -1e-6

    def test_report_text_renders(self, benchmark_system):
        sys_, spec = benchmark_system
        tr = run_closed_loop("greedy_st", spec, sys_, short_cfg(t_end=3.0), PARAMS, W)
        rep = verify_trace(tr, spec, sys_, PARAMS)
        text = rep.to_text()
        assert "min inter-execution" in text
        assert str(len(rep.intervals)) in text


class TestSimConfigValidation:
    def test_rejects_bad_configs(self):
        with pytest.raises(ValueError):
            SimConfig(dt=0.0)
        with pytest.raises(ValueError):
            SimConfig(t_end=-1.0)
        with pytest.raises(ValueError):
            SimConfig(t_end=0.5, dt=1.0)
        with pytest.raises(ValueError):
            SimConfig(event_bisection_tol=0.5, dt=0.01)
        with pytest.raises(ValueError):
            SimConfig(dense_check_factor=0)
