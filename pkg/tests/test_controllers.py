"""Controller QP tests, cross-checked against the KKT enumeration oracle."""
import numpy as np
import pytest

from etcbf.controllers import (
    GreedyWeights,
    InfeasibleControlProblem,
    UnboundedObjective,
    baseline_qp_control,
    build_greedy_qp,
    greedy_control,
    greedy_lp_control,
    guaranteed_qp_control,
    state_feedback_control,
)
from etcbf.qp import QpStatus, solve_kkt_oracle
from etcbf.systems import (
    Box,
    ClassKappa,
    ControlAffineSystem,
    SafetySpec,
    ScalarField,
    safety_margin,
    stability_margin,
)

W_BENCH = GreedyWeights(w1=1.0, w2=1.0, w3=0.0, eps_cbf=0.1)


def far_inside_toy():
    """1-d system with large positive constraint offsets at x = 2."""
    sys_ = ControlAffineSystem(
        n=1, m=1,
        f=lambda x: np.array([-x[0]]),
        g=lambda x: np.array([[1.0]]),
        domain=Box(lower=[-5.0], upper=[5.0]),
    )
    spec = SafetySpec(
        V=ScalarField(value=lambda x: x[0] ** 2, gradient=lambda x: np.array([2.0 * x[0]])),
        h=ScalarField(value=lambda x: 10.0 - x[0], gradient=lambda x: np.array([-1.0])),
        gamma=ClassKappa.identity(),
        alpha=ClassKappa.identity(),
    )
    return sys_, spec


class TestBuildGreedyQp:
    def test_benchmark_matrix_entries(self, benchmark_system):
        sys_, spec = benchmark_system
        qp = build_greedy_qp(spec, sys_, np.array([1.0, 1.0]), W_BENCH)
        assert np.allclose(qp.A, [[3.0, 1.0, 0.0], [-3.0, 0.0, 1.0], [0.0, 0.0, -1.0]], atol=1e-12)
        assert np.allclose(qp.b, [-6.0, 3.41, -0.1], atol=1e-12)
        assert np.allclose(qp.Q, np.diag([1.0, 0.0, 0.0]))
        assert np.allclose(qp.c, [0.0, -1.0, 0.0])

    def test_slack_floor_row_is_structural(self, benchmark_system):
        sys_, spec = benchmark_system
        rng = np.random.default_rng(0)
        for x in rng.uniform(-2.0, 2.0, size=(10, 2)):
            qp = build_greedy_qp(spec, sys_, x, W_BENCH)
            assert np.array_equal(qp.A[2], [0.0, 0.0, -1.0])
            assert qp.b[2] == -W_BENCH.eps_cbf

    def test_two_input_structure(self):
        sys_ = ControlAffineSystem(
            n=2, m=2,
            f=lambda x: np.zeros(2),
            g=lambda x: np.eye(2),
            domain=Box(lower=[-1.0, -1.0], upper=[1.0, 1.0]),
        )
        spec = SafetySpec(
            V=ScalarField(value=lambda x: x @ x, gradient=lambda x: 2.0 * x),
            h=ScalarField(value=lambda x: 1.0 + x[0], gradient=lambda x: np.array([1.0, 0.0])),
            gamma=ClassKappa.identity(),
            alpha=ClassKappa.identity(),
        )
        qp = build_greedy_qp(spec, sys_, np.array([0.2, 0.1]), GreedyWeights(w1=np.eye(2)))
        assert qp.n_v == 4
        assert np.allclose(qp.Q[2:, 2:], 0.0)
        assert np.allclose(qp.Q[:2, :2], np.eye(2))


class TestGreedyControl:
    def test_benchmark_start(self, benchmark_system):
        sys_, spec = benchmark_system
        dec = greedy_control(spec, sys_, np.array([1.0, 1.0]), W_BENCH)
        assert dec.feasible
        assert dec.u == pytest.approx([-3.31 / 3.0], abs=1e-7)
        assert dec.rho1 == pytest.approx(-2.69, abs=1e-7)
        assert dec.rho2 == pytest.approx(0.1, abs=1e-9)

    def test_second_derived_state(self, benchmark_system):
        # At x = [0, 1]: CLF row active gives rho1 = -2 - 2u; the safety
        # floor bounds u >= -1.31/3, which beats the unconstrained u = -2.
        sys_, spec = benchmark_system
        dec = greedy_control(spec, sys_, np.array([0.0, 1.0]), W_BENCH)
        assert dec.u == pytest.approx([-1.31 / 3.0], abs=1e-7)
        assert dec.rho1 == pytest.approx(-3.38 / 3.0, abs=1e-7)
        assert dec.rho2 == pytest.approx(0.1, abs=1e-9)

    def test_matches_enumeration_oracle_at_random_states(self, benchmark_system):
        sys_, spec = benchmark_system
        rng = np.random.default_rng(1)
        checked = 0
        while checked < 40:
            x = rng.uniform(-2.0, 2.0, size=2)
            qp = build_greedy_qp(spec, sys_, x, W_BENCH)
            ref = solve_kkt_oracle(qp)
            dec = greedy_control(spec, sys_, x, W_BENCH)
            if not dec.feasible:
                assert ref.status is QpStatus.INFEASIBLE
                continue
            checked += 1
            assert np.max(np.abs(dec.u - ref.v_star[:1])) <= 1e-6

    def test_unpenalized_idle_when_far_inside(self):
        sys_, spec = far_inside_toy()
        dec = greedy_control(spec, sys_, np.array([2.0]), GreedyWeights(w1=1.0, w2=0.0, w3=0.0))
        assert dec.u == pytest.approx([0.0], abs=1e-6)
        assert dec.rho2 == pytest.approx(0.1, abs=1e-8)

    def test_infeasible_reported_not_raised(self, benchmark_system):
        # L_gh = 0 on the line x2 = -0.5; pick a point there with b_cbf < eps_cbf.
        sys_, spec = benchmark_system
        x = np.array([0.9, -0.5])
        dec = greedy_control(spec, sys_, x, W_BENCH)
        assert not dec.feasible
        assert dec.u is None


class TestGreedyInvariants:
    def test_safety_slack_floor_transfers_to_margin(self, benchmark_system):
        sys_, spec = benchmark_system
        rng = np.random.default_rng(2)
        checked = 0
        while checked < 60:
            x = rng.uniform(-2.5, 2.5, size=2)
            dec = greedy_control(spec, sys_, x, W_BENCH)
            if not dec.feasible:
                continue
            checked += 1
            assert safety_margin(spec, sys_, x, dec.u) >= W_BENCH.eps_cbf - 1e-8

    def test_stability_margin_identity_when_clf_row_active(self, benchmark_system):
        sys_, spec = benchmark_system
        rng = np.random.default_rng(3)
        checked = 0
        while checked < 60:
            x = rng.uniform(-2.5, 2.5, size=2)
            dec = greedy_control(spec, sys_, x, W_BENCH)
            if not dec.feasible or 0 not in dec.active_set:
                continue
            checked += 1
            p = stability_margin(spec, sys_, x, dec.u)
            assert p == pytest.approx(dec.rho1 + spec.V.value(x), abs=1e-8)

    def test_tiny_w3_perturbation_is_inert(self, benchmark_system):
        sys_, spec = benchmark_system
        x = np.array([1.0, 1.0])
        base = greedy_control(spec, sys_, x, W_BENCH)
        bumped = greedy_control(spec, sys_, x, GreedyWeights(w1=1.0, w2=1.0, w3=1e-10, eps_cbf=0.1))
        assert np.max(np.abs(base.u - bumped.u)) <= 1e-7
        assert abs(base.rho2 - bumped.rho2) <= 1e-7


class TestBaselineQp:
    def test_benchmark_start(self, benchmark_system):
        # Both rows active: u = -3.41/3, delta = 3u + 6 = 2.59.
        sys_, spec = benchmark_system
        u = baseline_qp_control(spec, sys_, np.array([1.0, 1.0]), 2.0, 1.0)
        assert u == pytest.approx([-3.41 / 3.0], abs=1e-7)

    def test_idle_when_origin_feasible(self):
        sys_, spec = far_inside_toy()
        u = baseline_qp_control(spec, sys_, np.array([2.0]), 2.0, 1.0)
        assert u == pytest.approx([0.0], abs=1e-6)

    def test_joint_weight_scaling_invariance(self, benchmark_system):
        sys_, spec = benchmark_system
        x = np.array([1.0, 1.0])
        u1 = baseline_qp_control(spec, sys_, x, 2.0, 1.0)
        u2 = baseline_qp_control(spec, sys_, x, 8.0, 4.0)
        assert np.max(np.abs(u1 - u2)) <= 1e-7


class TestGuaranteedQp:
    def test_infeasible_at_benchmark_start(self, benchmark_system):
        # rho1 >= 0.1 forces u <= -6.1/3 while the safety rows force
        # u >= -3.31/3: empty.
        sys_, spec = benchmark_system
        dec = guaranteed_qp_control(spec, sys_, np.array([1.0, 1.0]), W_BENCH, 0.1, 0.1)
        assert not dec.feasible

    def test_agrees_with_greedy_when_margins_slack(self, benchmark_system):
        sys_, spec = benchmark_system
        x = np.array([0.0, -1.0])
        plain = greedy_control(spec, sys_, x, W_BENCH)
        assert plain.rho1 >= 0.1 and plain.rho2 >= 0.1
        guarded = guaranteed_qp_control(spec, sys_, x, W_BENCH, 0.1, 0.1)
        assert guarded.feasible
        assert np.max(np.abs(guarded.u - plain.u)) <= 1e-7
        assert guarded.rho1 == pytest.approx(plain.rho1, abs=1e-7)

    def test_vanishing_first_margin_recovers_greedy(self, benchmark_system):
        sys_, spec = benchmark_system
        x = np.array([0.0, -1.0])
        plain = greedy_control(spec, sys_, x, W_BENCH)
        limit = guaranteed_qp_control(spec, sys_, x, W_BENCH, 1e-9, W_BENCH.eps_cbf)
        assert np.max(np.abs(limit.u - plain.u)) <= 1e-6


class TestGreedyLp:
    def test_single_variable_lp_oracle(self, benchmark_system):
        # At x = [0, -1]: cost 3u over the interval [1.05, 1.31];
        # the minimum sits on the lower (CLF) bound.
        sys_, spec = benchmark_system
        u = greedy_lp_control(spec, sys_, np.array([0.0, -1.0]), 1.0, 1.0, 0.1, 0.1)
        assert u == pytest.approx([1.05], abs=1e-6)

    def test_zero_cost_returns_minimum_norm_point(self):
        sys_, spec = far_inside_toy()
        u = greedy_lp_control(spec, sys_, np.array([2.0]), 0.0, 0.0, 0.1, 0.1)
        assert u == pytest.approx([0.0], abs=1e-5)

    def test_zero_normals_with_nonnegative_offsets(self):
        sys_ = ControlAffineSystem(
            n=1, m=1,
            f=lambda x: np.array([0.0]),
            g=lambda x: np.array([[1.0]]),
            domain=Box(lower=[-5.0], upper=[5.0]),
        )
        # Flat fields zero both constraint normals; the stand-in level for V
        # must be negative so that -gamma(V) leaves a nonnegative offset.
        flat_v = ScalarField(value=lambda x: -1.0, gradient=lambda x: np.zeros(1))
        flat_h = ScalarField(value=lambda x: 1.0, gradient=lambda x: np.zeros(1))
        spec = SafetySpec(V=flat_v, h=flat_h, gamma=ClassKappa.identity(),
                          alpha=ClassKappa.identity())
        u = greedy_lp_control(spec, sys_, np.array([0.0]), 1.0, 1.0, 0.1, 0.1)
        assert u == pytest.approx([0.0], abs=1e-5)

    def test_unbounded_objective_raises(self, benchmark_system):
        # At x = [2, -0.8] both rows upper-bound u, so rewarding the safety
        # slack alone pushes u to -infinity.
        sys_, spec = benchmark_system
        with pytest.raises(UnboundedObjective):
            greedy_lp_control(spec, sys_, np.array([2.0, -0.8]), 0.0, 1.0, 0.1, 0.1)

    def test_margin_failure_raises(self, benchmark_system):
        sys_, spec = benchmark_system
        with pytest.raises(InfeasibleControlProblem):
            greedy_lp_control(spec, sys_, np.array([1.0, 1.0]), 1.0, 1.0, 0.1, 0.1)


class TestStateFeedback:
    def test_benchmark_gain(self):
        assert state_feedback_control([[-0.5, -1.0]], np.array([1.0, 1.0])) == pytest.approx([-1.5])

    def test_zero_state(self):
        assert state_feedback_control([[-0.5, -1.0]], np.zeros(2)) == pytest.approx([0.0])

    def test_single_term(self):
        assert state_feedback_control([[-0.5, -1.0]], np.array([2.0, 0.0])) == pytest.approx([-1.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            state_feedback_control([[-0.5, -1.0]], np.array([1.0, 1.0, 1.0]))


class TestWeightsValidation:
    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError):
            GreedyWeights(w2=-1.0)
        with pytest.raises(ValueError):
            GreedyWeights(eps_cbf=0.0)
        with pytest.raises(ValueError):
            GreedyWeights(w1=-2.0)
        with pytest.raises(ValueError):
            GreedyWeights(w1=np.array([[1.0, 0.5], [0.4, 1.0]]))
