"""Controller optimization problems built on the CLF/CBF margins.

The central object is the slack-maximizing QP over v = [u, rho1, rho2]:

    min 1/2 u^T w1 u - w2 rho1 - w3 rho2
    s.t. L_gV u + rho1 <= b_clf,   -L_gh u + rho2 <= b_cbf,   rho2 >= eps_cbf

whose held input u drives both triggered controllers. Also here: the
classic relaxed CLF-CBF QP baseline, the margin-guaranteed variant with
rho1 >= eps1 and rho2 >= eps2, the unpenalized-input LP special case, and
plain state feedback.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .qp import NumericalFailure, QpSolution, QpStatus, QuadraticProgram, solve_qp
from .systems import ControlAffineSystem, SafetySpec, clf_bound, lie_derivatives


class UnboundedObjective(RuntimeError):
    """The LP objective decreases without bound on the feasible set."""


class InfeasibleControlProblem(RuntimeError):
    """A controller problem expected to be solvable has no solution."""


@dataclass(frozen=True)
class GreedyWeights:
    """Weights of the slack-maximizing QP.

    w1 penalizes input effort (scalar or m x m SPD matrix), w2/w3 reward the
    stability/safety slacks, eps_cbf is the enforced floor on the safety
    slack (and hence on q at every execution).
    """

    w1: float | np.ndarray = 1.0
    w2: float = 1.0
    w3: float = 0.0
    eps_cbf: float = 0.1

    def __post_init__(self):
        if self.w2 < 0 or self.w3 < 0:
            raise ValueError("slack rewards w2, w3 must be nonnegative")
        if self.eps_cbf <= 0:
            raise ValueError("eps_cbf must be positive")
        w1 = np.asarray(self.w1, dtype=float)
        if w1.ndim == 0:
            if float(w1) <= 0:
                raise ValueError("scalar w1 must be positive")
        else:
            if w1.shape[0] != w1.shape[1] or np.max(np.abs(w1 - w1.T)) > 1e-12:
                raise ValueError("matrix w1 must be square symmetric")
            if np.linalg.eigvalsh(w1)[0] <= 0:
                raise ValueError("matrix w1 must be positive definite")

    def w1_matrix(self, m: int) -> np.ndarray:
        w1 = np.asarray(self.w1, dtype=float)
        if w1.ndim == 0:
            return float(w1) * np.eye(m)
        if w1.shape != (m, m):
            raise ValueError(f"w1 shape {w1.shape} does not match input dimension {m}")
        return w1


@dataclass(frozen=True)
class ControlDecision:
    """Held input and slacks extracted from a controller QP solution."""

    u: np.ndarray | None
    rho1: float
    rho2: float
    feasible: bool
    solve_status: QpStatus
    active_set: tuple[int, ...] = ()


def _margins(spec, sys, x):
    """(L_gV, b_clf, L_gh, b_cbf) at x, each Lie derivative taken once."""
    l_fv, l_gv = lie_derivatives(spec.V, sys, x)
    l_fh, l_gh = lie_derivatives(spec.h, sys, x)
    b_clf = -l_fv - float(spec.gamma.apply(float(spec.V.value(x))))
    b_cbf = l_fh + float(spec.alpha.apply(float(spec.h.value(x))))
    return l_gv, b_clf, l_gh, b_cbf


def build_greedy_qp(
    spec: SafetySpec, sys: ControlAffineSystem, x: np.ndarray, w: GreedyWeights
) -> QuadraticProgram:
    """Assemble the slack-maximizing QP over v = [u, rho1, rho2] at x."""
    l_gv, b_clf, l_gh, b_cbf = _margins(spec, sys, x)
    m = sys.m
    n_v = m + 2
    Q = np.zeros((n_v, n_v))
    Q[:m, :m] = w.w1_matrix(m)
    c = np.zeros(n_v)
    c[m] = -w.w2
    c[m + 1] = -w.w3
    A = np.zeros((3, n_v))
    A[0, :m] = l_gv
    A[0, m] = 1.0
    A[1, :m] = -l_gh
    A[1, m + 1] = 1.0
    A[2, m + 1] = -1.0
    b = np.array([b_clf, b_cbf, -w.eps_cbf])
    return QuadraticProgram(Q=Q, c=c, A=A, b=b)


def _decision_from(sol: QpSolution, m: int) -> ControlDecision:
    if sol.status is QpStatus.OPTIMAL:
        v = sol.v_star
        return ControlDecision(
            u=v[:m].copy(),
            rho1=float(v[m]),
            rho2=float(v[m + 1]),
            feasible=True,
            solve_status=sol.status,
            active_set=sol.active_set,
        )
    if sol.status is QpStatus.INFEASIBLE:
        return ControlDecision(
            u=None, rho1=float("nan"), rho2=float("nan"),
            feasible=False, solve_status=sol.status,
        )
    raise NumericalFailure(f"controller QP reported unexpected status {sol.status}")


def greedy_control(
    spec: SafetySpec, sys: ControlAffineSystem, x: np.ndarray, w: GreedyWeights
) -> ControlDecision:
    """Solve the slack-maximizing QP; the held input is the u block.

    Infeasible (possible only when L_gh(x) = 0 with b_cbf(x) < eps_cbf)
    is reported via feasible=False rather than raised; the simulator
    decides what to hold in that case.
    """
    sol = solve_qp(build_greedy_qp(spec, sys, x, w))
    return _decision_from(sol, sys.m)


def guaranteed_qp_control(
    spec: SafetySpec,
    sys: ControlAffineSystem,
    x: np.ndarray,
    w: GreedyWeights,
    eps1: float,
    eps2: float,
) -> ControlDecision:
    """Margin-guaranteed variant: adds rho1 >= eps1 and rho2 >= eps2.

    Intended for problems jointly feasible with margins s1 > eps1,
    s2 > eps2; feasible=False signals that assumption fails at x.
    """
    if eps1 <= 0 or eps2 <= 0:
        raise ValueError("margins eps1, eps2 must be positive")
    l_gv, b_clf, l_gh, b_cbf = _margins(spec, sys, x)
    m = sys.m
    n_v = m + 2
    Q = np.zeros((n_v, n_v))
    Q[:m, :m] = w.w1_matrix(m)
    c = np.zeros(n_v)
    c[m] = -w.w2
    c[m + 1] = -w.w3
    A = np.zeros((4, n_v))
    A[0, :m] = l_gv
    A[0, m] = 1.0
    A[1, :m] = -l_gh
    A[1, m + 1] = 1.0
    A[2, m] = -1.0
    A[3, m + 1] = -1.0
    b = np.array([b_clf, b_cbf, -eps1, -eps2])
    return _decision_from(solve_qp(QuadraticProgram(Q=Q, c=c, A=A, b=b)), m)


def baseline_qp_solution(
    spec: SafetySpec,
    sys: ControlAffineSystem,
    x: np.ndarray,
    weight: float | np.ndarray = 2.0,
    relax_penalty: float = 1.0,
) -> QpSolution:
    """Relaxed CLF-CBF QP over [u, delta]: min 1/2 u^T H u + p delta^2.

    delta softens only the CLF row and is unconstrained in sign; the CBF
    row is hard, so the problem is solvable whenever L_gh(x) != 0 or
    b_cbf(x) >= 0.
    """
    l_gv, b_clf, l_gh, b_cbf = _margins(spec, sys, x)
    m = sys.m
    H = np.asarray(weight, dtype=float)
    if H.ndim == 0:
        H = float(H) * np.eye(m)
    n_v = m + 1
    Q = np.zeros((n_v, n_v))
    Q[:m, :m] = H
    Q[m, m] = 2.0 * relax_penalty
    c = np.zeros(n_v)
    A = np.zeros((2, n_v))
    A[0, :m] = l_gv
    A[0, m] = -1.0
    A[1, :m] = -l_gh
    b = np.array([b_clf, b_cbf])
    sol = solve_qp(QuadraticProgram(Q=Q, c=c, A=A, b=b))
    if sol.status is not QpStatus.OPTIMAL:
        raise InfeasibleControlProblem(
            f"baseline CLF-CBF QP returned {sol.status} at x={np.asarray(x)}"
        )
    return sol


def baseline_qp_control(
    spec: SafetySpec,
    sys: ControlAffineSystem,
    x: np.ndarray,
    weight: float | np.ndarray = 2.0,
    relax_penalty: float = 1.0,
) -> np.ndarray:
    """Input block of the relaxed CLF-CBF QP optimizer."""
    sol = baseline_qp_solution(spec, sys, x, weight, relax_penalty)
    return sol.v_star[: sys.m].copy()


def greedy_lp_control(
    spec: SafetySpec,
    sys: ControlAffineSystem,
    x: np.ndarray,
    w2: float,
    w3: float,
    eps1: float,
    eps2: float,
) -> np.ndarray:
    """Unpenalized-input special case, a linear program in u alone.

        min (-w2 L_gV - w3 L_gh) u
        s.t. L_gV u <= b_clf - eps1,   -L_gh u <= b_cbf - eps2

    Reuses the regularized QP solver (Q is the regularization alone) so one
    solver and one set of tolerances cover every controller.
    """
    if w2 < 0 or w3 < 0:
        raise ValueError("weights w2, w3 must be nonnegative")
    l_gv, b_clf, l_gh, b_cbf = _margins(spec, sys, x)
    m = sys.m
    c = -(w2 * l_gv + w3 * l_gh)
    A = np.vstack([l_gv, -l_gh])
    b = np.array([b_clf - eps1, b_cbf - eps2])
    sol = solve_qp(QuadraticProgram(Q=np.zeros((m, m)), c=c, A=A, b=b))
    if sol.status is QpStatus.UNBOUNDED:
        raise UnboundedObjective(f"LP objective unbounded at x={np.asarray(x)}")
    if sol.status is QpStatus.INFEASIBLE:
        raise InfeasibleControlProblem(
            f"margins eps1={eps1}, eps2={eps2} not jointly attainable at x={np.asarray(x)}"
        )
    return sol.v_star.copy()


def state_feedback_control(K: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Plain linear state feedback u = K x (no constraints)."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    x = np.asarray(x, dtype=float)
    if K.shape[1] != x.size:
        raise ValueError(f"gain has {K.shape[1]} columns, state has {x.size} entries")
    return K @ x
