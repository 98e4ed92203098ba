"""Dense convex quadratic programming for tiny controller problems.

Solves  min 1/2 v^T Q v + c^T v  subject to  A v <= b  for problems with a
handful of variables and constraints, which is all the controllers in this
package ever produce. A primal active-set method with a phase-1 feasibility
stage does the real work; :func:`solve_kkt_oracle` enumerates candidate
active sets exhaustively and exists to cross-check the solver.

Both routines internally regularize a merely positive-semidefinite Q with a
fixed 1e-9 diagonal shift so the optimizer is unique and deterministic.
Under that regularization every feasible problem attains a finite optimizer;
an unbounded *unregularized* objective shows up as an optimizer of enormous
norm, which is how Unbounded status is detected.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

# Standard double-precision active-set margins.
FEASIBILITY_TOL = 1e-8
DUAL_TOL = 1e-8
STATIONARITY_TOL = 1e-7
REGULARIZATION = 1e-9
TIE_TOL = 1e-9

# Optimizer-norm threshold separating genuine optima (O(1e2) in this
# artifact) from the huge regularized stand-ins of unbounded problems.
UNBOUNDED_NORM = 1e6

_PHASE1_REG = 1e-13
_ORACLE_MAX_CONSTRAINTS = 16


class QpStatus(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


class NumericalFailure(RuntimeError):
    """The active-set iteration broke down instead of converging."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class QuadraticProgram:
    """min 1/2 v^T Q v + c^T v  subject to  A v <= b."""

    Q: np.ndarray
    c: np.ndarray
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.c, dtype=float)).ravel()
        n_v = c.size
        if n_v < 1:
            raise ValueError("need at least one decision variable")
        Q = np.asarray(self.Q, dtype=float)
        if Q.ndim == 0:
            Q = Q.reshape(1, 1)
        if Q.shape != (n_v, n_v):
            raise ValueError(f"Q shape {Q.shape} does not match {n_v} variables")
        A = np.asarray(self.A, dtype=float)
        if A.size == 0:
            A = np.zeros((0, n_v))
        if A.ndim == 1:
            A = A.reshape(1, -1)
        if A.shape[1] != n_v:
            raise ValueError(f"A has {A.shape[1]} columns, expected {n_v}")
        b = np.atleast_1d(np.asarray(self.b, dtype=float)).ravel() if np.size(self.b) else np.zeros(0)
        if b.size != A.shape[0]:
            raise ValueError(f"b has {b.size} entries, expected {A.shape[0]}")
        for name, arr in (("Q", Q), ("c", c), ("A", A), ("b", b)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        if np.max(np.abs(Q - Q.T), initial=0.0) > 1e-12:
            raise ValueError("Q must be symmetric to 1e-12")
        if np.linalg.eigvalsh(Q)[0] < -1e-10:
            raise ValueError("Q must be positive semidefinite")
        object.__setattr__(self, "Q", _readonly(Q))
        object.__setattr__(self, "c", _readonly(c))
        object.__setattr__(self, "A", _readonly(A))
        object.__setattr__(self, "b", _readonly(b))

    @property
    def n_v(self) -> int:
        return self.c.size

    @property
    def n_c(self) -> int:
        return self.b.size

    def objective(self, v: np.ndarray) -> float:
        v = np.asarray(v, dtype=float)
        return float(0.5 * v @ self.Q @ v + self.c @ v)


@dataclass(frozen=True)
class QpSolution:
    v_star: np.ndarray | None
    objective: float
    active_set: tuple[int, ...]
    status: QpStatus
    duals: np.ndarray | None = None

    @property
    def optimal(self) -> bool:
        return self.status is QpStatus.OPTIMAL


def _regularize(Q: np.ndarray) -> np.ndarray:
    if Q.size and np.linalg.eigvalsh(Q)[0] < REGULARIZATION:
        return Q + REGULARIZATION * np.eye(Q.shape[0])
    return np.asarray(Q, dtype=float)


def _tight_set(A: np.ndarray, b: np.ndarray, v: np.ndarray) -> tuple[int, ...]:
    if b.size == 0:
        return ()
    residual = A @ v - b
    return tuple(int(i) for i in np.flatnonzero(residual >= -FEASIBILITY_TOL))


def _active_set_minimize(Qr, c, A, b, v, cap):
    """Iterate a primal active-set method from the feasible point ``v``.

    Returns (v, full dual vector). Raises NumericalFailure past ``cap``.
    """
    n_v = v.size
    n_c = b.size
    v = np.array(v, dtype=float)
    working: list[int] = []
    in_working = np.zeros(n_c, dtype=bool)
    for _ in range(cap):
        grad = Qr @ v + c
        if not working:
            try:
                p = np.linalg.solve(Qr, -grad)
            except np.linalg.LinAlgError:
                p = np.linalg.lstsq(Qr, -grad, rcond=None)[0]
            lam = np.zeros(0)
        else:
            Aw = A[working]
            k = len(working)
            kkt = np.zeros((n_v + k, n_v + k))
            kkt[:n_v, :n_v] = Qr
            kkt[:n_v, n_v:] = Aw.T
            kkt[n_v:, :n_v] = Aw
            rhs = np.concatenate([-grad, np.zeros(k)])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
            p = sol[:n_v]
            lam = sol[n_v:]
        if np.max(np.abs(p), initial=0.0) <= 1e-11 * (1.0 + float(np.linalg.norm(v))):
            if lam.size == 0 or lam.min() >= -DUAL_TOL:
                duals = np.zeros(n_c)
                if working:
                    duals[working] = np.maximum(lam, 0.0)
                return v, duals
            drop = int(np.argmin(lam))
            in_working[working[drop]] = False
            working.pop(drop)
            continue
        alpha = 1.0
        blocking = -1
        Ap = A @ p if n_c else np.zeros(0)
        slack = b - A @ v if n_c else np.zeros(0)
        for i in range(n_c):
            if in_working[i]:
                continue
            d = Ap[i]
            if d > 0.0:
                step = slack[i] / d
                if step < alpha:
                    alpha = step
                    blocking = i
        if alpha < 0.0:
            alpha = 0.0
        v = v + alpha * p
        if blocking >= 0 and alpha < 1.0:
            working.append(blocking)
            in_working[blocking] = True
    raise NumericalFailure(
        f"active-set iteration exceeded {cap} iterations without converging"
    )


def _phase1_problem(A, b, reg):
    """Augmented feasibility problem min s s.t. A v - s <= b, s >= 0."""
    n_c, n_v = A.shape
    n = n_v + 1
    Qa = reg * np.eye(n)
    ca = np.zeros(n)
    ca[-1] = 1.0
    Aa = np.zeros((n_c + 1, n))
    Aa[:n_c, :n_v] = A
    Aa[:n_c, -1] = -1.0
    Aa[n_c, -1] = -1.0
    ba = np.concatenate([b, [0.0]])
    s0 = max(0.0, -float(b.min())) + 1.0 if n_c else 1.0
    start = np.zeros(n)
    start[-1] = s0
    return Qa, ca, Aa, ba, start


def _phase1(A, b, cap):
    """Return a point feasible to within FEASIBILITY_TOL, or None."""
    n_c, n_v = A.shape
    if n_c == 0 or np.all(b >= 0.0):
        return np.zeros(n_v)
    for reg in (REGULARIZATION, _PHASE1_REG):
        Qa, ca, Aa, ba, start = _phase1_problem(A, b, reg)
        va, _ = _active_set_minimize(Qa, ca, Aa, ba, start, cap)
        if va[-1] <= FEASIBILITY_TOL:
            return va[:-1]
    return None


def solve_qp(qp: QuadraticProgram) -> QpSolution:
    """Solve the QP with a primal active-set method.

    Returns Optimal with the unique regularized optimizer, Infeasible when
    the constraints are inconsistent, or Unbounded when the objective is
    unbounded below on the feasible set. Breakdown (iteration cap, failed
    post-checks) raises :class:`NumericalFailure` instead of mislabeling.
    """
    Qr = _regularize(qp.Q)
    cap = 100 * (qp.n_v + qp.n_c)
    v0 = _phase1(qp.A, qp.b, cap)
    if v0 is None:
        return QpSolution(None, float("nan"), (), QpStatus.INFEASIBLE)
    v, duals = _active_set_minimize(Qr, qp.c, qp.A, qp.b, v0, cap)
    if np.max(np.abs(v)) > UNBOUNDED_NORM:
        return QpSolution(None, float("nan"), (), QpStatus.UNBOUNDED)
    if qp.n_c:
        violation = float(np.max(qp.A @ v - qp.b))
        if violation > 10.0 * FEASIBILITY_TOL:
            raise NumericalFailure(f"converged point violates constraints by {violation:.3e}")
    residual = Qr @ v + qp.c + (qp.A.T @ duals if qp.n_c else 0.0)
    scale = max(1.0, float(np.max(np.abs(qp.c), initial=0.0)), float(np.linalg.norm(Qr @ v)))
    if np.max(np.abs(residual)) > STATIONARITY_TOL * scale:
        raise NumericalFailure("converged point fails KKT stationarity")
    return QpSolution(
        _readonly(v), qp.objective(v), _tight_set(qp.A, qp.b, v), QpStatus.OPTIMAL, _readonly(duals)
    )


def _enumerate_candidates(Qr, qp_Q, c, A, b):
    """Best KKT candidate over every subset of tight constraints.

    Returns (v, duals, objective) for the feasible candidate of least
    objective (ties within TIE_TOL broken by smallest 2-norm), or None.
    """
    n_c, n_v = A.shape
    best = None  # (objective, norm, v, duals)
    for size in range(n_c + 1):
        for subset in itertools.combinations(range(n_c), size):
            if size == 0:
                try:
                    v = np.linalg.solve(Qr, -c)
                except np.linalg.LinAlgError:
                    v = np.linalg.lstsq(Qr, -c, rcond=None)[0]
                lam_s = np.zeros(0)
            else:
                idx = list(subset)
                As = A[idx]
                kkt = np.zeros((n_v + size, n_v + size))
                kkt[:n_v, :n_v] = Qr
                kkt[:n_v, n_v:] = As.T
                kkt[n_v:, :n_v] = As
                rhs = np.concatenate([-c, b[idx]])
                try:
                    sol = np.linalg.solve(kkt, rhs)
                except np.linalg.LinAlgError:
                    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
                if np.max(np.abs(kkt @ sol - rhs)) > 1e-7 * max(1.0, float(np.max(np.abs(rhs)))):
                    continue  # tight system inconsistent for this subset
                v = sol[:n_v]
                lam_s = sol[n_v:]
                if lam_s.min() < -DUAL_TOL:
                    continue
            if n_c and np.max(A @ v - b) > FEASIBILITY_TOL:
                continue
            obj = float(0.5 * v @ qp_Q @ v + c @ v)
            norm = float(np.linalg.norm(v))
            if (
                best is None
                or obj < best[0] - TIE_TOL
                or (abs(obj - best[0]) <= TIE_TOL and norm < best[1] - 1e-12)
            ):
                duals = np.zeros(n_c)
                if size:
                    duals[list(subset)] = np.maximum(lam_s, 0.0)
                best = (obj, norm, v, duals)
    return best


def solve_kkt_oracle(qp: QuadraticProgram) -> QpSolution:
    """Brute-force verification oracle: enumerate every active-set candidate.

    Solves the same regularized problem as :func:`solve_qp` so the two agree
    on degenerate (flat-direction) inputs. Infeasibility is proved by
    enumerating a phase-1 problem the same way.
    """
    if qp.n_c > _ORACLE_MAX_CONSTRAINTS:
        raise ValueError(
            f"oracle enumerates 2^n_c subsets; n_c={qp.n_c} exceeds {_ORACLE_MAX_CONSTRAINTS}"
        )
    Qr = _regularize(qp.Q)
    best = _enumerate_candidates(Qr, qp.Q, qp.c, qp.A, qp.b)
    if best is not None:
        obj, _, v, duals = best
        if np.max(np.abs(v)) > UNBOUNDED_NORM:
            return QpSolution(None, float("nan"), (), QpStatus.UNBOUNDED)
        return QpSolution(
            _readonly(v), obj, _tight_set(qp.A, qp.b, v), QpStatus.OPTIMAL, _readonly(duals)
        )
    Qa, ca, Aa, ba, _ = _phase1_problem(qp.A, qp.b, _PHASE1_REG)
    aug = _enumerate_candidates(Qa, Qa, ca, Aa, ba)
    if aug is None:
        raise NumericalFailure("phase-1 enumeration produced no candidate")
    if aug[2][-1] > FEASIBILITY_TOL:
        return QpSolution(None, float("nan"), (), QpStatus.INFEASIBLE)
    raise NumericalFailure("feasible problem yielded no KKT candidate")
