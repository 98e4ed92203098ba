"""Execution-timing rules: event-trigger conditions and self-trigger maps.

Event-triggered executions watch the margins p (stability) and q (safety)
along the flow under the held input and fire on their zero crossings (with
a time budget when the interval started without a useful stability margin).
Self-triggered executions precompute the next execution time: either from
Lipschitz constants of p and q and a bound on the local speed, or from a
sampled-prediction map suited to digital implementation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .systems import (
    Box,
    ControlAffineSystem,
    SafetySpec,
    lie_derivatives,
    safety_margin,
    stability_margin,
)


class DegenerateSystem(ValueError):
    """Estimated speed/Lipschitz bounds vanish; trigger maps undefined."""


@dataclass(frozen=True)
class TriggerParams:
    """Thresholds and timing parameters shared by both trigger styles.

    eps_clf: stability-margin level deciding the interval's case.
    eps_cbf: safety-slack floor (shared with the greedy QP weights).
    tau_bd: budget bounding how long a stability violation may persist.
    delta: sampling period of the digital self-trigger map.
    tau_min / tau_max: clamp on self-triggered intervals.
    """

    eps_clf: float = 0.1
    eps_cbf: float = 0.1
    tau_bd: float = 0.5
    delta: float = 0.2
    tau_min: float = 0.0
    tau_max: float = 4.0

    def __post_init__(self):
        if self.eps_clf <= 0 or self.eps_cbf <= 0:
            raise ValueError("eps_clf and eps_cbf must be positive")
        if self.tau_bd <= 0 or self.delta <= 0 or self.tau_max <= 0:
            raise ValueError("tau_bd, delta, tau_max must be positive")
        if self.tau_min < 0:
            raise ValueError("tau_min must be nonnegative")
        if self.tau_min > self.tau_max:
            raise ValueError("tau_min must not exceed tau_max")
        if self.delta > self.tau_max:
            raise ValueError("delta must not exceed tau_max")


@dataclass(frozen=True)
class LipschitzData:
    """Lipschitz constants of p and q over the domain and a speed bound."""

    L_clf: float
    L_cbf: float
    M: float

    def __post_init__(self):
        if self.L_clf <= 0 or self.L_cbf <= 0 or self.M <= 0:
            raise ValueError("Lipschitz constants and speed bound must be positive")


class TriggerCase(Enum):
    STABILIZING = "stabilizing"
    SAFETY_ONLY = "safety_only"


class TriggerEventKind(Enum):
    STABILITY_ZERO = "stability_zero"
    SAFETY_ZERO = "safety_zero"
    BUDGET_EXPIRED = "budget_expired"
    SELF_SCHEDULED = "self_scheduled"


def et_case(
    spec: SafetySpec, sys: ControlAffineSystem, x_k: np.ndarray, u_k: np.ndarray,
    params: TriggerParams,
) -> TriggerCase:
    """Stabilizing iff p(x_k, u_k) >= eps_clf (boundary inclusive)."""
    p = stability_margin(spec, sys, x_k, u_k)
    return TriggerCase.STABILIZING if p >= params.eps_clf else TriggerCase.SAFETY_ONLY


def et_should_fire(
    case: TriggerCase,
    spec: SafetySpec,
    sys: ControlAffineSystem,
    x: np.ndarray,
    u_k: np.ndarray,
    t: float,
    t_k: float,
    params: TriggerParams,
) -> TriggerEventKind | None:
    """Event-trigger poll at (t, x) for an interval started at t_k.

    Stabilizing intervals fire when p or q reaches zero; safety-only
    intervals fire when q reaches zero or the budget tau_bd expires. The
    simulator localizes the actual crossing instants by bisection.
    """
    if t < t_k:
        raise ValueError("poll time precedes the interval start")
    if case is TriggerCase.STABILIZING:
        if stability_margin(spec, sys, x, u_k) <= 0.0:
            return TriggerEventKind.STABILITY_ZERO
        if safety_margin(spec, sys, x, u_k) <= 0.0:
            return TriggerEventKind.SAFETY_ZERO
        return None
    if safety_margin(spec, sys, x, u_k) <= 0.0:
        return TriggerEventKind.SAFETY_ZERO
    if t - t_k >= params.tau_bd - 1e-12:
        return TriggerEventKind.BUDGET_EXPIRED
    return None


def tau_star(lip: LipschitzData, params: TriggerParams) -> float:
    """Uniform lower bound on event-triggered inter-execution times."""
    return min(
        params.eps_clf / (lip.M * lip.L_clf),
        params.eps_cbf / (lip.M * lip.L_cbf),
        params.tau_bd,
    )


def _rk4(sys: ControlAffineSystem, x: np.ndarray, u: np.ndarray, h: float) -> np.ndarray:
    k1 = sys.velocity(x, u)
    k2 = sys.velocity(x + 0.5 * h * k1, u)
    k3 = sys.velocity(x + 0.5 * h * k2, u)
    k4 = sys.velocity(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _speed_sup(
    sys: ControlAffineSystem, x0: np.ndarray, u: np.ndarray, horizon: float, n_steps: int = 200
) -> tuple[float, float | None]:
    """(sup ||f + g u|| over [0, horizon], exit time if the domain is left)."""
    x = np.array(x0, dtype=float)
    sup = float(np.linalg.norm(sys.velocity(x, u)))
    if horizon <= 0.0:
        return sup, None
    h = horizon / n_steps
    for i in range(n_steps):
        x = _rk4(sys, x, u, h)
        if not sys.domain.contains(x, tol=1e-9):
            return sup, (i + 1) * h
        sup = max(sup, float(np.linalg.norm(sys.velocity(x, u))))
    return sup, None


def _domain_speed_bound(
    sys: ControlAffineSystem, u: np.ndarray, points_per_axis: int = 33
) -> float:
    axes = [np.linspace(lo, hi, points_per_axis) for lo, hi in zip(sys.domain.lower, sys.domain.upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    sup = 0.0
    for x in pts:
        sup = max(sup, float(np.linalg.norm(sys.velocity(x, u))))
    return 1.05 * sup


def st_gamma_lipschitz(
    spec: SafetySpec,
    sys: ControlAffineSystem,
    x_k: np.ndarray,
    u_k: np.ndarray,
    lip_local: tuple[float, float],
    params: TriggerParams,
    max_iterations: int = 50,
) -> float:
    """Lipschitz-based self-trigger interval at the execution state x_k.

    Gamma = min(eps_clf / (L_clf M_k), eps_cbf / (L_cbf M_k)) when the
    interval starts with p >= eps_clf, else min(eps_cbf / (L_cbf M_k),
    tau_bd). M_k, the speed bound over the interval itself, is resolved by
    a fixed point: start from the speed at x_k, integrate over the current
    Gamma, grow M to 1.02x the trajectory sup, repeat. M never decreases
    across iterations, so Gamma is non-increasing and the loop terminates;
    if it fails to settle, the conservative uniform domain bound is used.
    """
    l_clf, l_cbf = lip_local
    if l_clf <= 0 or l_cbf <= 0:
        raise DegenerateSystem("Lipschitz constants must be positive")
    u_k = np.atleast_1d(np.asarray(u_k, dtype=float))
    stabilizing = stability_margin(spec, sys, x_k, u_k) >= params.eps_clf

    def gamma_for(m_k: float) -> float:
        if stabilizing:
            return min(params.eps_clf / (l_clf * m_k), params.eps_cbf / (l_cbf * m_k))
        return min(params.eps_cbf / (l_cbf * m_k), params.tau_bd)

    m_k = max(float(np.linalg.norm(sys.velocity(np.asarray(x_k, float), u_k))), 1e-12)
    gamma = gamma_for(m_k)
    exit_cap = math.inf
    for _ in range(max_iterations):
        sup, t_exit = _speed_sup(sys, x_k, u_k, min(gamma, exit_cap))
        if t_exit is not None:
            exit_cap = min(exit_cap, t_exit)
        m_next = max(m_k, 1.02 * sup, 1e-12)
        gamma_next = min(gamma_for(m_next), exit_cap)
        if abs(gamma_next - gamma) < 1e-6:
            return gamma_next
        m_k, gamma = m_next, gamma_next
    m_k = max(m_k, _domain_speed_bound(sys, u_k))
    return min(gamma_for(m_k), exit_cap)


def st_gamma_digital(
    spec: SafetySpec,
    sys: ControlAffineSystem,
    x_k: np.ndarray,
    u_k: np.ndarray,
    params: TriggerParams,
    substeps: int = 10,
) -> float:
    """Sampled-prediction self-trigger interval Gamma = max(tau_min, n delta).

    n is the longest prefix n <= floor(tau_max/delta) such that the margins
    are nonnegative at every predicted sample x(t_k + m delta), m = 1..n,
    under the held input (the nominal model is integrated forward; with no
    disturbance it coincides with the plant). When the interval starts with
    a useful stability margin (p >= eps_clf) both p and q are required on
    the prefix; otherwise the stability constraint is already compromised,
    only q is required, and the interval is capped at the violation budget
    tau_bd, mirroring the event-trigger case split. An empty prefix is
    floored at one sampling period so the interval stays positive;
    predictions leaving the domain truncate the prefix.
    """
    u_k = np.atleast_1d(np.asarray(u_k, dtype=float))
    stabilizing = stability_margin(spec, sys, x_k, u_k) >= params.eps_clf
    horizon = params.tau_max if stabilizing else min(params.tau_max, params.tau_bd)
    n_max = int(math.floor(params.tau_max / params.delta + 1e-12))
    n_scan = min(n_max, int(math.ceil(horizon / params.delta - 1e-12)))
    x = np.array(x_k, dtype=float)
    h = params.delta / substeps
    n = 0
    for m in range(1, n_scan + 1):
        left_domain = False
        for _ in range(substeps):
            x = _rk4(sys, x, u_k, h)
            if not sys.domain.contains(x, tol=1e-9):
                left_domain = True
                break
        if left_domain:
            break
        q_bar = safety_margin(spec, sys, x, u_k)
        ok = q_bar >= 0.0
        if ok and stabilizing:
            ok = stability_margin(spec, sys, x, u_k) >= 0.0
        if ok:
            n = m
        else:
            break
    gamma = max(params.tau_min, n * params.delta, params.delta)
    if not stabilizing:
        gamma = min(gamma, params.tau_bd)
    return gamma


def tc3_should_fire(
    spec: SafetySpec, sys: ControlAffineSystem, x: np.ndarray, u_k: np.ndarray
) -> bool:
    """Combined trigger for the margin-guaranteed controller.

    At an execution the CLF factor L_gV u - b_clf is <= -eps1 and the CBF
    factor L_gh u + b_cbf is >= eps2, so their product starts negative;
    the trigger fires when either factor reaches zero, i.e. when the
    product's sign change to >= 0 is detected.
    """
    u_k = np.atleast_1d(np.asarray(u_k, dtype=float))
    l_fv, l_gv = lie_derivatives(spec.V, sys, x)
    l_fh, l_gh = lie_derivatives(spec.h, sys, x)
    b_clf = -l_fv - float(spec.gamma.apply(float(spec.V.value(np.asarray(x, float)))))
    b_cbf = l_fh + float(spec.alpha.apply(float(spec.h.value(np.asarray(x, float)))))
    clf_factor = float(l_gv @ u_k) - b_clf
    cbf_factor = float(l_gh @ u_k) + b_cbf
    return clf_factor * cbf_factor >= 0.0


def estimate_lipschitz(
    spec: SafetySpec,
    sys: ControlAffineSystem,
    u_range: Box,
    domain: Box | None = None,
    points_per_axis: int = 101,
    safety_factor: float = 1.05,
) -> LipschitzData:
    """Grid estimates of the Lipschitz constants of p, q and the speed bound.

    p(., u) and q(., u) are tabulated on a dense grid over the domain for u
    at the corners of ``u_range``; their gradients come from second-order
    finite differences of the tabulated values, and every estimate carries a
    small safety factor against grid undersampling.
    """
    box = sys.domain if domain is None else domain
    axes = []
    for lo, hi in zip(box.lower, box.upper):
        hi = hi if hi - lo > 1e-9 else lo + 1e-9
        axes.append(np.linspace(lo, hi, points_per_axis))
    mesh = np.meshgrid(*axes, indexing="ij")
    shape = mesh[0].shape
    pts = np.stack([m.ravel() for m in mesh], axis=-1)

    grad_v = np.empty((pts.shape[0], sys.n))
    grad_h = np.empty((pts.shape[0], sys.n))
    f_val = np.empty((pts.shape[0], sys.n))
    g_val = np.empty((pts.shape[0], sys.n, sys.m))
    h_val = np.empty(pts.shape[0])
    for i, x in enumerate(pts):
        grad_v[i] = spec.V.gradient(x)
        grad_h[i] = spec.h.gradient(x)
        f_val[i] = sys.f(x)
        g_val[i] = np.asarray(sys.g(x), dtype=float).reshape(sys.n, sys.m)
        h_val[i] = spec.h.value(x)
    alpha_h = np.array([spec.alpha.apply(float(v)) for v in h_val])
    l_fv = np.einsum("ij,ij->i", grad_v, f_val)
    l_gv = np.einsum("ij,ijk->ik", grad_v, g_val)
    l_fh = np.einsum("ij,ij->i", grad_h, f_val)
    l_gh = np.einsum("ij,ijk->ik", grad_h, g_val)

    max_grad_p = 0.0
    max_grad_q = 0.0
    max_speed = 0.0
    for u in u_range.corners():
        p = (-l_fv - l_gv @ u).reshape(shape)
        q = (l_gh @ u + l_fh + alpha_h).reshape(shape)
        speed = np.linalg.norm(f_val + np.einsum("ijk,k->ij", g_val, u), axis=1)
        max_speed = max(max_speed, float(speed.max()))
        for values, tracker in ((p, "p"), (q, "q")):
            grads = np.gradient(values, *axes)
            if len(axes) == 1:
                grads = [grads]
            norm = np.sqrt(sum(g * g for g in grads))
            peak = float(norm.max())
            if tracker == "p":
                max_grad_p = max(max_grad_p, peak)
            else:
                max_grad_q = max(max_grad_q, peak)

    if max_speed <= 1e-15 or max_grad_p <= 1e-15 or max_grad_q <= 1e-15:
        raise DegenerateSystem(
            "zero speed or flat margins on the sampled domain; trigger bounds undefined"
        )
    return LipschitzData(
        L_clf=safety_factor * max_grad_p,
        L_cbf=safety_factor * max_grad_q,
        M=safety_factor * max_speed,
    )
