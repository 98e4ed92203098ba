"""Closed-loop integration under zero-order-hold inputs with event detection.

Fixed-step RK4 drives the flow between executions; event-triggered runs
poll the trigger margins at every substep and localize crossings by
bisection, self-triggered runs integrate straight to the precomputed next
execution time. Traces keep the full signal history so figures and
post-hoc audits can be produced from one artifact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .controllers import GreedyWeights, baseline_qp_solution, greedy_control, state_feedback_control
from .systems import ControlAffineSystem, SafetySpec, safety_margin, stability_margin
from .triggers import (
    LipschitzData,
    TriggerCase,
    TriggerEventKind,
    TriggerParams,
    et_case,
    st_gamma_digital,
    tau_star,
)

_TIME_EPS = 1e-12


class ControllerKind(Enum):
    GREEDY_ET = "greedy_et"
    GREEDY_ST = "greedy_st"
    GREEDY_CONTINUOUS = "greedy_continuous"
    BASELINE_QP = "baseline_qp"
    STATE_FEEDBACK = "state_feedback"


class DomainExit(RuntimeError):
    """The state left the domain box; carries the last in-domain sample."""

    def __init__(self, t: float, x: np.ndarray, last_t: float, last_x: np.ndarray):
        super().__init__(f"state left the domain at t={t:.6f}")
        self.t = t
        self.x = x
        self.last_t = last_t
        self.last_x = last_x
        self.trace: "Trace | None" = None


@dataclass(frozen=True)
class SimConfig:
    """Horizon, integration step, and event/audit resolutions."""

    t_end: float = 15.0
    dt: float = 0.01
    x0: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0]))
    event_bisection_tol: float = 1e-9
    dense_check_factor: int = 20

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.t_end < 0:
            raise ValueError("t_end must be nonnegative")
        if self.t_end > 0 and self.dt > self.t_end:
            raise ValueError("dt must not exceed t_end")
        if self.event_bisection_tol >= self.dt:
            raise ValueError("event bisection tolerance must be below dt")
        if self.dense_check_factor < 1:
            raise ValueError("dense_check_factor must be at least 1")
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)


@dataclass(frozen=True)
class Sample:
    """One trace row: state, held input, and the tracked signals."""

    t: float
    x: np.ndarray
    u: np.ndarray
    V: float
    h: float
    p: float
    q: float


@dataclass(frozen=True)
class Execution:
    """A controller execution: time, new held input, and what caused it.

    ``event`` is the trigger event that ended the previous interval (None
    for the initial execution, for periodic re-solves, and for the forced
    advance after an infeasible solve).
    """

    t: float
    u: np.ndarray
    event: TriggerEventKind | None
    active_set: tuple[int, ...]
    feasible: bool
    x: np.ndarray


@dataclass(frozen=True)
class TraceSummary:
    update_count: int
    min_inter_execution: float
    min_h: float
    final_V: float
    final_state: np.ndarray


@dataclass
class Trace:
    """Time-stamped closed-loop record of one run."""

    controller: ControllerKind | None
    samples: list[Sample]
    executions: list[Execution]

    def summary(self) -> TraceSummary:
        times = [e.t for e in self.executions]
        gaps = np.diff(times)
        return TraceSummary(
            update_count=len(self.executions),
            min_inter_execution=float(gaps.min()) if gaps.size else math.inf,
            min_h=min(s.h for s in self.samples),
            final_V=self.samples[-1].V,
            final_state=self.samples[-1].x,
        )


def _rk4_step(sys: ControlAffineSystem, x: np.ndarray, u: np.ndarray, h: float) -> np.ndarray:
    k1 = sys.velocity(x, u)
    k2 = sys.velocity(x + 0.5 * h * k1, u)
    k3 = sys.velocity(x + 0.5 * h * k2, u)
    k4 = sys.velocity(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_zoh(
    sys: ControlAffineSystem,
    x: np.ndarray,
    u: np.ndarray,
    t0: float,
    t1: float,
    dt: float,
) -> list[tuple[float, np.ndarray]]:
    """Integrate xdot = f + g u with fixed-step RK4; final sample exactly at t1."""
    if t1 <= t0:
        raise ValueError("t1 must exceed t0")
    if dt <= 0:
        raise ValueError("dt must be positive")
    u = np.atleast_1d(np.asarray(u, dtype=float))
    xc = np.array(x, dtype=float)
    out = [(t0, xc.copy())]
    span = t1 - t0
    n_steps = max(1, int(math.ceil(span / dt - _TIME_EPS)))
    t_prev = t0
    for i in range(1, n_steps + 1):
        t_next = t1 if i == n_steps else t0 + i * dt
        xc = _rk4_step(sys, xc, u, t_next - t_prev)
        if not sys.domain.contains(xc, tol=1e-9):
            raise DomainExit(t_next, xc, out[-1][0], out[-1][1])
        out.append((t_next, xc.copy()))
        t_prev = t_next
    return out


def locate_event(
    signal: Callable[[float], float], t_lo: float, t_hi: float, tol: float
) -> float:
    """Bisect a bracketed sign change; returns the right bracket endpoint."""
    s_lo = signal(t_lo)
    s_hi = signal(t_hi)
    if not (s_lo > 0.0 >= s_hi):
        raise ValueError(
            f"sign change not bracketed: signal({t_lo})={s_lo}, signal({t_hi})={s_hi}"
        )
    while t_hi - t_lo > tol:
        t_mid = 0.5 * (t_lo + t_hi)
        if signal(t_mid) > 0.0:
            t_lo = t_mid
        else:
            t_hi = t_mid
    return t_hi


class _Recorder:
    """Accumulates samples/executions and evaluates the tracked signals."""

    def __init__(self, spec: SafetySpec, sys: ControlAffineSystem, controller: ControllerKind):
        self.spec = spec
        self.sys = sys
        self.controller = controller
        self.samples: list[Sample] = []
        self.executions: list[Execution] = []

    def sample(self, t: float, x: np.ndarray, u: np.ndarray) -> None:
        self.samples.append(
            Sample(
                t=t,
                x=x.copy(),
                u=u.copy(),
                V=float(self.spec.V.value(x)),
                h=float(self.spec.h.value(x)),
                p=stability_margin(self.spec, self.sys, x, u),
                q=safety_margin(self.spec, self.sys, x, u),
            )
        )

    def execute(self, t, x, u, event, active_set, feasible) -> None:
        self.executions.append(
            Execution(t=t, u=u.copy(), event=event, active_set=tuple(active_set),
                      feasible=feasible, x=x.copy())
        )
        self.sample(t, x, u)

    def trace(self) -> Trace:
        return Trace(self.controller, self.samples, self.executions)


def run_closed_loop(
    controller: ControllerKind | str,
    spec: SafetySpec,
    sys: ControlAffineSystem,
    cfg: SimConfig,
    params: TriggerParams,
    w: GreedyWeights,
    gain: np.ndarray | None = None,
    baseline_weight: float = 2.0,
    baseline_relax: float = 1.0,
) -> Trace:
    """Simulate one controller over [0, t_end] and record the full trace.

    greedy_et re-solves at trigger events (margin zero crossings / budget);
    greedy_st at self-scheduled instants from the sampled-prediction map;
    greedy_continuous and baseline_qp re-solve every integration step;
    state_feedback applies u = K x every step. Infeasible solves hold the
    previous input, flag the execution, and force one substep of progress.
    """
    kind = ControllerKind(controller) if not isinstance(controller, ControllerKind) else controller
    x0 = sys.require_in_domain(np.asarray(cfg.x0, dtype=float))
    rec = _Recorder(spec, sys, kind)
    if cfg.t_end == 0.0:
        rec.sample(0.0, x0, np.zeros(sys.m))
        return rec.trace()
    try:
        if kind in (ControllerKind.GREEDY_CONTINUOUS, ControllerKind.BASELINE_QP,
                    ControllerKind.STATE_FEEDBACK):
            _run_periodic(kind, spec, sys, cfg, params, w, gain,
                          baseline_weight, baseline_relax, rec, x0)
        elif kind is ControllerKind.GREEDY_ET:
            _run_event_triggered(spec, sys, cfg, params, w, rec, x0)
        else:
            _run_self_triggered(spec, sys, cfg, params, w, rec, x0)
    except DomainExit as exc:
        exc.trace = rec.trace()
        raise
    return rec.trace()


def _advance(sys, x, u, t_next, h):
    x_next = _rk4_step(sys, x, u, h)
    if not sys.domain.contains(x_next, tol=1e-9):
        raise DomainExit(t_next, x_next, t_next - h, x)
    return x_next


def _run_periodic(kind, spec, sys, cfg, params, w, gain, bw, bp, rec, x0):
    if kind is ControllerKind.STATE_FEEDBACK and gain is None:
        raise ValueError("state_feedback requires a gain matrix")
    n_steps = max(1, int(math.ceil(cfg.t_end / cfg.dt - _TIME_EPS)))
    x = x0
    u_prev = np.zeros(sys.m)
    for i in range(n_steps):
        t_i = i * cfg.dt
        if kind is ControllerKind.STATE_FEEDBACK:
            u, active, feasible = state_feedback_control(gain, x), (), True
        elif kind is ControllerKind.BASELINE_QP:
            sol = baseline_qp_solution(spec, sys, x, bw, bp)
            u, active, feasible = sol.v_star[: sys.m].copy(), sol.active_set, True
        else:
            dec = greedy_control(spec, sys, x, w)
            if dec.feasible:
                u, active, feasible = dec.u, dec.active_set, True
            else:
                u, active, feasible = u_prev, (), False
        rec.execute(t_i, x, u, None, active, feasible)
        t_next = cfg.t_end if i == n_steps - 1 else (i + 1) * cfg.dt
        x = _advance(sys, x, u, t_next, t_next - t_i)
        u_prev = u
    rec.sample(cfg.t_end, x, u_prev)


def _solve_held(spec, sys, x, w, u_prev):
    dec = greedy_control(spec, sys, x, w)
    if dec.feasible:
        return dec.u, dec.active_set, True
    return u_prev.copy(), (), False


def _run_event_triggered(spec, sys, cfg, params, w, rec, x0):
    t_k = 0.0
    x = x0
    u_prev = np.zeros(sys.m)
    cause: TriggerEventKind | None = None
    while t_k < cfg.t_end - _TIME_EPS:
        u_k, active, feasible = _solve_held(spec, sys, x, w, u_prev)
        rec.execute(t_k, x, u_k, cause, active, feasible)
        u_prev = u_k
        if not feasible:
            # Held inputs can leave the monitored margins nonpositive right
            # at t_k; force one substep so time advances (no Zeno loop).
            t_next = min(t_k + cfg.dt, cfg.t_end)
            x = _advance(sys, x, u_k, t_next, t_next - t_k)
            t_k, cause = t_next, None
            continue
        case = et_case(spec, sys, x, u_k, params)
        monitor_p = case is TriggerCase.STABILIZING
        budget = t_k + params.tau_bd if case is TriggerCase.SAFETY_ONLY else math.inf
        t_stop = min(cfg.t_end, budget)
        t_cur, x_cur = t_k, x
        fired: TriggerEventKind | None = None
        t_fire, x_fire = t_stop, x
        j = 0
        while fired is None:
            j += 1
            t_next = min(t_k + j * cfg.dt, t_stop)
            x_next = _advance(sys, x_cur, u_k, t_next, t_next - t_cur)
            crossings: list[tuple[float, TriggerEventKind]] = []
            if monitor_p and stability_margin(spec, sys, x_next, u_k) <= 0.0:
                crossings.append(
                    (_locate_margin_zero(stability_margin, spec, sys, x_cur, u_k,
                                         t_cur, t_next, cfg.event_bisection_tol),
                     TriggerEventKind.STABILITY_ZERO)
                )
            if safety_margin(spec, sys, x_next, u_k) <= 0.0:
                crossings.append(
                    (_locate_margin_zero(safety_margin, spec, sys, x_cur, u_k,
                                         t_cur, t_next, cfg.event_bisection_tol),
                     TriggerEventKind.SAFETY_ZERO)
                )
            if crossings:
                t_fire, fired = min(crossings, key=lambda c: c[0])
                x_fire = _rk4_step(sys, x_cur, u_k, t_fire - t_cur)
                break
            if t_next >= t_stop - _TIME_EPS:
                if t_stop < cfg.t_end - _TIME_EPS:
                    fired = TriggerEventKind.BUDGET_EXPIRED
                    t_fire, x_fire = t_stop, x_next
                else:
                    rec.sample(cfg.t_end, x_next, u_k)
                    return
                break
            rec.sample(t_next, x_next, u_k)
            t_cur, x_cur = t_next, x_next
        t_k, x, cause = t_fire, x_fire, fired


def _locate_margin_zero(margin, spec, sys, x_base, u, t_base, t_hi, tol):
    def signal(t: float) -> float:
        if t <= t_base:
            return margin(spec, sys, x_base, u)
        return margin(spec, sys, _rk4_step(sys, x_base, u, t - t_base), u)

    if signal(t_base) <= 0.0:
        return t_base
    return locate_event(signal, t_base, t_hi, tol)


def _run_self_triggered(spec, sys, cfg, params, w, rec, x0):
    t_k = 0.0
    x = x0
    u_prev = np.zeros(sys.m)
    cause: TriggerEventKind | None = None
    while t_k < cfg.t_end - _TIME_EPS:
        u_k, active, feasible = _solve_held(spec, sys, x, w, u_prev)
        rec.execute(t_k, x, u_k, cause, active, feasible)
        u_prev = u_k
        gamma = st_gamma_digital(spec, sys, x, u_k, params)
        t_exec = min(t_k + gamma, cfg.t_end)
        t_cur, x_cur = t_k, x
        j = 0
        while t_cur < t_exec - _TIME_EPS:
            j += 1
            t_next = min(t_k + j * cfg.dt, t_exec)
            x_cur = _advance(sys, x_cur, u_k, t_next, t_next - t_cur)
            t_cur = t_next
            if t_next >= t_exec - _TIME_EPS and t_exec >= cfg.t_end - _TIME_EPS:
                rec.sample(cfg.t_end, x_cur, u_k)
            elif t_next < t_exec - _TIME_EPS:
                rec.sample(t_next, x_cur, u_k)
        t_k, x, cause = t_exec, x_cur, TriggerEventKind.SELF_SCHEDULED


@dataclass(frozen=True)
class IntervalAudit:
    """Dense re-simulation minima over one inter-execution interval."""

    index: int
    t_start: float
    t_end: float
    duration: float
    case: TriggerCase
    ended_by: TriggerEventKind | None
    feasible: bool
    p_at_start: float
    q_at_start: float
    min_p: float
    min_q: float
    min_h: float


@dataclass(frozen=True)
class TraceReport:
    """Post-hoc audit of a trace against the trigger guarantees."""

    controller: ControllerKind | None
    intervals: tuple[IntervalAudit, ...]
    min_inter_execution: float
    min_h: float
    tau_star_bound: float | None

    def to_text(self) -> str:
        lines = [
            f"controller: {self.controller.value if self.controller else 'unknown'}",
            f"executions: {len(self.intervals)}",
            f"min inter-execution time: {self.min_inter_execution:.6g}"
            + (f"  (lower bound {self.tau_star_bound:.6g})" if self.tau_star_bound else ""),
            f"min h over dense resampling: {self.min_h:.6g}",
        ]
        for it in self.intervals:
            lines.append(
                f"  [{it.index:3d}] t={it.t_start:8.4f} dur={it.duration:7.4f} "
                f"{it.case.value:11s} ended_by={it.ended_by.value if it.ended_by else 'horizon':16s} "
                f"min_p={it.min_p: .3e} min_q={it.min_q: .3e}"
            )
        return "\n".join(lines)


def verify_trace(
    trace: Trace,
    spec: SafetySpec,
    sys: ControlAffineSystem,
    params: TriggerParams,
    lip: LipschitzData | None = None,
    dense_step: float | None = None,
) -> TraceReport:
    """Audit a trace: re-simulate each interval densely and record minima.

    Each inter-execution interval is re-integrated from its recorded start
    state under the held input at ``dense_step`` resolution (default
    delta/20), tracking the minima of p, q, and h. No mutation, no
    tolerance judgments: acceptance checks read the raw minima.
    """
    step = params.delta / 20.0 if dense_step is None else dense_step
    audits: list[IntervalAudit] = []
    horizon = trace.samples[-1].t if trace.samples else 0.0
    execs = trace.executions
    for k, ex in enumerate(execs):
        t_stop = execs[k + 1].t if k + 1 < len(execs) else horizon
        ended_by = execs[k + 1].event if k + 1 < len(execs) else None
        duration = t_stop - ex.t
        p0 = stability_margin(spec, sys, ex.x, ex.u)
        q0 = safety_margin(spec, sys, ex.x, ex.u)
        case = TriggerCase.STABILIZING if p0 >= params.eps_clf else TriggerCase.SAFETY_ONLY
        min_p, min_q = p0, q0
        min_h = float(spec.h.value(ex.x))
        if duration > _TIME_EPS:
            n = max(1, int(math.ceil(duration / step - _TIME_EPS)))
            x = np.array(ex.x, dtype=float)
            t_prev = ex.t
            for i in range(1, n + 1):
                t_next = t_stop if i == n else ex.t + i * (duration / n)
                x = _rk4_step(sys, x, ex.u, t_next - t_prev)
                t_prev = t_next
                min_p = min(min_p, stability_margin(spec, sys, x, ex.u))
                min_q = min(min_q, safety_margin(spec, sys, x, ex.u))
                min_h = min(min_h, float(spec.h.value(x)))
        audits.append(
            IntervalAudit(
                index=k, t_start=ex.t, t_end=t_stop, duration=duration, case=case,
                ended_by=ended_by, feasible=ex.feasible, p_at_start=p0, q_at_start=q0,
                min_p=min_p, min_q=min_q, min_h=min_h,
            )
        )
    gaps = np.diff([e.t for e in execs])
    return TraceReport(
        controller=trace.controller,
        intervals=tuple(audits),
        min_inter_execution=float(gaps.min()) if gaps.size else math.inf,
        min_h=min((a.min_h for a in audits), default=min(s.h for s in trace.samples)),
        tau_star_bound=tau_star(lip, params) if lip is not None else None,
    )
