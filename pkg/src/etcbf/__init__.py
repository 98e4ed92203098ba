"""Event- and self-triggered safe control with CLF-CBF quadratic programs.

Controllers solve a small QP that maximizes the slacks from the stability
(CLF) and safety (CBF) constraint boundaries, which stretches the time
until the next required execution; trigger modules decide those execution
times (event-triggered monitoring or precomputed self-triggered maps); the
simulator integrates the closed loop under zero-order-hold inputs and
records auditable traces.
"""

from .controllers import (
    ControlDecision,
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
from .experiment import (
    ConfigError,
    ExperimentConfig,
    SummaryRow,
    SummaryTable,
    render_figures,
    run_benchmark,
    trace_from_csv,
    trace_to_csv,
)
from .qp import (
    NumericalFailure,
    QpSolution,
    QpStatus,
    QuadraticProgram,
    solve_kkt_oracle,
    solve_qp,
)
from .simulate import (
    ControllerKind,
    DomainExit,
    Execution,
    Sample,
    SimConfig,
    Trace,
    integrate_zoh,
    locate_event,
    run_closed_loop,
    verify_trace,
)
from .systems import (
    Box,
    ClassKappa,
    ControlAffineSystem,
    DomainError,
    SafetySpec,
    ScalarField,
    cbf_bound,
    clf_bound,
    lie_derivatives,
    make_double_integrator,
    safety_margin,
    stability_margin,
)
from .triggers import (
    DegenerateSystem,
    LipschitzData,
    TriggerCase,
    TriggerEventKind,
    TriggerParams,
    estimate_lipschitz,
    et_case,
    et_should_fire,
    st_gamma_digital,
    st_gamma_lipschitz,
    tau_star,
    tc3_should_fire,
)

__version__ = "0.1.0"
