"""Command-line entry point.

Subcommands: ``run`` (execute the benchmark and write artifacts),
``figures`` (render the four figures from written traces), ``verify``
(audit a trace CSV against the trigger guarantees), ``selftest`` (QP
solver/oracle equivalence and invariant suites). Exit codes: 0 success,
1 runtime failure, 2 configuration error. Set ETCBF_LOG=debug|info|...
for log verbosity.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .experiment import (
    ALL_CONTROLLERS,
    ConfigError,
    ExperimentConfig,
    render_figures,
    run_benchmark,
    trace_from_csv,
)
from .qp import QpStatus, QuadraticProgram, solve_kkt_oracle, solve_qp
from .simulate import verify_trace
from .systems import make_double_integrator
from .triggers import estimate_lipschitz
from .systems import Box

log = logging.getLogger("etcbf")


def _setup_logging() -> None:
    level = os.environ.get("ETCBF_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _cmd_run(args: argparse.Namespace) -> int:
    config = ExperimentConfig.from_yaml(args.config) if args.config else ExperimentConfig()
    if args.controllers:
        wanted = tuple(c.strip() for c in args.controllers.split(",") if c.strip())
        config = ExperimentConfig.from_dict({**config.to_dict(), "controllers": list(wanted)})
    out_dir = args.out if args.out else config.output_dir
    table, _, all_ok = run_benchmark(config, out_dir)
    print(table.to_text())
    print(f"\nartifacts written to {Path(out_dir).resolve()}")
    return 0 if all_ok else 1


def _cmd_figures(args: argparse.Namespace) -> int:
    try:
        paths = render_figures(args.out)
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    for p in paths:
        print(p)
    return 0


def _cmd_verify(args: argparse.Namespace) -> int:
    trace_file = Path(args.trace)
    if not trace_file.exists():
        print(f"trace file not found: {trace_file}", file=sys.stderr)
        return 1
    cfg_path = Path(args.config) if args.config else trace_file.parent / "config_used.yaml"
    if not cfg_path.exists():
        print(f"config not found: {cfg_path} (pass --config)", file=sys.stderr)
        return 1
    config = ExperimentConfig.from_yaml(cfg_path)
    sys_obj, spec = config.build_system()
    params = config.trigger_params()
    trace = trace_from_csv(trace_file)
    xs = np.array([s.x for s in trace.samples])
    us = np.array([s.u for s in trace.samples])
    pad = 1e-6
    lip = estimate_lipschitz(
        spec, sys_obj,
        u_range=Box(lower=us.min(axis=0) - pad, upper=us.max(axis=0) + pad),
        domain=Box(lower=xs.min(axis=0) - pad, upper=xs.max(axis=0) + pad),
    )
    report = verify_trace(trace, spec, sys_obj, params, lip=lip)
    print(report.to_text())
    return 0


def _cmd_selftest(args: argparse.Namespace) -> int:
    failures = 0

    def check(name: str, ok: bool, detail: str = "") -> None:
        nonlocal failures
        print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f"  ({detail})" if detail else ""))
        if not ok:
            failures += 1

    rng = np.random.default_rng(args.seed)
    worst_obj = 0.0
    worst_v = 0.0
    mismatched = 0
    for _ in range(args.qp_count):
        n_v = int(rng.integers(1, 5))
        n_c = int(rng.integers(0, 9))
        mat = rng.uniform(-1.0, 1.0, size=(n_v, n_v))
        qp = QuadraticProgram(
            Q=mat.T @ mat + 1e-3 * np.eye(n_v),
            c=rng.uniform(-2.0, 2.0, size=n_v),
            A=rng.uniform(-2.0, 2.0, size=(n_c, n_v)),
            b=rng.uniform(-2.0, 2.0, size=n_c),
        )
        got = solve_qp(qp)
        ref = solve_kkt_oracle(qp)
        if got.status is not ref.status:
            mismatched += 1
        elif got.status is QpStatus.OPTIMAL:
            worst_obj = max(worst_obj, abs(got.objective - ref.objective))
            worst_v = max(worst_v, float(np.max(np.abs(got.v_star - ref.v_star))))
    check(
        f"QP solver matches enumeration oracle on {args.qp_count} random problems",
        mismatched == 0 and worst_obj <= 1e-6 and worst_v <= 1e-5,
        f"status mismatches={mismatched}, max |dobj|={worst_obj:.2e}, max |dv|={worst_v:.2e}",
    )

    sys_obj, spec = make_double_integrator()
    try:
        spec.V.check_gradient(sys_obj.domain, n_points=200)
        spec.h.check_gradient(sys_obj.domain, n_points=200)
        check("analytic gradients match finite differences", True)
    except ValueError as exc:
        check("analytic gradients match finite differences", False, str(exc))

    from .controllers import GreedyWeights, greedy_control

    dec = greedy_control(spec, sys_obj, np.array([1.0, 1.0]), GreedyWeights())
    check(
        "greedy QP closed-form check at x=[1,1]",
        dec.feasible
        and abs(dec.u[0] + 3.31 / 3.0) < 1e-6
        and abs(dec.rho1 + 2.69) < 1e-6
        and abs(dec.rho2 - 0.1) < 1e-8,
    )
    return 0 if failures == 0 else 1


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(
        prog="etcbf",
        description="Event-/self-triggered CLF-CBF controller benchmark",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the benchmark and write artifacts")
    p_run.add_argument("--config", help="YAML config file (defaults reproduce the benchmark)")
    p_run.add_argument("--out", help="output directory (overrides config)")
    p_run.add_argument(
        "--controllers",
        help=f"comma-separated subset of: {','.join(ALL_CONTROLLERS)}",
    )
    p_run.set_defaults(func=_cmd_run)

    p_fig = sub.add_parser("figures", help="render figures from written traces")
    p_fig.add_argument("--out", required=True, help="directory holding the trace CSVs")
    p_fig.set_defaults(func=_cmd_figures)

    p_ver = sub.add_parser("verify", help="audit a trace CSV")
    p_ver.add_argument("--trace", required=True, help="trace CSV to audit")
    p_ver.add_argument("--config", help="config file (default: config_used.yaml beside the trace)")
    p_ver.set_defaults(func=_cmd_verify)

    p_self = sub.add_parser("selftest", help="QP oracle and invariant suites")
    p_self.add_argument("--qp-count", type=int, default=500)
    p_self.add_argument("--seed", type=int, default=0)
    p_self.set_defaults(func=_cmd_selftest)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit 1
        log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
