"""Benchmark orchestration: config files, trace CSVs, summaries, figures.

The default configuration reproduces the double-integrator comparison of
five controllers over a 15 s horizon from x0 = [1, 1]. Every run writes one
flat CSV per controller (samples with execution rows flagged), a summary
table (text and CSV), and a resolved copy of the configuration so figures
and audits can be regenerated from the output directory alone.
"""
from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "etcbf"

import matplotlib.pyplot as plt
import numpy as np
import yaml

from .controllers import GreedyWeights
from .simulate import (
    ControllerKind,
    DomainExit,
    Execution,
    Sample,
    SimConfig,
    Trace,
    run_closed_loop,
)
from .systems import (
    Box,
    ClassKappa,
    ControlAffineSystem,
    SafetySpec,
    ScalarField,
    make_double_integrator,
)
from .triggers import TriggerEventKind, TriggerParams

ALL_CONTROLLERS = tuple(k.value for k in ControllerKind)

_LABELS = {
    "greedy_et": "Greedy ET",
    "greedy_st": "Greedy ST",
    "greedy_continuous": "Greedy (continuous)",
    "baseline_qp": "CLF-CBF QP",
    "state_feedback": "State feedback",
}


class ConfigError(ValueError):
    """Configuration file is malformed (unknown key, bad type/value)."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Complete description of one benchmark invocation."""

    system: str = "double_integrator"
    controllers: tuple[str, ...] = ALL_CONTROLLERS
    eps_clf: float = 0.1
    eps_cbf: float = 0.1
    tau_bd: float = 0.5
    delta: float = 0.2
    tau_min: float = 0.0
    tau_max: float = 4.0
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 0.0
    t_end: float = 15.0
    dt: float = 0.01
    x0: tuple[float, ...] = (1.0, 1.0)
    event_bisection_tol: float = 1e-9
    dense_check_factor: int = 20
    gain: tuple[float, ...] = (-0.5, -1.0)
    baseline_weight: float = 2.0
    baseline_relax: float = 1.0
    output_dir: str = "etcbf_out"
    seed: int = 0

    def __post_init__(self):
        unknown = [c for c in self.controllers if c not in ALL_CONTROLLERS]
        if unknown:
            raise ConfigError(f"unknown controllers: {unknown}; valid: {list(ALL_CONTROLLERS)}")
        if not self.controllers:
            raise ConfigError("at least one controller must be selected")

    def trigger_params(self) -> TriggerParams:
        return TriggerParams(
            eps_clf=self.eps_clf, eps_cbf=self.eps_cbf, tau_bd=self.tau_bd,
            delta=self.delta, tau_min=self.tau_min, tau_max=self.tau_max,
        )

    def weights(self) -> GreedyWeights:
        return GreedyWeights(w1=self.w1, w2=self.w2, w3=self.w3, eps_cbf=self.eps_cbf)

    def sim_config(self) -> SimConfig:
        return SimConfig(
            t_end=self.t_end, dt=self.dt, x0=np.asarray(self.x0, dtype=float),
            event_bisection_tol=self.event_bisection_tol,
            dense_check_factor=self.dense_check_factor,
        )

    def build_system(self) -> tuple[ControlAffineSystem, SafetySpec]:
        if self.system == "double_integrator":
            return make_double_integrator()
        return load_system_file(self.system)

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "controllers": list(self.controllers),
            "triggers": {
                "eps_clf": self.eps_clf, "eps_cbf": self.eps_cbf, "tau_bd": self.tau_bd,
                "delta": self.delta, "tau_min": self.tau_min, "tau_max": self.tau_max,
            },
            "weights": {"w1": self.w1, "w2": self.w2, "w3": self.w3},
            "sim": {
                "t_end": self.t_end, "dt": self.dt, "x0": list(self.x0),
                "event_bisection_tol": self.event_bisection_tol,
                "dense_check_factor": self.dense_check_factor,
            },
            "state_feedback": {"gain": list(self.gain)},
            "baseline": {"weight": self.baseline_weight, "relax_penalty": self.baseline_relax},
            "output_dir": self.output_dir,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        allowed = {
            "system", "controllers", "triggers", "weights", "sim",
            "state_feedback", "baseline", "output_dir", "seed",
        }
        _reject_unknown(data, allowed, "")
        kwargs: dict = {}
        if "system" in data:
            kwargs["system"] = _expect(data["system"], str, "system")
        if "controllers" in data:
            ctrls = data["controllers"]
            if not isinstance(ctrls, (list, tuple)):
                raise ConfigError("controllers must be a list")
            kwargs["controllers"] = tuple(str(c) for c in ctrls)
        if "triggers" in data:
            sect = _section(data["triggers"], "triggers",
                            {"eps_clf", "eps_cbf", "tau_bd", "delta", "tau_min", "tau_max"})
            for key in sect:
                kwargs[key] = _number(sect[key], f"triggers.{key}")
        if "weights" in data:
            sect = _section(data["weights"], "weights", {"w1", "w2", "w3"})
            for key in sect:
                kwargs[key] = _number(sect[key], f"weights.{key}")
        if "sim" in data:
            sect = _section(data["sim"], "sim",
                            {"t_end", "dt", "x0", "event_bisection_tol", "dense_check_factor"})
            for key, val in sect.items():
                if key == "x0":
                    kwargs["x0"] = tuple(_number(v, "sim.x0[]") for v in val)
                elif key == "dense_check_factor":
                    kwargs[key] = int(_number(val, f"sim.{key}"))
                else:
                    kwargs[key] = _number(val, f"sim.{key}")
        if "state_feedback" in data:
            sect = _section(data["state_feedback"], "state_feedback", {"gain"})
            if "gain" in sect:
                kwargs["gain"] = tuple(_number(v, "state_feedback.gain[]") for v in sect["gain"])
        if "baseline" in data:
            sect = _section(data["baseline"], "baseline", {"weight", "relax_penalty"})
            if "weight" in sect:
                kwargs["baseline_weight"] = _number(sect["weight"], "baseline.weight")
            if "relax_penalty" in sect:
                kwargs["baseline_relax"] = _number(sect["relax_penalty"], "baseline.relax_penalty")
        if "output_dir" in data:
            kwargs["output_dir"] = _expect(data["output_dir"], str, "output_dir")
        if "seed" in data:
            kwargs["seed"] = int(_number(data["seed"], "seed"))
        try:
            return cls(**kwargs)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_yaml(cls, path: str | Path) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        return cls.from_dict(data if data is not None else {})

    def write_yaml(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)

    def canonical_hash(self) -> str:
        """Stable hash of the resolved configuration (reproducibility anchor)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _reject_unknown(mapping: dict, allowed: set[str], prefix: str) -> None:
    for key in mapping:
        if key not in allowed:
            where = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            raise ConfigError(f"unknown config key: {where!r}")


def _section(value, name: str, allowed: set[str]) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    _reject_unknown(value, allowed, name)
    return value


def _expect(value, typ, name: str):
    if not isinstance(value, typ):
        raise ConfigError(f"{name} must be of type {typ.__name__}")
    return value


def _number(value, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be a number")
    return float(value)


def load_system_file(path: str | Path) -> tuple[ControlAffineSystem, SafetySpec]:
    """Load a user system from a YAML file of symbolic expressions.

    Expressions for f, g, V, h are parsed symbolically so the gradients of
    V and h are exact (derived, not finite-differenced). Required keys:
    state (list of symbol names), f, g, V, h, domain {lower, upper};
    optional gamma/alpha are 'identity' (default) or {'linear': k}.
    """
    import sympy as sp

    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"system file {path} must be a mapping")
    _reject_unknown(data, {"state", "f", "g", "V", "h", "gamma", "alpha", "domain"}, "")
    for key in ("state", "f", "g", "V", "h", "domain"):
        if key not in data:
            raise ConfigError(f"system file missing key {key!r}")
    symbols = sp.symbols(list(data["state"]))
    n = len(symbols)

    def lambdify_vector(exprs):
        parsed = [sp.sympify(e) for e in exprs]
        fn = sp.lambdify(symbols, parsed, modules="numpy")
        return lambda x, fn=fn: np.asarray(fn(*x), dtype=float)

    f_fn = lambdify_vector(data["f"])
    g_rows = data["g"]
    m = len(g_rows[0])
    g_parsed = sp.Matrix([[sp.sympify(e) for e in row] for row in g_rows])
    g_lam = sp.lambdify(symbols, g_parsed, modules="numpy")
    g_fn = lambda x: np.asarray(g_lam(*x), dtype=float).reshape(n, m)

    def scalar_field(expr_text):
        expr = sp.sympify(expr_text)
        grad = [sp.diff(expr, s) for s in symbols]
        val = sp.lambdify(symbols, expr, modules="numpy")
        grd = sp.lambdify(symbols, grad, modules="numpy")
        return ScalarField(
            value=lambda x, val=val: float(val(*x)),
            gradient=lambda x, grd=grd: np.asarray(grd(*x), dtype=float),
        )

    def kappa(section):
        if section is None or section == "identity":
            return ClassKappa.identity()
        if isinstance(section, dict) and "linear" in section:
            return ClassKappa.linear(float(section["linear"]))
        raise ConfigError(f"unsupported class-K spec: {section!r}")

    dom = data["domain"]
    if not isinstance(dom, dict) or set(dom) != {"lower", "upper"}:
        raise ConfigError("domain must be a mapping with keys lower/upper")
    box = Box(lower=[float(v) for v in dom["lower"]], upper=[float(v) for v in dom["upper"]])
    sys_obj = ControlAffineSystem(n=n, m=m, f=f_fn, g=g_fn, domain=box)
    spec = SafetySpec(
        V=scalar_field(data["V"]), h=scalar_field(data["h"]),
        gamma=kappa(data.get("gamma")), alpha=kappa(data.get("alpha")),
    )
    spec.V.check_gradient(box, n_points=50)
    spec.h.check_gradient(box, n_points=50)
    return sys_obj, spec


# ---------------------------------------------------------------------------
# Trace CSV serialization
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def trace_to_csv(trace: Trace, path: str | Path, n: int, m: int) -> None:
    """Write one flat CSV: every sample a row, execution rows flagged."""
    header = (
        ["t"]
        + [f"x{i + 1}" for i in range(n)]
        + [f"u{i + 1}" for i in range(m)]
        + ["V", "h", "p", "q", "is_execution", "event_kind", "feasible"]
    )
    lines = [",".join(header)]
    exec_iter = iter(trace.executions)
    next_exec = next(exec_iter, None)
    for s in trace.samples:
        row = [_fmt(s.t)] + [_fmt(v) for v in s.x] + [_fmt(v) for v in s.u]
        row += [_fmt(s.V), _fmt(s.h), _fmt(s.p), _fmt(s.q)]
        if next_exec is not None and s.t == next_exec.t and np.array_equal(s.u, next_exec.u):
            row += ["1", next_exec.event.value if next_exec.event else "",
                    "1" if next_exec.feasible else "0"]
            next_exec = next(exec_iter, None)
        else:
            row += ["0", "", ""]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def trace_from_csv(path: str | Path, controller: ControllerKind | None = None) -> Trace:
    """Parse a trace CSV back into a Trace (active sets are not serialized)."""
    text = Path(path).read_text(encoding="utf-8").strip().splitlines()
    header = text[0].split(",")
    n = sum(1 for c in header if c.startswith("x"))
    m = sum(1 for c in header if c.startswith("u"))
    samples: list[Sample] = []
    executions: list[Execution] = []
    for line in text[1:]:
        parts = line.split(",")
        t = float(parts[0])
        x = np.array([float(v) for v in parts[1 : 1 + n]])
        u = np.array([float(v) for v in parts[1 + n : 1 + n + m]])
        V, h, p, q = (float(v) for v in parts[1 + n + m : 5 + n + m])
        is_exec, event_kind, feasible = parts[5 + n + m : 8 + n + m]
        samples.append(Sample(t=t, x=x, u=u, V=V, h=h, p=p, q=q))
        if is_exec == "1":
            executions.append(
                Execution(
                    t=t, u=u.copy(),
                    event=TriggerEventKind(event_kind) if event_kind else None,
                    active_set=(), feasible=feasible == "1", x=x.copy(),
                )
            )
    if controller is None:
        stem = Path(path).stem
        if stem.startswith("trace_"):
            name = stem[len("trace_"):]
            if name in ALL_CONTROLLERS:
                controller = ControllerKind(name)
    return Trace(controller=controller, samples=samples, executions=executions)


def trace_path(out_dir: str | Path, controller: str) -> Path:
    return Path(out_dir) / f"trace_{controller}.csv"


# ---------------------------------------------------------------------------
# Summary table
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SummaryRow:
    controller: str
    update_count: int
    min_inter_execution: float
    min_h: float
    final_V: float
    final_state_norm: float
    wall_time: float
    status: str = "ok"


@dataclass
class SummaryTable:
    rows: list[SummaryRow] = field(default_factory=list)

    def to_text(self) -> str:
        header = ["controller", "updates", "min_inter_exec", "min_h",
                  "final_V", "final_|x|", "wall_s", "status"]
        data = [
            [r.controller, str(r.update_count), f"{r.min_inter_execution:.6g}",
             f"{r.min_h:.6g}", f"{r.final_V:.6g}", f"{r.final_state_norm:.6g}",
             f"{r.wall_time:.3f}", r.status]
            for r in self.rows
        ]
        widths = [max(len(header[i]), *(len(d[i]) for d in data)) if data else len(header[i])
                  for i in range(len(header))]
        fmt_line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths))
        return "\n".join([fmt_line(header)] + [fmt_line(d) for d in data])

    def to_csv(self, path: str | Path) -> None:
        lines = ["controller,update_count,min_inter_execution,min_h,final_V,"
                 "final_state_norm,wall_time,status"]
        for r in self.rows:
            lines.append(
                f"{r.controller},{r.update_count},{_fmt(r.min_inter_execution)},"
                f"{_fmt(r.min_h)},{_fmt(r.final_V)},{_fmt(r.final_state_norm)},"
                f"{_fmt(r.wall_time)},{r.status}"
            )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def from_csv(cls, path: str | Path) -> "SummaryTable":
        lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
        rows = []
        for line in lines[1:]:
            c, uc, mie, mh, fv, fsn, wt, st = line.split(",")
            rows.append(SummaryRow(c, int(uc), float(mie), float(mh), float(fv),
                                   float(fsn), float(wt), st))
        return cls(rows)


def summary_row_from_trace(name: str, trace: Trace, wall_time: float,
                           status: str = "ok") -> SummaryRow:
    s = trace.summary()
    return SummaryRow(
        controller=name,
        update_count=s.update_count,
        min_inter_execution=s.min_inter_execution,
        min_h=s.min_h,
        final_V=s.final_V,
        final_state_norm=float(np.linalg.norm(s.final_state)),
        wall_time=wall_time,
        status=status,
    )


# ---------------------------------------------------------------------------
# Benchmark runner
# ---------------------------------------------------------------------------

def _run_one(name, spec, sys_obj, cfg, params, weights, config):
    start = time.perf_counter()
    trace = run_closed_loop(
        name, spec, sys_obj, cfg, params, weights,
        gain=np.asarray(config.gain, dtype=float).reshape(1, -1),
        baseline_weight=config.baseline_weight,
        baseline_relax=config.baseline_relax,
    )
    return trace, time.perf_counter() - start


def run_benchmark(
    config: ExperimentConfig, out_dir: str | Path | None = None
) -> tuple[SummaryTable, dict[str, Trace], bool]:
    """Run every configured controller, write artifacts, return the summary.

    Returns (table, traces, all_ok); all_ok is False when any run aborted
    with a domain exit (its partial trace is still written and its row is
    marked).
    """
    out = Path(out_dir if out_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    sys_obj, spec = config.build_system()
    params = config.trigger_params()
    weights = config.weights()
    cfg = config.sim_config()

    results: dict[str, tuple[Trace, float, str]] = {}

    def task(name: str):
        start = time.perf_counter()
        try:
            trace, wall = _run_one(name, spec, sys_obj, cfg, params, weights, config)
            return name, trace, wall, "ok"
        except DomainExit as exc:
            return name, exc.trace, time.perf_counter() - start, "domain_exit"

    with ThreadPoolExecutor(max_workers=len(config.controllers)) as pool:
        for name, trace, wall, status in pool.map(task, config.controllers):
            results[name] = (trace, wall, status)

    table = SummaryTable()
    all_ok = True
    traces: dict[str, Trace] = {}
    for name in config.controllers:
        trace, wall, status = results[name]
        traces[name] = trace
        trace_to_csv(trace, trace_path(out, name), sys_obj.n, sys_obj.m)
        table.rows.append(summary_row_from_trace(name, trace, wall, status))
        if status != "ok":
            all_ok = False
    table.to_csv(out / "summary.csv")
    (out / "summary.txt").write_text(table.to_text() + "\n", encoding="utf-8")
    config.write_yaml(out / "config_used.yaml")
    return table, traces, all_ok


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

_FIGURE_NAMES = (
    "fig_phase_portrait.svg",
    "fig_control_inputs.svg",
    "fig_lyapunov.svg",
    "fig_trigger_signals.svg",
)


def build_figures(
    traces: dict[str, Trace], spec: SafetySpec, sys_obj: ControlAffineSystem
) -> dict[str, plt.Figure]:
    """Assemble the four benchmark figures from in-memory traces."""
    figs: dict[str, plt.Figure] = {}
    names = list(traces)

    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    xs = np.concatenate([[s.x[0] for s in tr.samples] for tr in traces.values()])
    ys = np.concatenate([[s.x[1] for s in tr.samples] for tr in traces.values()])
    pad = 0.4
    x_lo, x_hi = min(xs.min(), -0.2) - pad, max(xs.max(), 1.2) + pad
    y_lo, y_hi = min(ys.min(), -1.2) - pad, max(ys.max(), 0.2) + pad
    gx, gy = np.meshgrid(np.linspace(x_lo, x_hi, 240), np.linspace(y_lo, y_hi, 240))
    hz = np.empty_like(gx)
    for i in range(gx.shape[0]):
        for j in range(gx.shape[1]):
            hz[i, j] = spec.h.value(np.array([gx[i, j], gy[i, j]]))
    ax.contourf(gx, gy, hz, levels=[-np.inf, 0.0], colors=["0.8"])
    for name in names:
        tr = traces[name]
        ax.plot([s.x[0] for s in tr.samples], [s.x[1] for s in tr.samples],
                label=_LABELS.get(name, name))
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    ax.set_title("Phase portrait (shaded: unsafe region h < 0)")
    ax.legend(fontsize=8)
    ax.set_xlim(x_lo, x_hi)
    ax.set_ylim(y_lo, y_hi)
    figs["fig_phase_portrait.svg"] = fig

    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    for name in names:
        tr = traces[name]
        ax.plot([s.t for s in tr.samples], [s.u[0] for s in tr.samples],
                drawstyle="steps-post", label=_LABELS.get(name, name))
    ax.set_xlabel("t")
    ax.set_ylabel("u")
    ax.set_title("Control inputs")
    ax.legend(fontsize=8)
    figs["fig_control_inputs.svg"] = fig

    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    for name in names:
        tr = traces[name]
        ax.plot([s.t for s in tr.samples], [s.V for s in tr.samples],
                label=_LABELS.get(name, name))
    ax.set_xlabel("t")
    ax.set_ylabel("V(x)")
    ax.set_title("Lyapunov function values")
    ax.legend(fontsize=8)
    figs["fig_lyapunov.svg"] = fig

    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6.4, 7.2), sharex=True)
    for name in names:
        tr = traces[name]
        ts = [s.t for s in tr.samples]
        ax1.plot(ts, [-s.p for s in tr.samples], label=_LABELS.get(name, name))
        ax2.plot(ts, [s.q for s in tr.samples], label=_LABELS.get(name, name))
    ax1.axhline(0.0, color="k", linewidth=0.6)
    ax2.axhline(0.0, color="k", linewidth=0.6)
    ax1.set_ylabel("stability constraint (want < 0)")
    ax2.set_ylabel("safety constraint (want >= 0)")
    ax2.set_xlabel("t")
    ax1.set_title("Trigger condition signals")
    ax1.legend(fontsize=8)
    figs["fig_trigger_signals.svg"] = fig
    return figs


def render_figures(
    out_dir: str | Path, config: ExperimentConfig | None = None
) -> list[Path]:
    """Render the four figures from the trace CSVs in ``out_dir``.

    The resolved config (config_used.yaml, written by a run) supplies the
    system for the unsafe-region shading. Raises FileNotFoundError listing
    absent trace files.
    """
    out = Path(out_dir)
    if config is None:
        cfg_path = out / "config_used.yaml"
        if not cfg_path.exists():
            raise FileNotFoundError(f"missing {cfg_path}; run the benchmark first")
        config = ExperimentConfig.from_yaml(cfg_path)
    missing = [str(trace_path(out, c)) for c in config.controllers
               if not trace_path(out, c).exists()]
    if missing:
        raise FileNotFoundError("missing trace files: " + ", ".join(missing))
    sys_obj, spec = config.build_system()
    traces = {c: trace_from_csv(trace_path(out, c)) for c in config.controllers}
    figs = build_figures(traces, spec, sys_obj)
    paths = []
    for fname, fig in figs.items():
        path = out / fname
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(path)
    return paths
