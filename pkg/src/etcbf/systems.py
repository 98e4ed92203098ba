"""Control-affine systems, CLF/CBF scalar fields, and margin computations.

Everything downstream (controllers, triggers, the simulator) consumes the
handful of Lie-derivative quantities defined here: the constraint offsets
b_clf(x) = -L_fV - gamma(V) and b_cbf(x) = L_fh + alpha(h), and the held-input
margins p(x, u) = -L_fV - L_gV u (stability, Vdot = -p) and
q(x, u) = L_gh u + b_cbf (safety).

Gradients are supplied analytically per field, with a finite-difference
self-check available; exactness matters for KKT residuals and trigger
localization, so autodiff/numeric gradients are deliberately not used.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class DomainError(ValueError):
    """State lies outside the system's domain box."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; the bounded domain every guarantee is scoped to."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise ValueError("box must be bounded (finite edges)")
        if np.any(upper < lower):
            raise ValueError("box upper bound below lower bound")
        for name, arr in (("lower", lower), ("upper", upper)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.lower.size

    def contains(self, x: np.ndarray, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))

    def corners(self) -> np.ndarray:
        from itertools import product

        return np.array(list(product(*zip(self.lower, self.upper))), dtype=float)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)


@dataclass(frozen=True)
class ControlAffineSystem:
    """xdot = f(x) + g(x) u on a bounded domain box."""

    n: int
    m: int
    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    domain: Box

    def __post_init__(self):
        if self.domain.dim != self.n:
            raise ValueError("domain dimension does not match state dimension")
        x = self.domain.center
        fx = np.asarray(self.f(x), dtype=float)
        gx = np.asarray(self.g(x), dtype=float)
        if fx.shape != (self.n,):
            raise ValueError(f"f(x) must have shape ({self.n},), got {fx.shape}")
        if gx.shape != (self.n, self.m):
            raise ValueError(f"g(x) must have shape ({self.n}, {self.m}), got {gx.shape}")
        # Light Lipschitz sanity check: sampled difference quotients stay finite.
        rng = np.random.default_rng(0)
        pts = self.domain.sample(rng, 8)
        for a, b in zip(pts[:-1], pts[1:]):
            gap = float(np.linalg.norm(a - b))
            if gap < 1e-12:
                continue
            quot = np.linalg.norm(np.asarray(self.f(a)) - np.asarray(self.f(b))) / gap
            quot_g = np.linalg.norm(np.asarray(self.g(a)) - np.asarray(self.g(b))) / gap
            if not (np.isfinite(quot) and np.isfinite(quot_g) and quot < 1e9 and quot_g < 1e9):
                raise ValueError("f/g difference quotients unbounded on sampled domain points")

    def require_in_domain(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise ValueError(f"state must have shape ({self.n},), got {x.shape}")
        if not self.domain.contains(x, tol=1e-9):
            raise DomainError(f"state {x} outside domain box")
        return x

    def velocity(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.asarray(self.f(x), dtype=float) + np.asarray(self.g(x), dtype=float) @ u


@dataclass(frozen=True)
class ScalarField:
    """Differentiable scalar function with its exact gradient."""

    value: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]

    def check_gradient(
        self, box: Box, n_points: int = 100, seed: int = 0,
        rel_tol: float = 1e-4, abs_tol: float = 1e-5,
    ) -> None:
        """Audit the analytic gradient against central finite differences."""
        rng = np.random.default_rng(seed)
        for x in box.sample(rng, n_points):
            grad = np.asarray(self.gradient(x), dtype=float)
            fd = np.empty_like(grad)
            for j in range(x.size):
                h = 1e-6 * max(1.0, abs(x[j]))
                xp = x.copy(); xp[j] += h
                xm = x.copy(); xm[j] -= h
                fd[j] = (self.value(xp) - self.value(xm)) / (2.0 * h)
            err = float(np.linalg.norm(fd - grad))
            if err > max(abs_tol, rel_tol * float(np.linalg.norm(grad))):
                raise ValueError(f"gradient mismatch {err:.3e} at x={x}")


@dataclass(frozen=True)
class ClassKappa:
    """Strictly increasing shaping function with apply(0) = 0."""

    apply: Callable[[float], float]
    kind: str = "custom"

    @classmethod
    def identity(cls) -> "ClassKappa":
        return cls(apply=lambda r: r, kind="identity")

    @classmethod
    def linear(cls, k: float) -> "ClassKappa":
        if k <= 0:
            raise ValueError("linear gain must be positive")
        return cls(apply=lambda r: k * r, kind=f"linear({k:g})")

    @classmethod
    def custom(cls, fn: Callable[[float], float]) -> "ClassKappa":
        if abs(fn(0.0)) > 1e-12:
            raise ValueError("class-K function must vanish at zero")
        grid = np.linspace(0.0, 10.0, 41)
        vals = np.array([fn(r) for r in grid])
        if np.any(np.diff(vals) <= 0.0):
            raise ValueError("class-K function must be strictly increasing")
        return cls(apply=fn, kind="custom")


@dataclass(frozen=True)
class SafetySpec:
    """A CLF/CBF pair with their shaping functions."""

    V: ScalarField
    h: ScalarField
    gamma: ClassKappa
    alpha: ClassKappa

    def check_positive_definite(
        self, box: Box, equilibrium: np.ndarray | None = None,
        points_per_axis: int = 21, radius: float = 1e-6,
    ) -> None:
        """Grid audit: V >= 0 with V = 0 only at the target equilibrium."""
        eq = np.zeros(box.dim) if equilibrium is None else np.asarray(equilibrium, dtype=float)
        axes = [np.linspace(lo, hi, points_per_axis) for lo, hi in zip(box.lower, box.upper)]
        for x in _grid_points(axes):
            v = float(self.V.value(x))
            if v < 0.0:
                raise ValueError(f"V({x}) = {v} < 0")
            if v == 0.0 and float(np.linalg.norm(x - eq)) > radius:
                raise ValueError(f"V vanishes away from the equilibrium at {x}")


def _grid_points(axes):
    mesh = np.meshgrid(*axes, indexing="ij")
    stacked = np.stack([m.ravel() for m in mesh], axis=-1)
    return stacked


def lie_derivatives(
    field: ScalarField, sys: ControlAffineSystem, x: np.ndarray
) -> tuple[float, np.ndarray]:
    """(L_f field, L_g field) at x: the chain-rule products grad.f, grad.g."""
    x = sys.require_in_domain(x)
    grad = np.asarray(field.gradient(x), dtype=float)
    l_f = float(grad @ np.asarray(sys.f(x), dtype=float))
    l_g = grad @ np.asarray(sys.g(x), dtype=float)
    return l_f, np.atleast_1d(l_g)


def clf_bound(spec: SafetySpec, sys: ControlAffineSystem, x: np.ndarray) -> float:
    """b_clf(x) = -L_fV(x) - gamma(V(x))."""
    l_fv, _ = lie_derivatives(spec.V, sys, x)
    return -l_fv - float(spec.gamma.apply(float(spec.V.value(x))))


def cbf_bound(spec: SafetySpec, sys: ControlAffineSystem, x: np.ndarray) -> float:
    """b_cbf(x) = L_fh(x) + alpha(h(x))."""
    l_fh, _ = lie_derivatives(spec.h, sys, x)
    return l_fh + float(spec.alpha.apply(float(spec.h.value(x))))


def stability_margin(
    spec: SafetySpec, sys: ControlAffineSystem, x: np.ndarray, u: np.ndarray
) -> float:
    """p(x, u) = -L_fV - L_gV u; Vdot = -p along the held input."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    l_fv, l_gv = lie_derivatives(spec.V, sys, x)
    return -l_fv - float(l_gv @ u)


def safety_margin(
    spec: SafetySpec, sys: ControlAffineSystem, x: np.ndarray, u: np.ndarray
) -> float:
    """q(x, u) = L_gh u + b_cbf(x); nonnegative q keeps the safe set invariant."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    l_fh, l_gh = lie_derivatives(spec.h, sys, x)
    b = l_fh + float(spec.alpha.apply(float(spec.h.value(x))))
    return float(l_gh @ u) + b


def make_double_integrator() -> tuple[ControlAffineSystem, SafetySpec]:
    """The planar double-integrator benchmark instance.

    x1 is position, x2 velocity, xdot = [x2, u]. V = x1^2 + x1 x2 + x2^2,
    h keeps the state out of the disk of radius 0.3 centered at (0.5, -0.5),
    both shaping functions are identities. The domain box [-3, 3]^2 is an
    implementation choice (it comfortably contains all benchmark
    trajectories) and is recorded in the experiment config.
    """
    sys = ControlAffineSystem(
        n=2,
        m=1,
        f=lambda x: np.array([x[1], 0.0]),
        g=lambda x: np.array([[0.0], [1.0]]),
        domain=Box(lower=[-3.0, -3.0], upper=[3.0, 3.0]),
    )
    V = ScalarField(
        value=lambda x: x[0] ** 2 + x[0] * x[1] + x[1] ** 2,
        gradient=lambda x: np.array([2.0 * x[0] + x[1], x[0] + 2.0 * x[1]]),
    )
    h = ScalarField(
        value=lambda x: (x[0] - 0.5) ** 2 + (x[1] + 0.5) ** 2 - 0.09,
        gradient=lambda x: np.array([2.0 * (x[0] - 0.5), 2.0 * (x[1] + 0.5)]),
    )
    spec = SafetySpec(V=V, h=h, gamma=ClassKappa.identity(), alpha=ClassKappa.identity())
    return sys, spec
