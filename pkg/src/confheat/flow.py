"""Time stepping of the conformal heat flow.

The unknowns are a map ``f`` into the target and the conformal exponent
``u`` of the domain metric ``g = e^{2u} g0``::

    f_t = e^{-2u} tau(f)
    u_t = b e^{-2u} |df|^2 - a,        f(0) = f0, u(0) = 0.

The u-equation integrates in closed form against the running history
``J(x, t) = int_0^t e^{2as} |df|^2(x, s) ds``::

    e^{2u} = e^{-2at} (1 + 2b J),

which is how ``u`` is advanced under the default ``closed_form`` scheme.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigError, DivergenceError, ConfheatError
from .geometry import (
    GridGeometry,
    TargetManifold,
    check_map,
    energy_density,
    laplacian,
    manifold_defect,
    project_to_target,
    second_fundamental,
    solve_implicit_diffusion,
    tangential_part,
    tension_field,
)

U_SCHEMES = ("closed_form", "direct_ode")
F_SCHEMES = ("euler", "rk4", "semi_implicit")


@dataclass(frozen=True)
class FlowParams:
    a: float = 1.0
    b: float = 1.0
    dt: float = 1e-3
    t_end: float = 1.0
    u_scheme: str = "closed_form"
    f_scheme: str = "euler"
    # classical harmonic map heat flow: u frozen at zero
    baseline_classic: bool = False
    on_manifold_tol: float = 1e-9
    project: bool = True
    # explicit schemes subdivide a step when dt exceeds the stability limit
    stability_guard: bool = True
    safety: float = 0.9

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ConfigError("a and b must be positive")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if not self.t_end >= 0:
            raise ConfigError("t_end must be non-negative")
        if self.u_scheme not in U_SCHEMES:
            raise ConfigError(f"u_scheme must be one of {U_SCHEMES}")
        if self.f_scheme not in F_SCHEMES:
            raise ConfigError(f"f_scheme must be one of {F_SCHEMES}")
        if not 0 < self.safety <= 1:
            raise ConfigError("safety factor must lie in (0, 1]")

    @property
    def n_steps(self) -> int:
        n = int(round(self.t_end / self.dt))
        if abs(n * self.dt - self.t_end) > 1e-9 * max(1.0, self.t_end):
            raise ConfigError(f"t_end={self.t_end} is not a multiple of dt={self.dt}")
        return n


def check_params(params: FlowParams, target: TargetManifold) -> None:
    """Warn when b is below the squared curvature bound of the target."""
    if params.b < target.curvature_bound**2:
        warnings.warn(
            f"b={params.b} < C_N^2={target.curvature_bound**2}; local moment "
            "estimates are not expected to hold",
            stacklevel=2,
        )


@dataclass
class FlowState:
    """Map, conformal exponent and history integral at ``t = step * dt``."""

    f: np.ndarray
    u: np.ndarray
    J: np.ndarray
    t: float = 0.0
    step: int = 0

    @classmethod
    def initial(cls, f0: np.ndarray) -> "FlowState":
        zeros = np.zeros(f0.shape[:2])
        return cls(f=f0.copy(), u=zeros, J=zeros.copy(), t=0.0, step=0)

    def copy(self) -> "FlowState":
        return replace(self, f=self.f.copy(), u=self.u.copy(), J=self.J.copy())


def u_closed_form(J: np.ndarray, t: float, a: float, b: float) -> np.ndarray:
    """``u = 1/2 log(e^{-2at} (1 + 2bJ))``, evaluated in log space."""
    return -a * t + 0.5 * np.log1p(2.0 * b * J)


def step_u_ode(u: np.ndarray, df2: np.ndarray, params: FlowParams, dt: float) -> np.ndarray:
    """One classical RK4 step of ``u_t = b e^{-2u} df2 - a`` with df2 frozen."""
    a, b = params.a, params.b

    def rhs(v):
        return b * np.exp(-2.0 * v) * df2 - a

    k1 = rhs(u)
    k2 = rhs(u + 0.5 * dt * k1)
    k3 = rhs(u + 0.5 * dt * k2)
    k4 = rhs(u + dt * k3)
    return u + dt * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0


def flow_velocity(
    f: np.ndarray,
    u: np.ndarray,
    geom: GridGeometry,
    target: TargetManifold,
    tol: float = 1e-9,
    df2: np.ndarray | None = None,
) -> np.ndarray:
    """Right side ``e^{-2u} tau(f)`` of the map equation, tangential part only.

    On the sphere the discrete tension has an O(h^2) normal component that
    the projection step discards anyway; dropping it here keeps RK4 fourth
    order.
    """
    tau = tangential_part(f, tension_field(f, target, geom, tol, df2), target)
    return np.exp(-2.0 * u)[..., None] * tau


def stable_dt(u: np.ndarray, geom: GridGeometry, params: FlowParams) -> float:
    """Largest explicit step allowed by the diffusion coefficient ``e^{-2u}``."""
    wmax = 1.0 if params.baseline_classic else float(np.max(np.exp(-2.0 * u)))
    return params.safety * min(geom.hx, geom.hy) ** 2 / (4.0 * wmax)


def _check_finite(step: int, *arrays) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise DivergenceError(step)


class _Stepper:
    """Single-substep kernels for one (params, geom, target) combination."""

    def __init__(self, params: FlowParams, geom: GridGeometry, target: TargetManifold, step_index: int):
        self.p = params
        self.geom = geom
        self.target = target
        self.step_index = step_index

    def project(self, raw):
        _check_finite(self.step_index, raw)
        return project_to_target(raw, self.target) if self.p.project else raw

    def velocity(self, f, u, df2):
        if self.p.baseline_classic:
            u = np.zeros_like(u)
        return flow_velocity(f, u, self.geom, self.target, self.p.on_manifold_tol, df2)

    def u_of(self, J, t):
        return u_closed_form(J, t, self.p.a, self.p.b)

    def advance_u(self, u, J1, t1, df2, df2_1, h):
        if self.p.baseline_classic:
            return u
        if self.p.u_scheme == "closed_form":
            return self.u_of(J1, t1)
        return step_u_ode(u, 0.5 * (df2 + df2_1), self.p, h)

    def advance_J(self, J, t, h, df2, df2_1):
        if self.p.baseline_classic:
            return J
        a = self.p.a
        return J + 0.5 * h * (np.exp(2 * a * t) * df2 + np.exp(2 * a * (t + h)) * df2_1)

    def euler(self, f, u, J, t, h):
        df2 = energy_density(f, self.geom)
        f1 = self.project(f + h * self.velocity(f, u, df2))
        df2_1 = energy_density(f1, self.geom)
        J1 = self.advance_J(J, t, h, df2, df2_1)
        return f1, self.advance_u(u, J1, t + h, df2, df2_1, h), J1

    def semi_implicit(self, f, u, J, t, h):
        df2 = energy_density(f, self.geom)
        w = np.ones_like(u) if self.p.baseline_classic else np.exp(-2.0 * u)
        rhs = f + h * w[..., None] * second_fundamental(f, self.target, self.geom, df2)
        f1 = self.project(solve_implicit_diffusion(rhs, w, h, self.geom, x0=f))
        df2_1 = energy_density(f1, self.geom)
        J1 = self.advance_J(J, t, h, df2, df2_1)
        return f1, self.advance_u(u, J1, t + h, df2, df2_1, h), J1

    def rk4(self, f, u, J, t, h):
        p = self.p
        classic = p.baseline_classic
        closed = p.u_scheme == "closed_form"

        def rates(fs, us, Js, ts):
            df2 = energy_density(fs, self.geom)
            if closed and not classic:
                us = self.u_of(Js, ts)
            kf = self.velocity(fs, us, df2)
            if classic:
                return kf, 0.0, 0.0
            kJ = np.exp(2 * p.a * ts) * df2
            ku = 0.0 if closed else p.b * np.exp(-2.0 * us) * df2 - p.a
            return kf, ku, kJ

        k1 = rates(f, u, J, t)
        f2 = self.project(f + 0.5 * h * k1[0])
        k2 = rates(f2, u + 0.5 * h * k1[1], J + 0.5 * h * k1[2], t + 0.5 * h)
        f3 = self.project(f + 0.5 * h * k2[0])
        k3 = rates(f3, u + 0.5 * h * k2[1], J + 0.5 * h * k2[2], t + 0.5 * h)
        f4 = self.project(f + h * k3[0])
        k4 = rates(f4, u + h * k3[1], J + h * k3[2], t + h)

        def combine(x, i):
            return x + h * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0

        f1 = self.project(combine(f, 0))
        if classic:
            return f1, u, J
        J1 = combine(J, 2)
        u1 = self.u_of(J1, t + h) if closed else combine(u, 1)
        return f1, u1, J1


def step(
    state: FlowState,
    params: FlowParams,
    geom: GridGeometry,
    target: TargetManifold,
) -> FlowState:
    """Advance the flow by ``params.dt``.

    Under the stability guard an explicit step longer than the current
    limit is split into equal substeps, so the returned state always sits
    at ``(state.step + 1) * dt``.
    """
    new_index = state.step + 1
    t0 = state.step * params.dt
    t1 = new_index * params.dt
    stepper = _Stepper(params, geom, target, new_index)
    kernel = getattr(stepper, params.f_scheme)

    n_sub = 1
    if params.stability_guard and params.f_scheme != "semi_implicit":
        # e^{-2u} can grow at most by e^{2a dt} over the step since u_t >= -a
        growth = 1.0 if params.baseline_classic else math.exp(min(2 * params.a * params.dt, 700.0))
        limit = stable_dt(state.u, geom, params) / growth
        if not limit > 0:
            raise DivergenceError(new_index, f"stability limit collapsed at step {new_index}")
        n_sub = max(1, math.ceil(params.dt / limit))
    h = params.dt / n_sub

    f, u, J = state.f, state.u, state.J
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for i in range(n_sub):
            f, u, J = kernel(f, u, J, t0 + i * h, h)
        if params.u_scheme == "closed_form" and not params.baseline_classic:
            # pin u to the step's nominal time so the closed form holds bit-exactly
            u = u_closed_form(J, t1, params.a, params.b)
        _check_finite(new_index, f, u, J)
    return FlowState(f=f, u=u, J=J, t=t1, step=new_index)


Observer = Callable[[FlowState], None]


@dataclass
class Trajectory:
    """Outcome of :func:`run`: final state, record times and the observers."""

    initial: FlowState
    final: FlowState
    times: list[float] = field(default_factory=list)
    observers: tuple = ()
    error: Exception | None = None

    @property
    def completed(self) -> bool:
        return self.error is None


def run(
    f0: np.ndarray | None,
    params: FlowParams,
    geom: GridGeometry,
    target: TargetManifold,
    observers: Iterable[Observer] = (),
    record_every: int = 1,
    state: FlowState | None = None,
) -> Trajectory:
    """Step from ``f0`` (or a resumed ``state``) up to ``params.t_end``.

    Observers are called with the state at every step index divisible by
    ``record_every``, including the starting one; a run with no steps to
    take records nothing.  On failure the
    partially filled :class:`Trajectory` is attached to the exception as
    ``err.trajectory`` before it propagates.
    """
    if record_every < 1:
        raise ConfigError("record_every must be at least 1")
    observers = tuple(observers)
    if state is None:
        check_map(f0, geom, target)
        defect = manifold_defect(f0, target)
        if defect > params.on_manifold_tol:
            raise ConfigError(f"initial map is off the target by {defect:.3e}")
        state = FlowState.initial(f0)
    else:
        check_map(state.f, geom, target)
    check_params(params, target)

    traj = Trajectory(initial=state, final=state, observers=observers)

    def notify(s):
        traj.times.append(s.t)
        for obs in observers:
            obs(s)

    n_total = params.n_steps
    if state.step >= n_total:
        # nothing to integrate: no records either
        return traj
    if state.step % record_every == 0:
        notify(state)
    try:
        while state.step < n_total:
            state = step(state, params, geom, target)
            traj.final = state
            if state.step % record_every == 0:
                notify(state)
    except ConfheatError as err:
        traj.error = err
        err.trajectory = traj
        raise
    return traj
