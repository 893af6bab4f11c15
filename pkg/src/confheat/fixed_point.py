"""Picard iteration for the coupled system on a short time interval.

For a given space-time pair ``(f, u)`` two linear problems are solved:

* ``S1``: ``(d/dt - e^{-2u} Lap) h = e^{-2u} A_f(df, df)``, ``h(0) = f0``
  (implicit Euler in time, conjugate gradients in space);
* ``S2``: ``d/dt v = b |df|^2 e^{-2u} - a``, ``v(0) = 0`` (trapezoidal rule).

A solution of the flow is a fixed point of ``(f, u) -> (S1, S2)``.
Contraction is measured in the discrete space-time L2 norm of the pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .flow import FlowParams
from .geometry import (
    GridGeometry,
    TargetManifold,
    energy_density,
    project_to_target,
    second_fundamental,
    solve_implicit_diffusion,
)


@dataclass
class SpaceTimeField:
    """Snapshots at the uniform times ``0, dt, ..., nt * dt`` (leading axis)."""

    frames: np.ndarray
    dt: float

    @property
    def nt(self) -> int:
        return self.frames.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.nt + 1) * self.dt

    def __sub__(self, other: "SpaceTimeField") -> "SpaceTimeField":
        return SpaceTimeField(self.frames - other.frames, self.dt)


def time_grid(T: float, dt: float) -> int:
    """Number of steps ``nt`` with ``nt * dt == T``."""
    if not (T > 0 and dt > 0):
        raise ConfigError("T and dt must be positive")
    nt = int(round(T / dt))
    if nt < 1 or abs(nt * dt - T) > 1e-9 * T:
        raise ConfigError(f"T={T} is not a positive multiple of dt={dt}")
    return nt


def s1_solve(f: SpaceTimeField, u: SpaceTimeField, f0: np.ndarray, T: float, dt: float,
             geom: GridGeometry, target: TargetManifold, rtol: float = 1e-10) -> SpaceTimeField:
    """Linear parabolic solve with coefficients frozen from ``(f, u)``.

    ``(I - dt e^{-2u_k} Lap) h_{k+1} = h_k + dt e^{-2u_k} A_{f_k}(df_k, df_k)``.
    The result is not projected onto the target.
    """
    nt = time_grid(T, dt)
    if f.frames.shape[0] != nt + 1 or u.frames.shape[0] != nt + 1:
        raise ConfigError("space-time fields do not match the time grid")
    h = np.empty_like(f.frames)
    h[0] = f0
    for k in range(nt):
        w = np.exp(-2.0 * u.frames[k])
        rhs = h[k] + dt * w[..., None] * second_fundamental(f.frames[k], target, geom)
        h[k + 1] = solve_implicit_diffusion(rhs, w, dt, geom, x0=h[k], rtol=rtol)
    return SpaceTimeField(h, dt)


def s2_solve(f: SpaceTimeField, u: SpaceTimeField, params: FlowParams, T: float,
             dt: float, geom: GridGeometry) -> SpaceTimeField:
    """Trapezoidal quadrature of ``b |df|^2 e^{-2u} - a`` from 0."""
    nt = time_grid(T, dt)
    if f.frames.shape[0] != nt + 1 or u.frames.shape[0] != nt + 1:
        raise ConfigError("space-time fields do not match the time grid")
    rate = np.stack(
        [params.b * energy_density(f.frames[k], geom) * np.exp(-2.0 * u.frames[k]) - params.a
         for k in range(nt + 1)]
    )
    v = np.zeros_like(rate)
    v[1:] = np.cumsum(0.5 * dt * (rate[1:] + rate[:-1]), axis=0)
    return SpaceTimeField(v, dt)


def spacetime_l2_norm(f: SpaceTimeField, u: SpaceTimeField, geom: GridGeometry) -> float:
    """Discrete L2 norm of the pair over space-time.

    Trapezoidal weights in time, cell area in space; a unit field on a
    unit-area domain over ``T = 1`` has norm 1.
    """
    w = np.full(f.nt + 1, f.dt)
    w[0] = w[-1] = 0.5 * f.dt
    sq_f = np.sum(f.frames.reshape(f.nt + 1, -1) ** 2, axis=1)
    sq_u = np.sum(u.frames.reshape(u.nt + 1, -1) ** 2, axis=1)
    return float(np.sqrt(geom.cell_area * np.sum(w * (sq_f + sq_u))))


@dataclass
class PicardReport:
    iterates: int
    distances: list[float]
    ratios: list[float]
    converged: bool
    f: SpaceTimeField
    u: SpaceTimeField
    tol: float = 0.0
    history: list = field(default_factory=list, repr=False)

    @property
    def max_ratio(self) -> float:
        return max(self.ratios) if self.ratios else float("nan")

    def projected_f(self, target: TargetManifold) -> SpaceTimeField:
        """The fixed point's map frames projected onto the target."""
        return SpaceTimeField(
            np.stack([project_to_target(fr, target) for fr in self.f.frames]), self.f.dt
        )


def heat_flow(f0: np.ndarray, T: float, dt: float, geom: GridGeometry) -> SpaceTimeField:
    """Plain heat flow ``(d/dt - Lap) h = 0`` from ``f0`` by implicit Euler."""
    nt = time_grid(T, dt)
    h = np.empty((nt + 1,) + f0.shape)
    h[0] = f0
    ones = np.ones(geom.shape)
    for k in range(nt):
        h[k + 1] = solve_implicit_diffusion(h[k], ones, dt, geom, x0=h[k])
    return SpaceTimeField(h, dt)


def picard_iterate(f0: np.ndarray, T: float, dt: float, params: FlowParams, geom: GridGeometry,
                   target: TargetManifold, tol: float = 1e-8, max_iter: int = 20) -> PicardReport:
    """Iterate ``(f, u) <- (S1(f, u), S2(f, u))`` from ``(heat flow of f0, 0)``.

    Stops once successive iterates differ by at most ``tol``.  Running out
    of iterations is reported through ``converged=False``, not raised.
    """
    if not tol > 0:
        raise ConfigError("tol must be positive")
    nt = time_grid(T, dt)
    f = heat_flow(f0, T, dt, geom)
    u = SpaceTimeField(np.zeros((nt + 1,) + geom.shape), dt)
    distances: list[float] = []
    converged = False
    while len(distances) < max_iter:
        f_next = s1_solve(f, u, f0, T, dt, geom, target)
        u_next = s2_solve(f, u, params, T, dt, geom)
        distances.append(spacetime_l2_norm(f_next - f, u_next - u, geom))
        f, u = f_next, u_next
        if distances[-1] <= tol:
            converged = True
            break
    ratios = [distances[k + 1] / distances[k] for k in range(len(distances) - 1) if distances[k] > 0]
    return PicardReport(
        iterates=len(distances), distances=distances, ratios=ratios,
        converged=converged, f=f, u=u, tol=tol,
    )
