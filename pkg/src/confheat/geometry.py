"""Finite-difference geometry on a flat periodic rectangle.

Scalar fields are arrays of shape ``(nx, ny)``; map fields carry a trailing
component axis, ``(nx, ny, L)``.  Axis 0 runs along x, axis 1 along y, and
both wrap around.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .errors import (
    ConfigError,
    ProjectionDegenerateError,
    SolverError,
    StateCorruptionError,
)

DEFAULT_ON_MANIFOLD_TOL = 1e-9
# below this norm the radial projection onto the sphere is refused
PROJECTION_MIN_NORM = 0.5


@dataclass(frozen=True)
class GridGeometry:
    """Uniform periodic grid on ``[0, lx) x [0, ly)``."""

    nx: int
    ny: int
    lx: float = 2 * math.pi
    ly: float = 2 * math.pi

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny:
            raise ConfigError("grid sizes must be integers")
        if self.nx < 8 or self.ny < 8:
            raise ConfigError(f"grid must be at least 8x8, got {self.nx}x{self.ny}")
        if not (self.lx > 0 and self.ly > 0):
            raise ConfigError("side lengths must be positive")

    @property
    def hx(self) -> float:
        return self.lx / self.nx

    @property
    def hy(self) -> float:
        return self.ly / self.ny

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    @property
    def area(self) -> float:
        return self.lx * self.ly

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Gridpoint coordinates ``(X, Y)``, each of shape ``(nx, ny)``."""
        x = np.arange(self.nx) * self.hx
        y = np.arange(self.ny) * self.hy
        return np.meshgrid(x, y, indexing="ij")

    def displacement(self, x0: float, y0: float) -> tuple[np.ndarray, np.ndarray]:
        """Minimal-image displacement of every gridpoint from ``(x0, y0)``."""
        X, Y = self.coords()
        dx = (X - x0 + 0.5 * self.lx) % self.lx - 0.5 * self.lx
        dy = (Y - y0 + 0.5 * self.ly) % self.ly - 0.5 * self.ly
        return dx, dy

    def distance(self, x0: float, y0: float) -> np.ndarray:
        """Flat torus distance of every gridpoint from ``(x0, y0)``."""
        dx, dy = self.displacement(x0, y0)
        return np.hypot(dx, dy)

    def integrate(self, q: np.ndarray) -> float:
        return float(np.sum(q) * self.cell_area)


@dataclass(frozen=True)
class TargetManifold:
    """Target of the map: a unit sphere ``S^n`` in ``R^(n+1)`` or flat ``R^L``."""

    kind: str
    embedding_dim: int

    def __post_init__(self):
        if self.kind not in ("sphere", "euclidean"):
            raise ConfigError(f"unknown target kind {self.kind!r}")
        if self.embedding_dim < 1 or (self.kind == "sphere" and self.embedding_dim < 2):
            raise ConfigError("embedding dimension too small for target")

    @classmethod
    def unit_sphere(cls, n: int = 2) -> "TargetManifold":
        return cls("sphere", n + 1)

    @classmethod
    def euclidean(cls, dim: int) -> "TargetManifold":
        return cls("euclidean", dim)

    @property
    def is_sphere(self) -> bool:
        return self.kind == "sphere"

    @property
    def curvature_bound(self) -> float:
        return 1.0 if self.is_sphere else 0.0


def check_field(q: np.ndarray, geom: GridGeometry) -> None:
    if q.ndim not in (2, 3) or q.shape[:2] != geom.shape:
        raise ConfigError(f"field of shape {q.shape} does not match grid {geom.shape}")


def check_map(f: np.ndarray, geom: GridGeometry, target: TargetManifold) -> None:
    if f.ndim != 3 or f.shape != (geom.nx, geom.ny, target.embedding_dim):
        raise ConfigError(
            f"map of shape {f.shape} does not match grid {geom.shape} "
            f"and embedding dimension {target.embedding_dim}"
        )


def laplacian(q: np.ndarray, geom: GridGeometry) -> np.ndarray:
    """Periodic 5-point Laplacian, applied componentwise to map fields."""
    check_field(q, geom)
    lap_x = (np.roll(q, -1, axis=0) - 2.0 * q + np.roll(q, 1, axis=0)) / geom.hx**2
    lap_y = (np.roll(q, -1, axis=1) - 2.0 * q + np.roll(q, 1, axis=1)) / geom.hy**2
    return lap_x + lap_y


def gradient(q: np.ndarray, geom: GridGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Centered-difference partial derivatives ``(d/dx, d/dy)``."""
    check_field(q, geom)
    qx = (np.roll(q, -1, axis=0) - np.roll(q, 1, axis=0)) / (2.0 * geom.hx)
    qy = (np.roll(q, -1, axis=1) - np.roll(q, 1, axis=1)) / (2.0 * geom.hy)
    return qx, qy


def forward_gradient(q: np.ndarray, geom: GridGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences; the 5-point Laplacian is minus their adjoint."""
    check_field(q, geom)
    qx = (np.roll(q, -1, axis=0) - q) / geom.hx
    qy = (np.roll(q, -1, axis=1) - q) / geom.hy
    return qx, qy


def energy_density(f: np.ndarray, geom: GridGeometry) -> np.ndarray:
    """Pointwise ``|df|^2`` with respect to the flat metric (centered differences)."""
    if f.ndim == 2:
        f = f[..., None]
    fx, fy = gradient(f, geom)
    return np.sum(fx * fx + fy * fy, axis=-1)


def second_fundamental(
    f: np.ndarray,
    target: TargetManifold,
    geom: GridGeometry,
    df2: np.ndarray | None = None,
) -> np.ndarray:
    """``A_f(df, df)``: ``|df|^2 f`` on the unit sphere, zero for flat targets.

    No on-manifold check is made, so this is usable on the unprojected
    iterates of the fixed-point construction.
    """
    if not target.is_sphere:
        return np.zeros_like(f)
    if df2 is None:
        df2 = energy_density(f, geom)
    return df2[..., None] * f


def manifold_defect(f: np.ndarray, target: TargetManifold) -> float:
    """``max | |f| - 1 |`` over the grid; zero for flat targets."""
    if not target.is_sphere:
        return 0.0
    return float(np.max(np.abs(np.linalg.norm(f, axis=-1) - 1.0)))


def tension_field(
    f: np.ndarray,
    target: TargetManifold,
    geom: GridGeometry,
    tol: float = DEFAULT_ON_MANIFOLD_TOL,
    df2: np.ndarray | None = None,
) -> np.ndarray:
    """Embedded tension ``Lap f + A_f(df, df)``.

    Raises StateCorruptionError if ``f`` is further than ``1e3 * tol`` from
    the sphere.
    """
    check_map(f, geom, target)
    if target.is_sphere:
        defect = manifold_defect(f, target)
        if not defect <= 1e3 * tol:
            raise StateCorruptionError(f"map is off the sphere by {defect:.3e}")
    return laplacian(f, geom) + second_fundamental(f, target, geom, df2)


def tangential_part(f: np.ndarray, v: np.ndarray, target: TargetManifold) -> np.ndarray:
    """Component of ``v`` tangent to the target at ``f`` (assumes ``|f| = 1``)."""
    if not target.is_sphere:
        return v
    return v - np.sum(v * f, axis=-1, keepdims=True) * f


def project_to_target(f: np.ndarray, target: TargetManifold) -> np.ndarray:
    """Nearest-point projection: ``f / |f|`` on the sphere, identity otherwise."""
    if not target.is_sphere:
        return f
    norm = np.linalg.norm(f, axis=-1, keepdims=True)
    smallest = float(np.min(norm))
    if not smallest >= PROJECTION_MIN_NORM:
        raise ProjectionDegenerateError(
            f"|f| = {smallest:.3e} < {PROJECTION_MIN_NORM}; time step too large?"
        )
    # norms already within rounding of 1 are left alone so projection is idempotent
    norm = np.where(np.abs(norm - 1.0) <= 4 * np.finfo(float).eps, 1.0, norm)
    return f / norm


def solve_implicit_diffusion(
    rhs: np.ndarray,
    weight: np.ndarray,
    dt: float,
    geom: GridGeometry,
    x0: np.ndarray | None = None,
    rtol: float = 1e-10,
    maxiter: int | None = None,
) -> np.ndarray:
    """Solve ``(I - dt * weight * Lap) x = rhs`` for a scalar or map field.

    The system is symmetrized by dividing through by ``weight`` (> 0) and
    solved per component with Jacobi-preconditioned conjugate gradients.
    """
    check_field(rhs, geom)
    if weight.shape != geom.shape:
        raise ConfigError("weight field does not match grid")
    if maxiter is None:
        maxiter = 10 * geom.nx * geom.ny
    n = geom.nx * geom.ny
    inv_w = 1.0 / weight
    diag = (inv_w + dt * (2.0 / geom.hx**2 + 2.0 / geom.hy**2)).ravel()

    def matvec(v):
        q = v.reshape(geom.shape)
        return (inv_w * q - dt * laplacian(q, geom)).ravel()

    op = LinearOperator((n, n), matvec=matvec, dtype=float)
    precond = LinearOperator((n, n), matvec=lambda v: v / diag, dtype=float)

    vector = rhs.ndim == 3
    b_all = rhs if vector else rhs[..., None]
    guess = None if x0 is None else (x0 if vector else x0[..., None])
    out = np.empty_like(b_all)
    for c in range(b_all.shape[-1]):
        b = (inv_w * b_all[..., c]).ravel()
        start = b_all[..., c].ravel() if guess is None else guess[..., c].ravel()
        x, info = cg(op, b, x0=start, rtol=rtol, atol=0.0, maxiter=maxiter, M=precond)
        if info != 0:
            raise SolverError(f"conjugate gradient did not converge (info={info})")
        out[..., c] = x.reshape(geom.shape)
    return out if vector else out[..., 0]


def cutoff_profile(dist: np.ndarray, r: float) -> np.ndarray:
    """C^1 radial cutoff: 1 for ``dist <= r``, 0 for ``dist >= 2r``.

    Cubic smoothstep in between; its slope never exceeds ``1.5 / r``.
    """
    s = np.clip((dist - r) / r, 0.0, 1.0)
    return 1.0 - s * s * (3.0 - 2.0 * s)
