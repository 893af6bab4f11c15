"""Monitored quantities of the flow and checks of its exact identities.

Everything here is a pure function of recorded states, plus a few
observers that plug into :func:`confheat.flow.run` and collect series as
the flow advances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .flow import FlowParams, FlowState, flow_velocity
from .geometry import (
    GridGeometry,
    TargetManifold,
    cutoff_profile,
    energy_density,
    forward_gradient,
    tangential_part,
    tension_field,
)


def energy(f: np.ndarray, geom: GridGeometry) -> float:
    """Dirichlet energy ``1/2 int |df|^2`` (conformally invariant)."""
    return 0.5 * geom.integrate(energy_density(f, geom))


def volume(u: np.ndarray, geom: GridGeometry) -> float:
    """Area of the torus in the metric ``e^{2u} g0``."""
    return geom.integrate(np.exp(2.0 * u))


def dissipation_integral(f, u, geom, target, tol=1e-9) -> float:
    """``int e^{-2u} |tau(f)|^2``, the rate at which the energy decreases."""
    tau = tangential_part(f, tension_field(f, target, geom, tol), target)
    return geom.integrate(np.exp(-2.0 * u) * np.sum(tau * tau, axis=-1))


def dissipation_residual(
    prev: FlowState,
    nxt: FlowState,
    geom: GridGeometry,
    target: TargetManifold,
    tol: float = 1e-9,
) -> float:
    """``|dE/dt + int e^{-2u}|tau|^2|`` between two states.

    The derivative is the forward difference quotient and the integral is
    averaged over both ends.
    """
    dt = nxt.t - prev.t
    if not dt > 0:
        raise ConfigError("states must be in increasing time order")
    dE = (energy(nxt.f, geom) - energy(prev.f, geom)) / dt
    D = 0.5 * (
        dissipation_integral(prev.f, prev.u, geom, target, tol)
        + dissipation_integral(nxt.f, nxt.u, geom, target, tol)
    )
    return abs(dE + D)


def trapezoid_cumulative(y: np.ndarray, t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(y, dtype=float)
    if len(y) > 1:
        out[1:] = np.cumsum(0.5 * np.diff(t) * (y[1:] + y[:-1]))
    return out


def volume_law_deviations(times, E, V, params: FlowParams) -> np.ndarray:
    """``|V(t) - e^{-2at}(V(0) + 4b int_0^t e^{2as} E(s) ds)| / V(0)`` per record.

    The time integral is the trapezoidal rule over the recorded series.
    """
    t = np.asarray(times, dtype=float)
    E = np.asarray(E, dtype=float)
    V = np.asarray(V, dtype=float)
    a, b = params.a, params.b
    # measured from the first record so the law also applies to resumed runs
    t = t - t[0]
    hist = trapezoid_cumulative(np.exp(2 * a * t) * E, t)
    rhs = np.exp(-2 * a * t) * (V[0] + 4 * b * hist)
    return np.abs(V - rhs) / V[0]


def check_volume_law(times, E, V, params: FlowParams) -> float:
    """Largest relative deviation from the volume law over the series."""
    if len(times) == 0:
        return 0.0
    return float(np.max(volume_law_deviations(times, E, V, params)))


def volume_bound_margins(times, V, E0: float, params: FlowParams) -> np.ndarray:
    """``e^{-2at} V(0) + (2b/a) E0 - V(t)``; nonnegative where the bound holds."""
    t = np.asarray(times, dtype=float)
    t = t - t[0]
    V = np.asarray(V, dtype=float)
    return np.exp(-2 * params.a * t) * V[0] + 2 * params.b / params.a * E0 - V


@dataclass(frozen=True)
class BallRegion:
    """Ball of radius ``r`` around a gridpoint with its cutoff ``phi``.

    ``phi`` is 1 on ``B_r``, vanishes outside ``B_2r`` and has slope at
    most ``1.5 / r``.
    """

    center: tuple[int, int]
    r: float
    phi: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def around(cls, geom: GridGeometry, center: tuple[int, int], r: float) -> "BallRegion":
        if not r > 0:
            raise ConfigError("ball radius must be positive")
        if not 2 * r < 0.5 * min(geom.lx, geom.ly):
            raise ConfigError(f"ball radius {r} too large: 2r must be below half the torus width")
        i, j = center
        dist = geom.distance(i * geom.hx, j * geom.hy)
        return cls(center=(int(i) % geom.nx, int(j) % geom.ny), r=float(r), phi=cutoff_profile(dist, r))

    @classmethod
    def whole(cls, geom: GridGeometry) -> "BallRegion":
        """Degenerate region with ``phi = 1`` everywhere."""
        return cls(center=(0, 0), r=math.inf, phi=np.ones(geom.shape))

    def distance(self, geom: GridGeometry) -> np.ndarray:
        i, j = self.center
        return geom.distance(i * geom.hx, j * geom.hy)

    def max_slope(self, geom: GridGeometry) -> float:
        gx, gy = forward_gradient(self.phi, geom)
        return float(np.max(np.hypot(gx, gy)))


def local_energy(f: np.ndarray, ball: BallRegion, geom: GridGeometry) -> float:
    """``1/2 int |df|^2 phi^2`` for the ball's cutoff."""
    return 0.5 * geom.integrate(energy_density(f, geom) * ball.phi**2)


def ball_energy(f: np.ndarray, geom: GridGeometry, center: tuple[int, int], radius: float,
                df2: np.ndarray | None = None) -> float:
    """Energy in the closed geodesic ball ``B_radius(center)`` (sharp indicator)."""
    if df2 is None:
        df2 = energy_density(f, geom)
    i, j = center
    inside = geom.distance(i * geom.hx, j * geom.hy) <= radius
    return 0.5 * geom.integrate(np.where(inside, df2, 0.0))


def local_estimate_bound(r: float, t1: float, t2: float, a: float, E0: float) -> float:
    """Right side ``4^2 / (2 a r^2) (e^{2a t2} - e^{2a t1}) E0`` of the local energy estimate."""
    return 16.0 / (2.0 * a * r * r) * (math.exp(2 * a * t2) - math.exp(2 * a * t1)) * E0


def check_local_estimate(frames, ball: BallRegion, t1: float, t2: float, params: FlowParams,
                         E0: float, geom: GridGeometry) -> float:
    """Margin ``RHS - LHS`` of ``E(B_r, t2) - E(B_2r, t1) <= RHS``.

    ``frames`` maps recorded times to maps ``f``.  Nonnegative margins
    mean the inequality holds.
    """
    if not t1 < t2:
        raise ConfigError("need t1 < t2")
    lhs = ball_energy(frames[t2], geom, ball.center, ball.r) - ball_energy(
        frames[t1], geom, ball.center, 2 * ball.r
    )
    return local_estimate_bound(ball.r, t1, t2, params.a, E0) - lhs


def weighted_ft_moment(f, u, geom, target, p: int, ball: BallRegion | None = None,
                       tol: float = 1e-9) -> float:
    """``int e^{2u} |f_t|^p phi^2`` with ``f_t`` the flow's right side."""
    if p not in (2, 4):
        raise ConfigError("moment order must be 2 or 4")
    ft = flow_velocity(f, u, geom, target, tol)
    ft2 = np.sum(ft * ft, axis=-1)
    dens = np.exp(2.0 * u) * (ft2 if p == 2 else ft2 * ft2)
    if ball is not None:
        dens = dens * ball.phi**2
    return geom.integrate(dens)


def steady_state_check(state: FlowState, params: FlowParams, geom: GridGeometry,
                       target: TargetManifold, harmonic_tol: float = 1e-2):
    """Distance of a steady run from its limit at the state's time.

    Returns ``(max |e^{2u} - (b/a)|df|^2|, max |e^{-2u}|df|^2 - a/b|)``; the
    second entry is None where ``|df|^2`` vanishes (constant maps).
    """
    tau = tangential_part(state.f, tension_field(state.f, target, geom, params.on_manifold_tol), target)
    residual = float(np.max(np.abs(tau)))
    if residual > harmonic_tol:
        raise ConfigError(f"map is not harmonic (tension residual {residual:.3e})")
    df2 = energy_density(state.f, geom)
    metric_dev = float(np.max(np.abs(np.exp(2 * state.u) - params.b / params.a * df2)))
    if np.max(df2) == 0.0:
        return metric_dev, None
    density_dev = float(np.max(np.abs(np.exp(-2 * state.u) * df2 - params.a / params.b)))
    return metric_dev, density_dev


@dataclass
class DiagnosticsRecord:
    t: float
    E: float
    V: float
    dissipation: float
    sup_df2: float
    sup_df2_g: float
    min_u: float
    max_u: float
    ft2_weighted: float
    ft4_weighted: float
    dissipation_residual: float = math.nan
    volume_law_dev: float = math.nan
    volume_bound_margin: float = math.nan


CSV_COLUMNS = (
    "t", "E", "V", "dissipation_residual", "sup_df2", "sup_df2_g", "min_u", "max_u",
    "ft2_weighted", "ft4_weighted", "volume_law_dev", "volume_bound_margin",
)


def make_record(state: FlowState, geom: GridGeometry, target: TargetManifold,
                tol: float = 1e-9) -> DiagnosticsRecord:
    f, u = state.f, state.u
    df2 = energy_density(f, geom)
    weight = np.exp(-2.0 * u)
    ft = flow_velocity(f, u, geom, target, tol, df2)
    ft2 = np.sum(ft * ft, axis=-1)
    tau = tangential_part(f, tension_field(f, target, geom, tol, df2), target)
    return DiagnosticsRecord(
        t=state.t,
        E=0.5 * geom.integrate(df2),
        V=geom.integrate(np.exp(2.0 * u)),
        dissipation=geom.integrate(weight * np.sum(tau * tau, axis=-1)),
        sup_df2=float(np.max(df2)),
        sup_df2_g=float(np.max(weight * df2)),
        min_u=float(np.min(u)),
        max_u=float(np.max(u)),
        ft2_weighted=geom.integrate(np.exp(2.0 * u) * ft2),
        ft4_weighted=geom.integrate(np.exp(2.0 * u) * ft2 * ft2),
    )


class DiagnosticsRecorder:
    """Observer producing one :class:`DiagnosticsRecord` per recorded state."""

    def __init__(self, geom: GridGeometry, target: TargetManifold, params: FlowParams):
        self.geom = geom
        self.target = target
        self.params = params
        self.records: list[DiagnosticsRecord] = []

    def __call__(self, state: FlowState) -> None:
        self.records.append(make_record(state, self.geom, self.target, self.params.on_manifold_tol))

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def finalize(self) -> list[DiagnosticsRecord]:
        """Fill the columns that need the whole series.

        dE/dt is a centered difference over neighbouring records, with
        second-order one-sided differences at the ends.  Volume law and
        bound are left NaN for the classical flow, where they do not apply.
        """
        n = len(self.records)
        if n == 0:
            return self.records
        t, E, D = self.column("t"), self.column("E"), self.column("dissipation")
        if n > 1:
            dEdt = np.gradient(E, t, edge_order=2 if n > 2 else 1)
            for rec, de, d in zip(self.records, dEdt, D):
                rec.dissipation_residual = abs(de + d)
        if not self.params.baseline_classic:
            V = self.column("V")
            law = volume_law_deviations(t, E, V, self.params)
            bound = volume_bound_margins(t, V, E[0], self.params)
            for rec, dev, m in zip(self.records, law, bound):
                rec.volume_law_dev = dev
                rec.volume_bound_margin = m
        return self.records

    def rows(self) -> list[dict]:
        return [{k: asdict(r)[k] for k in CSV_COLUMNS} for r in self.records]


class LocalEnergyMonitor:
    """Observer recording sharp-ball energies ``E(B_r)`` and ``E(B_2r)`` per ball."""

    def __init__(self, geom: GridGeometry, balls: Sequence[BallRegion]):
        self.geom = geom
        self.balls = list(balls)
        self.times: list[float] = []
        self.inner: list[list[float]] = []
        self.outer: list[list[float]] = []
        self._masks = [
            (b.distance(geom) <= b.r, b.distance(geom) <= 2 * b.r) for b in self.balls
        ]

    def __call__(self, state: FlowState) -> None:
        df2 = energy_density(state.f, self.geom)
        half = 0.5 * self.geom.cell_area
        self.times.append(state.t)
        self.inner.append([half * float(np.sum(df2[m1])) for m1, _ in self._masks])
        self.outer.append([half * float(np.sum(df2[m2])) for _, m2 in self._masks])

    def margins(self, params: FlowParams, E0: float) -> np.ndarray:
        """Smallest estimate margin per ball over all recorded pairs ``t1 < t2``."""
        t = np.array(self.times)
        inner = np.array(self.inner)
        outer = np.array(self.outer)
        out = np.full(len(self.balls), math.inf)
        growth = np.exp(2 * params.a * t)
        for k, ball in enumerate(self.balls):
            # lhs[i, j] = E(B_r, t_j) - E(B_2r, t_i)
            lhs = inner[None, :, k] - outer[:, None, k]
            rhs = 16.0 / (2.0 * params.a * ball.r**2) * (growth[None, :] - growth[:, None]) * E0
            later = t[None, :] > t[:, None]
            if np.any(later):
                out[k] = float(np.min((rhs - lhs)[later]))
        return out


@dataclass(frozen=True)
class ConcentrationEvent:
    location: tuple[int, int]
    time: float
    radius: float
    local_energy: float
    threshold: float


def local_energy_map(f: np.ndarray, geom: GridGeometry, r: float) -> np.ndarray:
    """``1/2 int |df|^2 phi_x^2`` for the cutoff centered at every gridpoint."""
    kernel = cutoff_profile(geom.distance(0.0, 0.0), r) ** 2
    df2 = energy_density(f, geom)
    conv = np.fft.irfft2(np.fft.rfft2(df2) * np.fft.rfft2(kernel), s=geom.shape)
    return 0.5 * geom.cell_area * conv


def _lattice_stride(geom: GridGeometry, r: float) -> int:
    return max(1, int(r / (2 * max(geom.hx, geom.hy))))


class ConcentrationMonitor:
    """Observer tracking the running maximum of local energy on a lattice."""

    def __init__(self, geom: GridGeometry, radii: Sequence[float]):
        radii = sorted(float(r) for r in radii)
        if not radii:
            raise ConfigError("need at least one radius")
        if radii[0] < 4 * max(geom.hx, geom.hy):
            raise ConfigError("concentration radii must be at least 4 grid spacings")
        if 2 * radii[0] >= 0.5 * min(geom.lx, geom.ly):
            raise ConfigError("concentration radius too large for the torus")
        self.geom = geom
        self.r = radii[0]
        self.stride = _lattice_stride(geom, self.r)
        self.peak = None
        self.peak_time = None

    def __call__(self, state: FlowState) -> None:
        s = self.stride
        le = local_energy_map(state.f, self.geom, self.r)[::s, ::s]
        if self.peak is None:
            self.peak = le.copy()
            self.peak_time = np.full(le.shape, state.t)
            return
        higher = le > self.peak
        self.peak = np.where(higher, le, self.peak)
        self.peak_time = np.where(higher, state.t, self.peak_time)

    def events(self, eps1: float) -> list[ConcentrationEvent]:
        """Lattice points whose peak local energy exceeds ``eps1``, merged.

        Candidates are taken in decreasing order of energy and each one
        suppresses every other candidate whose ``B_2r`` overlaps its own
        (torus distance at most ``4r``), so the result is finite and
        shrinks as ``eps1`` grows.
        """
        if self.peak is None:
            return []
        g, s = self.geom, self.stride
        flat = self.peak.ravel()
        keep = np.flatnonzero(flat > eps1)
        # stable sort: ties resolved by lattice index
        keep = keep[np.argsort(-flat[keep], kind="stable")]
        mx, my = self.peak.shape
        xs = (keep // my) * s * g.hx
        ys = (keep % my) * s * g.hy
        accepted: list[int] = []
        for n in range(len(keep)):
            close = False
            for m in accepted:
                dx = abs(xs[n] - xs[m]) % g.lx
                dy = abs(ys[n] - ys[m]) % g.ly
                if math.hypot(min(dx, g.lx - dx), min(dy, g.ly - dy)) <= 4 * self.r:
                    close = True
                    break
            if not close:
                accepted.append(n)
        events = []
        for n in accepted:
            idx = keep[n]
            li, lj = divmod(int(idx), my)
            events.append(
                ConcentrationEvent(
                    location=(li * s, lj * s),
                    time=float(self.peak_time.ravel()[idx]),
                    radius=self.r,
                    local_energy=float(flat[idx]),
                    threshold=eps1,
                )
            )
        return events


def detect_concentration(frames: Iterable[tuple[float, np.ndarray]], eps1: float,
                         radii: Sequence[float], geom: GridGeometry) -> list[ConcentrationEvent]:
    """Concentration points of a recorded sequence of ``(t, f)`` frames."""
    mon = ConcentrationMonitor(geom, radii)
    for t, f in frames:
        mon(FlowState(f=f, u=np.zeros(geom.shape), J=np.zeros(geom.shape), t=t))
    return mon.events(eps1)


def default_eps1(E0: float) -> float:
    """Threshold used when none is configured: a tenth of the initial energy."""
    return E0 / 10.0
