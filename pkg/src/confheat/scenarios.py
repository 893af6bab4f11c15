"""Initial data for the flow: named scenarios and a portable seeded generator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import GridGeometry, TargetManifold, cutoff_profile, project_to_target

_MASK64 = (1 << 64) - 1

SCENARIOS = ("constant", "harmonic_wrap", "bubble_candidate", "random_smooth", "custom")


class SplitMix64:
    """SplitMix64 stream; identical output in any language given the seed."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Double in ``[0, 1)`` from the top 53 bits."""
        return (self.next_u64() >> 11) * 2.0**-53


@dataclass
class Scenario:
    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.name!r}; expected one of {SCENARIOS}")


def north_pole(target: TargetManifold) -> np.ndarray:
    p = np.zeros(target.embedding_dim)
    p[-1] = 1.0
    return p


def constant_map(geom, target, point=None):
    p = north_pole(target) if point is None else np.asarray(point, dtype=float)
    return np.broadcast_to(p, geom.shape + (target.embedding_dim,)).copy()


def harmonic_wrap(geom, target, k=1):
    """Closed geodesic wrapped ``k`` times along x: ``(cos kx', sin kx', 0, ...)``."""
    if int(k) != k or k < 1:
        raise ConfigError("wrap number k must be an integer >= 1")
    if target.embedding_dim < 2:
        raise ConfigError("harmonic_wrap needs at least two components")
    X, _ = geom.coords()
    theta = 2 * math.pi * k * X / geom.lx
    f = np.zeros(geom.shape + (target.embedding_dim,))
    f[..., 0] = np.cos(theta)
    f[..., 1] = np.sin(theta)
    return f


def bubble_candidate(geom, target, lam=0.3, center=None):
    """Degree-one bubble of scale ``lam`` glued to the north pole.

    Inverse stereographic projection of ``(x - center) / lam`` for
    ``|x - center| <= 4 lam``, blended into the constant north pole across
    ``4 lam .. 8 lam`` with the cubic cutoff, then projected.
    """
    if not target.is_sphere or target.embedding_dim != 3:
        raise ConfigError("bubble_candidate needs the target S^2")
    h = max(geom.hx, geom.hy)
    if not lam > 2 * h:
        raise ConfigError(f"bubble scale {lam} is not resolved (need > {2 * h:.4g})")
    if 8 * lam > 0.5 * min(geom.lx, geom.ly):
        raise ConfigError(f"bubble scale {lam} too large for the torus")
    if center is None:
        center = (0.5 * geom.lx, 0.5 * geom.ly)
    dx, dy = geom.displacement(*center)
    wx, wy = dx / lam, dy / lam
    w2 = wx * wx + wy * wy
    bubble = np.stack([2 * wx, 2 * wy, w2 - 1.0], axis=-1) / (1.0 + w2)[..., None]
    phi = cutoff_profile(np.hypot(dx, dy), 4 * lam)[..., None]
    raw = phi * bubble + (1.0 - phi) * north_pole(target)
    return project_to_target(raw, target)


def random_smooth(geom, target, seed=1, modes=3, amplitude=0.5):
    """Low-mode random Fourier field around a random base point.

    Each component is a sum of ``cos``/``sin`` modes with wavenumbers
    ``|p|, |q| <= modes`` and weight ``1 / (1 + p^2 + q^2)``; the sum is
    rescaled to pointwise norm at most ``amplitude`` and added to a unit
    base vector before projecting.  ``amplitude <= 0.5`` keeps the
    projection well defined.
    """
    if modes < 1:
        raise ConfigError("modes must be >= 1")
    if not 0 < amplitude <= 0.5:
        raise ConfigError("amplitude must lie in (0, 0.5]")
    rng = SplitMix64(seed)
    L = target.embedding_dim
    X, Y = geom.coords()
    field_ = np.zeros(geom.shape + (L,))
    for c in range(L):
        for p in range(-modes, modes + 1):
            for q in range(-modes, modes + 1):
                ca = 2.0 * rng.uniform() - 1.0
                cb = 2.0 * rng.uniform() - 1.0
                if p == 0 and q == 0:
                    continue
                phase = 2 * math.pi * (p * X / geom.lx + q * Y / geom.ly)
                weight = 1.0 / (1 + p * p + q * q)
                field_[..., c] += weight * (ca * np.cos(phase) + cb * np.sin(phase))
    base = np.array([2.0 * rng.uniform() - 1.0 for _ in range(L)])
    while np.linalg.norm(base) < 0.1:
        base = np.array([2.0 * rng.uniform() - 1.0 for _ in range(L)])
    base /= np.linalg.norm(base)
    peak = float(np.max(np.linalg.norm(field_, axis=-1)))
    raw = base + (amplitude / peak) * field_
    return project_to_target(raw, target)


def build_initial_data(scenario: Scenario, geom: GridGeometry, target: TargetManifold) -> np.ndarray:
    """Initial map ``f0`` for a scenario; on the target after projection."""
    p = scenario.params
    if scenario.name == "constant":
        return constant_map(geom, target, p.get("point"))
    if scenario.name == "harmonic_wrap":
        return harmonic_wrap(geom, target, int(p.get("k", 1)))
    if scenario.name == "bubble_candidate":
        center = p.get("center")
        return bubble_candidate(geom, target, float(p.get("lambda", 0.3)), center)
    if scenario.name == "random_smooth":
        return random_smooth(
            geom,
            target,
            int(p.get("seed", 1)),
            int(p.get("modes", 3)),
            float(p.get("amplitude", 0.5)),
        )
    # custom: a snapshot file supplies the map
    from .io import read_snapshot

    path = p.get("file")
    if not path:
        raise ConfigError("custom scenario needs a 'file' parameter")
    snap = read_snapshot(path)
    if snap.f.shape != geom.shape + (target.embedding_dim,):
        raise ConfigError("custom map does not match grid/target")
    return project_to_target(snap.f, target)
