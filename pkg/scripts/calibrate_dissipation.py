"""Fit the constant C in  dissipation_residual <= C * (dt + h^2).

Runs random_smooth (seed 1) to t = 2 over a (dt, h) refinement sweep with
records every 10 steps and prints the largest ratio residual / (dt + h^2).
The value is frozen into the test suite as a regression bound.
"""

import numpy as np

from confheat import FlowParams, GridGeometry, TargetManifold, run
from confheat.diagnostics import DiagnosticsRecorder
from confheat.scenarios import random_smooth

SPHERE = TargetManifold.unit_sphere()


def sweep(sizes=(32, 64), steps=(2e-3, 1e-3, 5e-4), t_end=2.0, record_every=10):
    fits = []
    for n in sizes:
        geom = GridGeometry(n, n)
        f0 = random_smooth(geom, SPHERE, seed=1)
        for dt in steps:
            params = FlowParams(dt=dt, t_end=t_end)
            rec = DiagnosticsRecorder(geom, SPHERE, params)
            run(f0, params, geom, SPHERE, [rec], record_every=record_every)
            rec.finalize()
            worst = float(np.max(rec.column("dissipation_residual")))
            ratio = worst / (dt + geom.hx**2)
            fits.append((n, dt, worst, ratio))
            print(f"n={n:4d} dt={dt:.1e} max_residual={worst:.6e} ratio={ratio:.3f}", flush=True)
    return max(r for *_, r in fits)


if __name__ == "__main__":
    print(f"C = {sweep():.3f}")
