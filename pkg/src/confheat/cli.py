"""Command-line driver: runs, baseline comparisons, Picard sweeps and resumes.

Usage::

    confheat run <config> [--key=value ...]
    confheat compare <config> [--key=value ...]
    confheat picard <config> [--key=value ...]
    confheat resume <snapshot> <config> [--key=value ...]

Exit status is 0 on success, 2 on divergence, 3 on a configuration
error and 4 on a solver failure.  ``CHF_THREADS`` caps the native thread
pools used by numpy and scipy.
"""

from __future__ import annotations

import argparse
import contextlib
import math
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .diagnostics import (
    CSV_COLUMNS,
    BallRegion,
    ConcentrationMonitor,
    DiagnosticsRecorder,
    LocalEnergyMonitor,
    default_eps1,
)
from .errors import (
    ConfheatError,
    ConfigError,
    DivergenceError,
    ProjectionDegenerateError,
    SolverError,
    StateCorruptionError,
)
from .fixed_point import picard_iterate
from .flow import FlowState, run
from .geometry import energy_density
from .io import (
    RunConfig,
    load_config,
    read_snapshot,
    state_from_snapshot,
    write_csv,
    write_snapshot,
)
from .scenarios import build_initial_data

EXIT_OK = 0
EXIT_DIVERGED = 2
EXIT_CONFIG = 3
EXIT_SOLVER = 4

# contraction factor of the continuum argument; printed for reference only
CONTINUUM_CONTRACTION = 5.0 / 6.0

DEFAULT_MONITOR_MIN_CELLS = 64


@dataclass
class ExperimentResult:
    status: int
    final: FlowState
    rows: list[dict]
    events: list
    error: Exception | None = None
    local_margins: list[float] = field(default_factory=list)

    def summary(self) -> str:
        last = self.rows[-1] if self.rows else {}
        return "t={} E={} V={} events={}{}".format(
            "%.17g" % self.final.t,
            "%.17g" % last.get("E", math.nan),
            "%.17g" % last.get("V", math.nan),
            len(self.events),
            "" if self.status == EXIT_OK else " status=diverged",
        )


def _every(k: int, fn):
    def observer(state):
        if state.step % k == 0:
            fn(state)
    return observer


def _concentration_radii(config: RunConfig) -> list[float]:
    if config.radii:
        return config.radii
    g = config.geometry
    # four cells: the smallest resolvable ball; coarser grids get no default monitor
    if min(g.nx, g.ny) < DEFAULT_MONITOR_MIN_CELLS:
        return []
    return [4 * max(g.hx, g.hy)]


def run_experiment(config: RunConfig, state: FlowState | None = None,
                   stdout=None) -> ExperimentResult:
    """Run the flow described by ``config`` and write its artifacts.

    Writes ``timeseries.csv``, ``events.csv``, snapshots and, when balls are
    configured, ``local_estimate.csv`` into ``config.out_dir``.  A diverged
    run keeps everything written so far; its last row carries
    ``status=diverged``.
    """
    geom, target, params = config.geometry, config.target, config.params
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if state is None:
        f0 = build_initial_data(config.scenario, geom, target)
    else:
        f0 = None

    recorder = DiagnosticsRecorder(geom, target, params)
    observers = [_every(config.record_every, recorder)]
    radii = _concentration_radii(config)
    conc = ConcentrationMonitor(geom, radii) if radii else None
    if conc is not None:
        observers.append(_every(config.record_every, conc))
    balls = [BallRegion.around(geom, (i, j), r) for i, j, r in config.balls]
    local = LocalEnergyMonitor(geom, balls) if balls else None
    if local is not None:
        observers.append(_every(config.record_every, local))
    if config.snapshot_every > 0:
        observers.append(
            _every(config.snapshot_every,
                   lambda s: write_snapshot(out / f"snapshot_{s.step:08d}.chf", s))
        )

    status, error = EXIT_OK, None
    try:
        traj = run(f0, params, geom, target, observers, record_every=1, state=state)
        final = traj.final
    except (DivergenceError, ProjectionDegenerateError, StateCorruptionError) as err:
        status, error = EXIT_DIVERGED, err
        traj = getattr(err, "trajectory", None)
        final = traj.final if traj is not None else state
    # the last state is always recorded, whatever the cadence
    if final is not None and (not recorder.records or recorder.records[-1].t != final.t):
        recorder(final)
        if conc is not None:
            conc(final)
        if local is not None:
            local(final)
    if final is not None:
        write_snapshot(out / f"snapshot_{final.step:08d}.chf", final)

    recorder.finalize()
    rows = recorder.rows()
    for n, row in enumerate(rows):
        row["status"] = "diverged" if error is not None and n == len(rows) - 1 else "ok"
    write_csv(out / "timeseries.csv", CSV_COLUMNS + ("status",), rows)

    E0 = recorder.records[0].E if recorder.records else 0.0
    events = []
    if conc is not None:
        eps1 = config.epsilon1 if config.epsilon1 is not None else default_eps1(E0)
        events = conc.events(eps1)
    write_csv(
        out / "events.csv",
        ("t", "x", "y", "r", "local_energy"),
        [
            {"t": ev.time, "x": ev.location[0] * geom.hx, "y": ev.location[1] * geom.hy,
             "r": ev.radius, "local_energy": ev.local_energy}
            for ev in events
        ],
    )

    margins = []
    if local is not None:
        margins = [float(m) for m in local.margins(params, E0)]
        write_csv(
            out / "local_estimate.csv",
            ("i", "j", "r", "min_margin"),
            [{"i": b.center[0], "j": b.center[1], "r": b.r, "min_margin": m}
             for b, m in zip(balls, margins)],
        )

    result = ExperimentResult(status, final, rows, events, error, margins)
    print(result.summary(), file=stdout or sys.stdout)
    return result


@dataclass
class ComparisonReport:
    times: list[float]
    conformal: list[float]
    classic: list[float]
    ceiling: float
    conformal_crossing: float | None
    classic_crossing: float | None

    @property
    def postponed(self) -> bool:
        """Classic crosses no later than conformal, or conformal never crosses."""
        if self.conformal_crossing is None:
            return True
        return self.classic_crossing is not None and self.classic_crossing <= self.conformal_crossing


def _first_crossing(times, values, ceiling):
    for t, v in zip(times, values):
        if v > ceiling:
            return t
    return None


def compare_baseline(config: RunConfig, stdout=None) -> ComparisonReport:
    """Run the conformal and the classical flow from the same data.

    Writes ``comparison.csv`` with the conformal ``sup e^{-2u}|df|^2`` and
    the classical ``sup |df|^2`` per record.
    """
    geom, target = config.geometry, config.target
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    f0 = build_initial_data(config.scenario, geom, target)

    def sup_series(params, weighted):
        times, sups = [], []

        def obs(s):
            df2 = energy_density(s.f, geom)
            if weighted:
                df2 = np.exp(-2.0 * s.u) * df2
            times.append(s.t)
            sups.append(float(np.max(df2)))

        if params.n_steps == 0:
            return times, sups
        run(f0, params, geom, target, [obs], record_every=config.record_every)
        return times, sups

    conformal_params = config.params
    classic_params = replace(config.params, baseline_classic=True)
    t_conf, s_conf = sup_series(conformal_params, True)
    t_cls, s_cls = sup_series(classic_params, False)
    if t_conf != t_cls:
        raise ConfheatError("conformal and classic runs recorded different times")
    report = ComparisonReport(
        times=t_conf, conformal=s_conf, classic=s_cls, ceiling=config.ceiling,
        conformal_crossing=_first_crossing(t_conf, s_conf, config.ceiling),
        classic_crossing=_first_crossing(t_cls, s_cls, config.ceiling),
    )
    write_csv(
        out / "comparison.csv",
        ("t", "conformal_sup_df2_g", "classic_sup_df2"),
        [{"t": t, "conformal_sup_df2_g": c, "classic_sup_df2": k}
         for t, c, k in zip(report.times, report.conformal, report.classic)],
    )

    def fmt(t):
        return "never" if t is None else "%.17g" % t

    print(
        f"ceiling={config.ceiling:.17g} conformal_crossing={fmt(report.conformal_crossing)} "
        f"classic_crossing={fmt(report.classic_crossing)}",
        file=stdout or sys.stdout,
    )
    return report


def picard_report(config: RunConfig, stdout=None):
    """Run the Picard iteration and write ``picard.csv`` (iter, d_k, r_k)."""
    geom, target = config.geometry, config.target
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    f0 = build_initial_data(config.scenario, geom, target)
    rep = picard_iterate(f0, config.picard_T, config.picard_dt, config.params, geom, target,
                         tol=config.picard_tol, max_iter=config.picard_max_iter)
    rows = []
    for k, d in enumerate(rep.distances):
        r = rep.distances[k] / rep.distances[k - 1] if k > 0 and rep.distances[k - 1] > 0 else math.nan
        rows.append({"iter": k + 1, "d_k": d, "r_k": r})
    write_csv(out / "picard.csv", ("iter", "d_k", "r_k"), rows)
    print(
        f"iterations={rep.iterates} converged={int(rep.converged)} "
        f"max_ratio={rep.max_ratio:.17g} continuum_factor={CONTINUUM_CONTRACTION:.17g}",
        file=stdout or sys.stdout,
    )
    return rep


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="confheat", description="Conformal heat flow of harmonic maps on a flat torus.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    for verb in ("run", "compare", "picard"):
        sub.add_parser(verb).add_argument("config")
    r = sub.add_parser("resume")
    r.add_argument("snapshot")
    r.add_argument("config")
    return p


def parse_overrides(extra: list[str]) -> dict:
    overrides = {}
    for token in extra:
        if not token.startswith("--") or "=" not in token:
            raise ConfigError(f"unrecognized argument {token!r}; overrides look like --key=value")
        key, value = token[2:].split("=", 1)
        overrides[key] = value
    return overrides


def _thread_limit():
    raw = os.environ.get("CHF_THREADS")
    if raw is None or raw == "":
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CHF_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"CHF_THREADS must be a positive integer, got {raw!r}")
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    try:
        args, extra = _parser().parse_known_args(argv)
        overrides = parse_overrides(extra)
        config = load_config(args.config, overrides)
        with _thread_limit():
            if args.verb == "run":
                return run_experiment(config).status
            if args.verb == "compare":
                compare_baseline(config)
                return EXIT_OK
            if args.verb == "picard":
                rep = picard_report(config)
                if not rep.converged:
                    print(f"picard: no convergence in {rep.iterates} iterations", file=sys.stderr)
                    return EXIT_SOLVER
                return EXIT_OK
            snap = read_snapshot(args.snapshot)
            state = state_from_snapshot(snap, config.params.dt)
            return run_experiment(config, state=state).status
    except DivergenceError as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as err:
        print(f"solver error: {err}", file=sys.stderr)
        return EXIT_SOLVER
    except ConfheatError as err:
        # corrupted state or degenerate projection: the run went bad
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
