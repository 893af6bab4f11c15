"""Configuration files, CSV tables and binary snapshots.

Snapshot layout (all little endian)::

    b"CHF1"  u32 nx  u32 ny  u32 L  f64 t
    f64[nx*ny*L]  map, index order (i, j, component), component fastest
    f64[nx*ny]    u,   index order (i, j)
    f64[nx*ny]    J,   index order (i, j)

``i`` indexes x and ``j`` indexes y.
"""

from __future__ import annotations

import configparser
import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .flow import FlowParams, FlowState
from .geometry import GridGeometry, TargetManifold
from .scenarios import Scenario

MAGIC = b"CHF1"
_HEADER = struct.Struct("<4sIIId")


@dataclass
class Snapshot:
    f: np.ndarray
    u: np.ndarray
    J: np.ndarray
    t: float


def write_snapshot(path, state: FlowState) -> None:
    nx, ny, L = state.f.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, nx, ny, L, float(state.t)))
        for arr in (state.f, state.u, state.J):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes(order="C"))


def read_snapshot(path) -> Snapshot:
    try:
        data = Path(path).read_bytes()
    except OSError as err:
        raise ConfigError(f"cannot read snapshot: {err}") from None
    if len(data) < _HEADER.size:
        raise ConfigError(f"{path}: truncated snapshot")
    magic, nx, ny, L, t = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ConfigError(f"{path}: bad magic {magic!r}")
    n = nx * ny
    expected = _HEADER.size + 8 * (n * L + 2 * n)
    if len(data) != expected:
        raise ConfigError(f"{path}: expected {expected} bytes, found {len(data)}")
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(float)
    f = body[: n * L].reshape(nx, ny, L)
    u = body[n * L: n * L + n].reshape(nx, ny)
    J = body[n * L + n:].reshape(nx, ny)
    return Snapshot(f=f, u=u, J=J, t=t)


def state_from_snapshot(snap: Snapshot, dt: float) -> FlowState:
    step = int(round(snap.t / dt))
    if abs(step * dt - snap.t) > 1e-9 * max(1.0, abs(snap.t)):
        raise ConfigError(f"snapshot time {snap.t} is not on the dt={dt} grid")
    return FlowState(f=snap.f.copy(), u=snap.u.copy(), J=snap.J.copy(), t=snap.t, step=step)


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        # 17 significant digits round-trip any double
        return "%.17g" % float(v)
    return str(v)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([format_value(row[c]) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# section -> key -> (type, default)
SCHEMA = {
    "geometry": {"nx": (int, 64), "ny": (int, 64), "lx": (float, 2 * math.pi), "ly": (float, 2 * math.pi)},
    "target": {"kind": (str, "sphere"), "n": (int, 2)},
    "flow": {
        "a": (float, 1.0), "b": (float, 1.0), "dt": (float, 1e-3), "t_end": (float, 1.0),
        "u_scheme": (str, "closed_form"), "f_scheme": (str, "euler"),
        "baseline_classic": (bool, False), "on_manifold_tol": (float, 1e-9),
        "project": (bool, True), "stability_guard": (bool, True), "safety": (float, 0.9),
    },
    "scenario": {
        "name": (str, "harmonic_wrap"), "k": (int, 1), "lambda": (float, 0.3),
        "center_x": (float, None), "center_y": (float, None), "seed": (int, 1),
        "modes": (int, 3), "amplitude": (float, 0.5), "file": (str, None),
    },
    "output": {"dir": (str, "out"), "record_every": (int, 10), "snapshot_every": (int, 0)},
    "diagnostics": {"epsilon1": (float, None), "radii": (str, None), "balls": (str, None)},
    "compare": {"ceiling": (float, 50.0)},
    "picard": {"T": (float, 0.01), "dt": (float, 1e-3), "tol": (float, 1e-8), "max_iter": (int, 20)},
}


def _convert(section, key, raw):
    typ, _ = SCHEMA[section][key]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {typ.__name__}") from None


def resolve_key(name: str) -> tuple[str, str]:
    """Map ``section.key`` or a bare ``key`` to its section.

    A bare key belongs to the first section in ``SCHEMA`` order that has
    it, so ``dt`` means ``flow.dt``; ``picard.dt`` must be spelled out.
    """
    if "." in name:
        section, key = name.split(".", 1)
        if section in SCHEMA and key in SCHEMA[section]:
            return section, key
        raise ConfigError(f"unknown config key {name!r}")
    for section, keys in SCHEMA.items():
        if name in keys:
            return section, name
    raise ConfigError(f"unknown config key {name!r}")


@dataclass
class RunConfig:
    geometry: GridGeometry
    target: TargetManifold
    params: FlowParams
    scenario: Scenario
    out_dir: Path
    record_every: int = 10
    snapshot_every: int = 0
    epsilon1: float | None = None
    radii: list[float] = field(default_factory=list)
    balls: list[tuple[int, int, float]] = field(default_factory=list)
    ceiling: float = 50.0
    picard_T: float = 0.01
    picard_dt: float = 1e-3
    picard_tol: float = 1e-8
    picard_max_iter: int = 20


def _float_list(text):
    if not text:
        return []
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"bad number list {text!r}") from None


def _ball_list(text):
    balls = []
    for chunk in (text or "").split(";"):
        if not chunk.strip():
            continue
        parts = chunk.replace(",", " ").split()
        if len(parts) != 3:
            raise ConfigError(f"ball entry {chunk!r} must be 'i, j, r'")
        try:
            balls.append((int(parts[0]), int(parts[1]), float(parts[2])))
        except ValueError:
            raise ConfigError(f"bad ball entry {chunk!r}") from None
    return balls


def parse_config(text: str, overrides: dict | None = None, base_dir=".") -> RunConfig:
    """Build a :class:`RunConfig` from INI-style text plus ``key=value`` overrides."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err}") from None
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[section][key] = _convert(section, key, raw)
    for name, raw in (overrides or {}).items():
        section, key = resolve_key(name)
        values[section][key] = _convert(section, key, str(raw))

    g, tg, fl, sc = values["geometry"], values["target"], values["flow"], values["scenario"]
    geom = GridGeometry(g["nx"], g["ny"], g["lx"], g["ly"])
    if tg["kind"] == "sphere":
        target = TargetManifold.unit_sphere(tg["n"])
    elif tg["kind"] == "euclidean":
        target = TargetManifold.euclidean(tg["n"])
    else:
        raise ConfigError(f"unknown target kind {tg['kind']!r}")
    params = FlowParams(**fl)
    sparams = {k: sc[k] for k in ("k", "seed", "modes", "amplitude")}
    sparams["lambda"] = sc["lambda"]
    if sc["center_x"] is not None or sc["center_y"] is not None:
        sparams["center"] = (
            sc["center_x"] if sc["center_x"] is not None else 0.5 * geom.lx,
            sc["center_y"] if sc["center_y"] is not None else 0.5 * geom.ly,
        )
    if sc["file"]:
        sparams["file"] = str(Path(base_dir) / sc["file"])
    scenario = Scenario(sc["name"], sparams)
    out = values["output"]
    if out["record_every"] < 1:
        raise ConfigError("record_every must be >= 1")
    if out["snapshot_every"] < 0:
        raise ConfigError("snapshot_every must be >= 0")
    d = values["diagnostics"]
    pc = values["picard"]
    return RunConfig(
        geometry=geom,
        target=target,
        params=params,
        scenario=scenario,
        out_dir=Path(base_dir) / out["dir"],
        record_every=out["record_every"],
        snapshot_every=out["snapshot_every"],
        epsilon1=d["epsilon1"],
        radii=_float_list(d["radii"]),
        balls=_ball_list(d["balls"]),
        ceiling=values["compare"]["ceiling"],
        picard_T=pc["T"],
        picard_dt=pc["dt"],
        picard_tol=pc["tol"],
        picard_max_iter=pc["max_iter"],
    )


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    return parse_config(text, overrides, base_dir=path.parent)
