import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from confheat.errors import ConfigError
from confheat.flow import FlowState
from confheat.io import (
    format_value,
    parse_config,
    read_csv,
    read_snapshot,
    resolve_key,
    state_from_snapshot,
    write_csv,
    write_snapshot,
)


def make_state(nx=8, ny=9, L=3, t=0.25, seed=0):
    rng = np.random.default_rng(seed)
    return FlowState(
        f=rng.normal(size=(nx, ny, L)),
        u=rng.normal(size=(nx, ny)),
        J=rng.uniform(size=(nx, ny)),
        t=t,
        step=0,
    )


def test_snapshot_layout(tmp_path):
    s = make_state()
    path = tmp_path / "s.chf"
    write_snapshot(path, s)
    data = path.read_bytes()
    assert data[:4] == b"CHF1"
    assert struct.unpack_from("<IIId", data, 4) == (8, 9, 3, 0.25)
    body = np.frombuffer(data[24:], dtype="<f8")
    # component index runs fastest, then y, then x
    assert body[0] == s.f[0, 0, 0] and body[1] == s.f[0, 0, 1] and body[3] == s.f[0, 1, 0]
    assert body[8 * 9 * 3] == s.u[0, 0]
    assert body[8 * 9 * 3 + 8 * 9] == s.J[0, 0]
    assert len(data) == 24 + 8 * (8 * 9 * 3 + 2 * 8 * 9)


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, (8, 8, 3), elements=st.floats(allow_nan=False, allow_infinity=False)),
    arrays(np.float64, (8, 8), elements=st.floats(allow_nan=False, allow_infinity=False)),
    st.floats(0, 1e6, allow_nan=False),
)
def test_snapshot_round_trip(tmp_path_factory, f, u, t):
    path = tmp_path_factory.mktemp("snap") / "s.chf"
    write_snapshot(path, FlowState(f=f, u=u, J=np.abs(u), t=t))
    snap = read_snapshot(path)
    assert snap.f.tobytes() == f.tobytes()
    assert snap.u.tobytes() == u.tobytes()
    assert snap.J.tobytes() == np.abs(u).tobytes()
    assert snap.t == t


def test_snapshot_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.chf"
    bad.write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(ConfigError):
        read_snapshot(bad)
    write_snapshot(bad, make_state())
    bad.write_bytes(bad.read_bytes()[:-8])
    with pytest.raises(ConfigError):
        read_snapshot(bad)
    bad.write_bytes(b"CH")
    with pytest.raises(ConfigError):
        read_snapshot(bad)


def test_state_from_snapshot_step(tmp_path):
    path = tmp_path / "s.chf"
    write_snapshot(path, make_state(t=0.5))
    assert state_from_snapshot(read_snapshot(path), 1e-3).step == 500
    with pytest.raises(ConfigError):
        state_from_snapshot(read_snapshot(path), 0.3)


@settings(max_examples=200, deadline=None)
@given(st.floats(allow_nan=False))
def test_csv_float_round_trip(x):
    assert float(format_value(x)) == x


def test_format_values():
    assert format_value(3) == "3"
    assert format_value(True) == "1"
    assert format_value(0.1) == "0.10000000000000001"
    assert format_value(math.nan) == "nan"
    assert format_value("ok") == "ok"


def test_csv_write_read(tmp_path):
    path = tmp_path / "x.csv"
    write_csv(path, ("t", "E"), [{"t": 0.0, "E": 1 / 3}, {"t": 0.1, "E": 2.0}])
    assert path.read_text() == "t,E\n0,0.33333333333333331\n0.10000000000000001,2\n"
    assert read_csv(path)[0]["E"] == "0.33333333333333331"


CONFIG = """
[geometry]
nx = 32
ny = 16
lx = 3.0
[target]
kind = sphere
[flow]
a = 2
dt = 0.01
t_end = 0.5
f_scheme = rk4
baseline_classic = yes
[scenario]
name = bubble_candidate
lambda = 0.2
center_x = 1.0
[output]
dir = results
record_every = 5
snapshot_every = 50
[diagnostics]
epsilon1 = 0.5
radii = 0.5, 1.0
balls = 1, 2, 0.5; 3,4,0.25
[compare]
ceiling = 20
[picard]
T = 0.02
max_iter = 7
"""


def test_parse_config(tmp_path):
    cfg = parse_config(CONFIG, base_dir=tmp_path)
    assert (cfg.geometry.nx, cfg.geometry.ny, cfg.geometry.lx) == (32, 16, 3.0)
    assert cfg.geometry.ly == 2 * math.pi
    assert cfg.params.a == 2.0 and cfg.params.f_scheme == "rk4" and cfg.params.baseline_classic
    assert cfg.scenario.name == "bubble_candidate"
    assert cfg.scenario.params["lambda"] == 0.2
    assert cfg.scenario.params["center"] == (1.0, math.pi)
    assert cfg.out_dir == tmp_path / "results"
    assert (cfg.record_every, cfg.snapshot_every) == (5, 50)
    assert cfg.epsilon1 == 0.5 and cfg.radii == [0.5, 1.0]
    assert cfg.balls == [(1, 2, 0.5), (3, 4, 0.25)]
    assert cfg.ceiling == 20.0
    assert (cfg.picard_T, cfg.picard_dt, cfg.picard_max_iter) == (0.02, 1e-3, 7)


def test_overrides():
    cfg = parse_config(CONFIG, {"dt": "0.005", "picard.dt": "0.002", "geometry.nx": "64"})
    assert cfg.params.dt == 0.005
    assert cfg.picard_dt == 0.002
    assert cfg.geometry.nx == 64
    assert resolve_key("t_end") == ("flow", "t_end")


@pytest.mark.parametrize(
    "text, overrides",
    [
        ("[nosuch]\nx = 1\n", None),
        ("[flow]\nspeed = 1\n", None),
        ("[flow]\ndt = fast\n", None),
        ("[flow]\nbaseline_classic = maybe\n", None),
        ("[target]\nkind = torus\n", None),
        ("[output]\nrecord_every = 0\n", None),
        ("[flow]\na = -1\n", None),
        ("[diagnostics]\nballs = 1, 2\n", None),
        ("not an ini file", None),
        ("", {"bogus": "1"}),
        ("", {"flow.bogus": "1"}),
    ],
)
def test_config_errors(text, overrides):
    with pytest.raises(ConfigError):
        parse_config(text, overrides)
