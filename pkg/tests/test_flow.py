import math

import numpy as np
import pytest

from confheat.errors import ConfigError, DivergenceError
from confheat.flow import (
    FlowParams,
    FlowState,
    run,
    stable_dt,
    step,
    step_u_ode,
    u_closed_form,
)
from confheat.geometry import GridGeometry, TargetManifold, energy_density
from confheat.scenarios import constant_map, harmonic_wrap, random_smooth

SPHERE = TargetManifold.unit_sphere()
G32 = GridGeometry(32, 32)
G64 = GridGeometry(64, 64)


def collect(series):
    def obs(state):
        series.append(state.copy())
    return obs


def test_params_validation():
    with pytest.raises(ConfigError):
        FlowParams(a=0.0)
    with pytest.raises(ConfigError):
        FlowParams(dt=-1.0)
    with pytest.raises(ConfigError):
        FlowParams(f_scheme="leapfrog")
    with pytest.raises(ConfigError):
        FlowParams(dt=0.3, t_end=1.0).n_steps


def test_small_b_warns():
    f0 = constant_map(G32, SPHERE)
    with pytest.warns(UserWarning):
        run(f0, FlowParams(b=0.5, t_end=0.01, dt=0.01), G32, SPHERE)


def test_u_closed_form_zero_history():
    t = 0.37
    assert np.all(u_closed_form(np.zeros((4, 4)), t, 1.3, 2.0) == -1.3 * t)


@pytest.mark.parametrize("a, b, c", [(1.0, 1.0, 1.0), (2.0, 1.0, 0.5), (0.5, 3.0, 2.0)])
def test_u_closed_form_constant_density(a, b, c):
    t = 0.8
    J = np.full((2, 2), c * (math.exp(2 * a * t) - 1) / (2 * a))
    expected = 0.5 * math.log(math.exp(-2 * a * t) + b * c / a * (1 - math.exp(-2 * a * t)))
    np.testing.assert_allclose(u_closed_form(J, t, a, b), expected, rtol=1e-14)


def test_u_closed_form_long_time_limit():
    a, b, c, t = 1.0, 2.0, 0.7, 30.0
    J = np.full((2, 2), c * (math.exp(2 * a * t) - 1) / (2 * a))
    np.testing.assert_allclose(np.exp(2 * u_closed_form(J, t, a, b)), b * c / a, rtol=1e-12)


@pytest.mark.parametrize("a", [1.0, 0.5, 2.0])
def test_u_ode_without_energy(a):
    p = FlowParams(a=a, dt=1e-3)
    u = step_u_ode(np.zeros((4, 4)), np.zeros((4, 4)), p, p.dt)
    assert np.all(u == -a * p.dt)


def test_u_ode_matches_closed_form():
    p = FlowParams(a=1.0, b=1.0, dt=1e-3)
    c = 0.8
    df2 = np.full((4, 4), c)
    u = np.zeros((4, 4))
    for _ in range(1000):
        u = step_u_ode(u, df2, p, p.dt)
    J = np.full((4, 4), c * (math.exp(2.0) - 1) / 2)
    assert np.max(np.abs(u - u_closed_form(J, 1.0, 1.0, 1.0))) <= 1e-9


def test_u_ode_equilibrium():
    p = FlowParams(a=2.0, b=1.0, dt=1e-2)
    c = 3.0
    u = np.full((4, 4), 0.5 * math.log(p.b * c / p.a))
    np.testing.assert_allclose(step_u_ode(u, np.full((4, 4), c), p, p.dt), u, atol=1e-15)


@pytest.mark.parametrize("scheme", ["euler", "rk4", "semi_implicit"])
def test_constant_map_fixed_and_u_linear(scheme):
    f0 = constant_map(G32, SPHERE)
    p = FlowParams(a=1.5, dt=1e-2, t_end=0.2, f_scheme=scheme)
    series = []
    run(f0, p, G32, SPHERE, [collect(series)])
    for s in series:
        assert np.array_equal(s.f, f0)
        assert np.all(s.u == -1.5 * s.t)
        assert np.all(s.J == 0.0)


def test_constant_map_classic_keeps_u_zero():
    f0 = constant_map(G32, SPHERE)
    p = FlowParams(dt=1e-2, t_end=0.1, baseline_classic=True)
    traj = run(f0, p, G32, SPHERE)
    assert np.array_equal(traj.final.f, f0)
    assert np.all(traj.final.u == 0.0)


def test_wrap_single_step_is_nearly_fixed():
    f0 = harmonic_wrap(G64, SPHERE)
    p = FlowParams(dt=1e-3, t_end=1e-3)
    s1 = step(FlowState.initial(f0), p, G64, SPHERE)
    assert np.max(np.abs(s1.f - f0)) <= p.dt * 2e-3


def test_wrap_stays_put_for_long_times():
    f0 = harmonic_wrap(G32, SPHERE)
    traj = run(f0, FlowParams(dt=1e-3, t_end=10.0), G32, SPHERE)
    assert np.max(np.abs(traj.final.f - f0)) <= 1e-2


def test_zero_duration_run_records_nothing():
    f0 = harmonic_wrap(G32, SPHERE)
    series = []
    traj = run(f0, FlowParams(t_end=0.0), G32, SPHERE, [collect(series)])
    assert traj.times == [] and series == []
    assert traj.final is traj.initial


def test_off_manifold_initial_data_rejected():
    with pytest.raises(ConfigError):
        run(1.1 * harmonic_wrap(G32, SPHERE), FlowParams(t_end=0.01, dt=0.01), G32, SPHERE)


def test_divergence_injection():
    f0 = random_smooth(G32, SPHERE, seed=1)
    p = FlowParams(dt=1e3, t_end=1e4, stability_guard=False)
    with pytest.raises(DivergenceError) as info:
        run(f0, p, G32, SPHERE)
    assert info.value.step in (1, 2)
    traj = info.value.trajectory
    assert traj is not None and not traj.completed
    assert traj.final.step == info.value.step - 1


@pytest.fixture(scope="module")
def smooth_run():
    f0 = random_smooth(G32, SPHERE, seed=4)
    p = FlowParams(dt=2e-3, t_end=0.4)
    series = []
    run(f0, p, G32, SPHERE, [collect(series)])
    return p, series


def test_closed_form_identity_is_exact(smooth_run):
    p, series = smooth_run
    for s in series:
        assert np.array_equal(s.u, u_closed_form(s.J, s.t, p.a, p.b))


def test_metric_lower_bound_and_history_monotone(smooth_run):
    p, series = smooth_run
    for prev, nxt in zip(series, series[1:]):
        assert np.all(nxt.J >= prev.J)
    for s in series:
        assert np.all(s.J >= 0)
        assert np.all(np.exp(2 * s.u) >= np.exp(-2 * p.a * s.t) * (1 - 1e-15))


def test_on_manifold_after_every_step(smooth_run):
    _, series = smooth_run
    for s in series:
        assert np.max(np.abs(np.linalg.norm(s.f, axis=-1) - 1)) <= 1e-9


def test_classic_mode_freezes_u():
    f0 = random_smooth(G32, SPHERE, seed=2)
    p = FlowParams(dt=2e-3, t_end=0.1, baseline_classic=True, a=3.0, b=7.0)
    series = []
    run(f0, p, G32, SPHERE, [collect(series)])
    assert all(np.all(s.u == 0.0) and np.all(s.J == 0.0) for s in series)


def test_closed_form_and_ode_agree_on_steady_data():
    f0 = harmonic_wrap(G32, SPHERE)
    a = run(f0, FlowParams(dt=1e-3, t_end=1.0), G32, SPHERE).final
    b = run(f0, FlowParams(dt=1e-3, t_end=1.0, u_scheme="direct_ode"), G32, SPHERE).final
    assert np.max(np.abs(a.u - b.u)) <= 1e-6


def test_stability_guard_limit():
    u = np.full(G32.shape, -0.5)
    p = FlowParams(safety=0.9)
    assert stable_dt(u, G32, p) == pytest.approx(0.9 * G32.hx**2 / (4 * math.e))


def test_guard_subdivides_large_steps():
    f0 = random_smooth(G32, SPHERE, seed=3)
    p = FlowParams(dt=0.05, t_end=0.2)
    traj = run(f0, p, G32, SPHERE)
    assert traj.final.step == 4 and traj.final.t == pytest.approx(0.2)
    assert np.all(np.isfinite(traj.final.f))


def test_semi_implicit_beyond_explicit_limit():
    f0 = random_smooth(G32, SPHERE, seed=3)
    p = FlowParams(dt=0.05, t_end=0.5, f_scheme="semi_implicit")
    assert p.dt > stable_dt(np.zeros(G32.shape), G32, p)
    traj = run(f0, p, G32, SPHERE)
    assert np.max(np.abs(np.linalg.norm(traj.final.f, axis=-1) - 1)) <= 1e-9


def test_resume_is_bit_exact():
    f0 = random_smooth(G32, SPHERE, seed=5)
    p = FlowParams(dt=2e-3, t_end=0.1)
    whole = run(f0, p, G32, SPHERE).final
    half = run(f0, FlowParams(dt=2e-3, t_end=0.05), G32, SPHERE).final
    resumed = run(None, p, G32, SPHERE, state=half.copy()).final
    assert resumed.step == whole.step
    for name in ("f", "u", "J"):
        assert np.array_equal(getattr(resumed, name), getattr(whole, name))


def _final_f(scheme, dt, u_scheme="closed_form"):
    g = GridGeometry(16, 16)
    f0 = random_smooth(g, SPHERE, seed=1)
    p = FlowParams(dt=dt, t_end=0.2, f_scheme=scheme, u_scheme=u_scheme)
    return run(f0, p, g, SPHERE).final.f


@pytest.mark.parametrize("scheme, factor", [("euler", 1.9), ("rk4", 15.0)])
@pytest.mark.parametrize("u_scheme", ["closed_form", "direct_ode"])
def test_order_of_accuracy(scheme, factor, u_scheme):
    fs = [_final_f(scheme, dt, u_scheme) for dt in (0.02, 0.01, 0.005)]
    d1 = np.max(np.abs(fs[0] - fs[1]))
    d2 = np.max(np.abs(fs[1] - fs[2]))
    assert d1 / d2 >= factor


def test_energy_density_unchanged_on_constant_map():
    f0 = constant_map(G32, SPHERE)
    traj = run(f0, FlowParams(dt=1e-2, t_end=0.1, f_scheme="rk4"), G32, SPHERE)
    assert np.all(energy_density(traj.final.f, G32) == 0.0)
