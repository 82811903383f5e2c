import math

import numpy as np
import pytest
from scipy import integrate, stats
from hypothesis import given, settings, strategies as st

from velomc import geometry, kinetics
from velomc.geometry import (
    AlmondCoords,
    AngularPosition,
    coords_to_rates,
    induced_omega_logpdf,
    induced_time_atom,
    induced_time_logpdf,
    phi_to_position,
    position_to_time,
    switching_u_to_omega,
)

TWO_PI = 2.0 * math.pi
C_REF = AlmondCoords(u_off=2.0, u_on=8.0, s_on=16.0, a=100.0)


def test_coords_to_rates_examples():
    theta, s_off = coords_to_rates(C_REF, beta=1.0)
    assert (theta.alpha_off, theta.alpha_on, theta.gamma) == (2.0, 8.0, 0.5)
    assert s_off == 4.0
    theta2, s_off2 = coords_to_rates(AlmondCoords(0.0, 5.0, 5.0, a=10.0), beta=1.0)
    assert theta2.gamma == 1.0 and theta2.alpha_off == 0.0 and s_off2 == 0.0


def test_coords_to_rates_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(50):
        u_off = rng.uniform(0.1, 3.0)
        u_on = u_off + rng.uniform(0.5, 6.0)
        s_on = rng.uniform(0.5, 10.0)
        beta = rng.uniform(0.3, 3.0)
        c = AlmondCoords(u_off, u_on, s_on, a=50.0)
        theta, s_off = coords_to_rates(c, beta)
        ss_off, ss_on = kinetics.steady_states(theta)
        assert ss_off.s == pytest.approx(s_off, rel=1e-12)
        assert ss_off.u == pytest.approx(u_off, rel=1e-12)
        assert ss_on.s == pytest.approx(s_on, rel=1e-12)
        assert ss_on.u == pytest.approx(u_on, rel=1e-12)


def test_switching_u_thirty_percent_duration():
    u_sw = C_REF.u_off + 0.3 * (C_REF.u_on - C_REF.u_off)
    assert switching_u_to_omega(u_sw, C_REF, beta=1.0) == pytest.approx(-math.log(0.7))


def test_switching_u_log_singularity():
    last = 0.0
    for gap in (1e-3, 1e-6, 1e-9, 1e-12):
        omega = switching_u_to_omega(C_REF.u_on - gap, C_REF, beta=1.0)
        assert omega > last
        last = omega
    assert last > 25.0
    with pytest.raises(ValueError):
        switching_u_to_omega(C_REF.u_on, C_REF, beta=1.0)
    with pytest.raises(ValueError):
        switching_u_to_omega(C_REF.u_off, C_REF, beta=1.0)


def test_switching_u_forward_consistency():
    rng = np.random.default_rng(1)
    for _ in range(50):
        u_off = rng.uniform(0.0, 2.0)
        u_on = u_off + rng.uniform(0.5, 5.0)
        c = AlmondCoords(u_off, u_on, rng.uniform(0.5, 9.0), a=40.0)
        beta = rng.uniform(0.3, 2.0)
        u_sw = rng.uniform(u_off + 1e-6, u_on - 1e-6)
        omega = switching_u_to_omega(u_sw, c, beta)
        theta, _ = coords_to_rates(c, beta)
        pos = kinetics.solve(omega, 0.0, omega, theta)
        assert pos.u == pytest.approx(u_sw, abs=1e-10)


def test_phi_zero_maps_to_lower_steady_state():
    pos = phi_to_position(AngularPosition(0.0), 5.0, C_REF, beta=1.0)
    assert pos.s == pytest.approx(C_REF.sigma_off, abs=1e-12)
    assert pos.u == pytest.approx(C_REF.u_off, abs=1e-12)


def test_phi_half_maps_to_switching_point():
    ap = AngularPosition(0.0)
    half = (TWO_PI - ap.p) / 2.0
    u_sw = 5.0
    pos = phi_to_position(AngularPosition(half), u_sw, C_REF, beta=1.0)
    omega = switching_u_to_omega(u_sw, C_REF, beta=1.0)
    theta, _ = coords_to_rates(C_REF, beta=1.0)
    ref = kinetics.switching_point(omega, 0.0, theta)
    assert pos.u == pytest.approx(u_sw, abs=1e-12)
    assert pos.s == pytest.approx(ref.s, abs=1e-10)


def test_sector_maps_exactly_to_lower_steady_state():
    ap = AngularPosition(TWO_PI - math.pi / 4.0)  # mid-sector for p = pi/2
    pos = phi_to_position(ap, 5.0, C_REF, beta=1.0)
    assert pos == (C_REF.sigma_off, C_REF.u_off)
    assert position_to_time(ap, 5.0, C_REF, beta=1.0) == math.inf


def test_time_endpoints():
    assert position_to_time(AngularPosition(0.0), 5.0, C_REF, 1.0) == 0.0
    ap = AngularPosition((TWO_PI - math.pi / 2.0) / 2.0)
    omega = switching_u_to_omega(5.0, C_REF, 1.0)
    assert position_to_time(ap, 5.0, C_REF, 1.0) == pytest.approx(omega, rel=1e-12)


coords_strategy = st.tuples(
    st.floats(0.05, 3.0),   # u_off
    st.floats(0.5, 6.0),    # u_on - u_off
    st.floats(0.5, 12.0),   # s_on
    st.floats(0.05, 0.95),  # u_sw placement within the range
    st.floats(0.0, TWO_PI), # phi
    st.floats(0.4, 2.5),    # beta
    st.floats(0.3, math.pi),# sector amplitude p
)


@settings(max_examples=200, deadline=None, derandomize=True)
@given(coords_strategy)
def test_round_trip_through_kinetics(params):
    u_off, du, s_on, fsw, phi, beta, p = params
    c = AlmondCoords(u_off, u_off + du, s_on, a=100.0)
    u_sw = u_off + fsw * du
    ap = AngularPosition(phi, p)
    pos = phi_to_position(ap, u_sw, c, beta)
    t = position_to_time(ap, u_sw, c, beta)
    theta, s_off = coords_to_rates(c, beta)
    if math.isinf(t):
        ref = (s_off, u_off)
    else:
        omega = switching_u_to_omega(u_sw, c, beta)
        ref = kinetics.solve(t, 0.0, omega, theta)
    assert pos.s == pytest.approx(ref[0], abs=1e-9)
    assert pos.u == pytest.approx(ref[1], abs=1e-9)


def test_u_monotone_in_phi_on_both_branches():
    u_sw = 5.5
    p = math.pi / 2.0
    half = (TWO_PI - p) / 2.0
    phis_on = np.linspace(0, half, 200, endpoint=False)
    phis_off = np.linspace(half, TWO_PI - p, 200, endpoint=False)
    _, u_on_branch = geometry.positions_from_phi(
        phis_on, u_sw, C_REF.u_off, C_REF.u_on, C_REF.s_on, p
    )
    _, u_off_branch = geometry.positions_from_phi(
        phis_off, u_sw, C_REF.u_off, C_REF.u_on, C_REF.s_on, p
    )
    assert np.all(np.diff(u_on_branch) > 0)
    assert np.all(np.diff(u_off_branch) < 0)


def test_positions_lie_on_solve_curve():
    rng = np.random.default_rng(3)
    for _ in range(200):
        u_off = rng.uniform(0.0, 2.0)
        u_on = u_off + rng.uniform(0.5, 6.0)
        c = AlmondCoords(u_off, u_on, rng.uniform(0.5, 10.0), a=60.0)
        beta = rng.uniform(0.4, 2.0)
        u_sw = rng.uniform(u_off + 0.05 * (u_on - u_off), u_on - 0.05 * (u_on - u_off))
        ap = AngularPosition(rng.uniform(0, TWO_PI))
        pos = phi_to_position(ap, u_sw, c, beta)
        t = position_to_time(ap, u_sw, c, beta)
        theta, s_off = coords_to_rates(c, beta)
        if math.isinf(t):
            ref = (s_off, c.u_off)
        else:
            ref = kinetics.solve(t, 0.0, switching_u_to_omega(u_sw, c, beta), theta)
        assert abs(pos.s - ref[0]) < 1e-9
        assert abs(pos.u - ref[1]) < 1e-9


def test_induced_time_density_integrates_to_one():
    for beta, omega, p in ((1.0, 2.0, math.pi / 2), (0.7, 0.8, 1.1), (2.0, 4.5, 2.5)):
        f = lambda t: math.exp(induced_time_logpdf(t, omega, beta, p))
        mass_on, _ = integrate.quad(f, 0.0, omega)
        mass_off, _ = integrate.quad(f, omega, np.inf)
        total = mass_on + mass_off + induced_time_atom(p)
        assert total == pytest.approx(1.0, abs=1e-8)


def test_induced_time_density_large_omega_limit():
    # With the switch pushed to infinity the finite-time continuous part is
    # the truncated-exponential component alone: half of the non-atom mass,
    # exponentially distributed.  The other half rides off with the switch.
    q = induced_time_atom(math.pi / 2)
    for t in (0.1, 0.7, 2.3):
        val = induced_time_logpdf(t, 1e9, 1.0, math.pi / 2)
        expected = math.log((1 - q) / 2.0) - t
        assert val == pytest.approx(expected, abs=1e-9)
        assert induced_time_logpdf(t, math.inf, 1.0, math.pi / 2) == pytest.approx(
            expected, abs=1e-12
        )


def test_induced_time_matches_angle_sampling():
    rng = np.random.default_rng(9)
    n = 100_000
    beta, omega, p = 1.0, 1.7, math.pi / 2.0
    c = AlmondCoords(1.0, 6.0, 8.0, a=50.0)
    u_sw = c.u_on + (c.u_off - c.u_on) * math.exp(-beta * omega)
    phis = rng.uniform(0, TWO_PI, size=n)
    times = geometry.times_from_phi(phis, u_sw, c.u_off, c.u_on, p, beta)
    finite = times[np.isfinite(times)]
    q = induced_time_atom(p)
    assert np.isfinite(times).mean() == pytest.approx(1 - q, abs=0.01)

    def cond_cdf(t):
        t = np.asarray(t, dtype=float)
        on = 0.5 * -np.expm1(-beta * np.minimum(t, omega)) / -math.expm1(-beta * omega)
        off = 0.5 * -np.expm1(-beta * np.maximum(t - omega, 0.0))
        return np.where(t < omega, on, 0.5 + off)

    res = stats.kstest(finite, cond_cdf)
    assert res.pvalue > 0.01


def test_induced_omega_density_is_exponential():
    assert induced_omega_logpdf(0.0, 2.0) == pytest.approx(math.log(2.0))
    assert induced_omega_logpdf(3.0, 2.0) == pytest.approx(math.log(2.0) - 6.0)
    assert induced_omega_logpdf(-0.1, 2.0) == -math.inf
    # Pushforward check: uniform switching coordinate implies Exp(beta).
    rng = np.random.default_rng(11)
    c = AlmondCoords(1.0, 6.0, 8.0, a=50.0)
    u = rng.uniform(c.u_off, c.u_on, size=100_000)
    omegas = np.array([switching_u_to_omega(v, c, 1.3) for v in u])
    assert stats.kstest(omegas, stats.expon(scale=1 / 1.3).cdf).pvalue > 0.01


def test_sector_prior_mass_matches_atom():
    rng = np.random.default_rng(13)
    p = 1.2
    phis = rng.uniform(0, TWO_PI, size=200_000)
    frac = np.mean(phis >= TWO_PI - p)
    assert frac == pytest.approx(induced_time_atom(p), abs=0.005)


def test_validation_errors():
    with pytest.raises(ValueError):
        AlmondCoords(3.0, 2.0, 5.0, a=10.0)
    with pytest.raises(ValueError):
        AlmondCoords(1.0, 2.0, 0.0, a=10.0)
    with pytest.raises(ValueError):
        AngularPosition(7.0)
    with pytest.raises(ValueError):
        phi_to_position(AngularPosition(1.0), 9.0, C_REF, 1.0)
