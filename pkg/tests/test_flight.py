import math

import numpy as np
import pytest
from scipy import integrate, stats

from lorentz_lab import flight as fl
from lorentz_lab.geometry import reflect
from lorentz_lab.streams import RngStream


E = math.e


# ---------------------------------------------------------------------------
# flight-time sampling: oracles first
# ---------------------------------------------------------------------------

def test_conditional_mean_oracle_values():
    # short-flight law: density e^(1-x)/(e-1) on [0,1); mean (e-2)/(e-1)
    mean_short, _ = integrate.quad(lambda x: x * math.exp(1 - x) / (E - 1), 0, 1)
    assert mean_short == pytest.approx((E - 2) / (E - 1), abs=1e-12)
    # long-flight law: 1 + Exp(1), mean 2 by memorylessness
    mean_long, _ = integrate.quad(lambda x: x * math.exp(1 - x), 1, 60)
    assert mean_long == pytest.approx(2.0, abs=1e-9)


def test_flight_time_means():
    st = RngStream(100, 0)
    xs = fl._xi_from_uniform(st.uniforms(1_000_000), "none")
    assert xs.mean() == pytest.approx(1.0, abs=0.01)
    xs1 = fl._xi_from_uniform(st.uniforms(1_000_000), "eps=1")
    assert np.all((xs1 >= 0) & (xs1 < 1))
    assert xs1.mean() == pytest.approx((E - 2) / (E - 1), abs=0.005)
    xs0 = fl._xi_from_uniform(st.uniforms(1_000_000), "eps=0")
    assert np.all(xs0 >= 1)
    assert xs0.mean() == pytest.approx(2.0, abs=0.01)


def test_flight_time_scalar_matches_block():
    a, b = RngStream(4, 4), RngStream(4, 4)
    xs = [fl.sample_flight_time(a, "eps=1") for _ in range(9)]
    assert np.allclose(xs, fl._xi_from_uniform(b.uniforms(9), "eps=1"), atol=0)


# ---------------------------------------------------------------------------
# directions
# ---------------------------------------------------------------------------

def test_direction_symmetry_and_moments():
    st = RngStream(5, 0)
    us = fl.sample_directions(st, 1_000_000)
    assert np.abs(np.linalg.norm(us, axis=1) - 1).max() < 1e-12
    assert np.linalg.norm(us.mean(axis=0)) < 0.005
    assert (us[:, 2] ** 2).mean() == pytest.approx(1.0 / 3.0, abs=0.003)


def test_direction_determinism_and_draw_count():
    a, b = RngStream(6, 1), RngStream(6, 1)
    u1 = fl.sample_direction(a)
    u2 = fl.sample_direction(a)
    batch = fl.sample_directions(b, 2)
    assert np.array_equal(np.vstack((u1, u2)), batch)
    assert a.counter == b.counter == 4


# ---------------------------------------------------------------------------
# stream generation
# ---------------------------------------------------------------------------

def test_tiny_horizon_still_has_a_flight():
    fs = fl.generate_flight_stream(RngStream(1, 1), 0.001)
    assert fs.n_flights >= 1
    assert fs.taus[-1] >= 0.001


def test_scattering_rate_is_one():
    T = 100.0
    counts = []
    for k in range(2000):
        fs = fl.generate_flight_stream(RngStream(2, k), T)
        counts.append(np.searchsorted(fs.taus, T))
    assert np.mean(counts) / T == pytest.approx(1.0, abs=0.02)


def test_signature_frequency():
    fs = fl.generate_flight_stream(RngStream(3, 0), 1_000_000.0)
    assert fs.eps.mean() == pytest.approx(1 - 1 / E, abs=0.002)
    assert np.array_equal(fs.eps, (fs.xi < 1.0).astype(np.uint8))


def test_scattering_count_is_poisson():
    # KS distance between nu_t and Poisson(t) at t = 20 over 1e5 trials
    t = 20.0
    n = 100_000
    st = RngStream(17, 0)
    block = 64
    xs = fl._xi_from_uniform(st.uniforms(n * block), "none").reshape(n, block)
    cum = np.cumsum(xs, axis=1)
    assert cum[:, -1].min() > t  # 64 flights always cover t=20
    counts = (cum <= t).sum(axis=1)
    ks = np.abs(
        np.array([(counts <= k).mean() for k in range(60)])
        - stats.poisson.cdf(np.arange(60), t)
    ).max()
    assert ks < 0.01


def test_conditioned_start():
    fs = fl.generate_flight_stream(RngStream(8, 0), 10.0, first_two_long=True)
    assert fs.xi[0] > 1.0 and fs.xi[1] > 1.0


# ---------------------------------------------------------------------------
# the flight path
# ---------------------------------------------------------------------------

def test_single_flight_path():
    fs = fl.FlightStream(u0=np.array([0.0, 0, 1.0]), xi=np.array([2.0]),
                         u=np.array([[1.0, 0, 0]]), eps=np.array([0], dtype=np.uint8))
    path = fl.flight_path(fs)
    assert np.allclose(path.position(1.0), [1.0, 0, 0])
    assert np.allclose(path.position(2.0), [2.0, 0, 0])


def test_breakpoints_match_step_sums():
    fs = fl.generate_flight_stream(RngStream(9, 0), 50.0)
    path = fl.flight_path(fs)
    sums = np.cumsum(fs.steps(), axis=0)
    assert np.abs(path.points[1:] - sums).max() <= 1e-12 * max(1.0, np.abs(sums).max())
    path.validate()


def test_mean_square_displacement_green_kubo():
    # oracle: E|Y(t)|^2 = 2 * int_0^t (t-s) e^-s ds, evaluated by quadrature
    t = 50.0
    oracle, _ = integrate.quad(lambda s: 2.0 * (t - s) * math.exp(-s), 0.0, t)
    assert fl.mean_square_displacement(t) == pytest.approx(oracle, abs=1e-9)
    ends = []
    for k in range(10_000):
        fs = fl.generate_flight_stream(RngStream(10, k), t)
        ends.append(fl.flight_path(fs, t_max=t).end_point)
    ends = np.asarray(ends)
    msd = (ends ** 2).sum(axis=1).mean()
    assert msd == pytest.approx(fl.mean_square_displacement(t), abs=2.0)


def test_truncation_at_t_max():
    fs = fl.generate_flight_stream(RngStream(11, 3), 20.0)
    path = fl.flight_path(fs, t_max=12.5)
    assert path.times[-1] == 12.5
    full = fl.flight_path(fs)
    assert np.allclose(path.end_point, full.position(12.5), atol=1e-12)


# ---------------------------------------------------------------------------
# virtual scatterers
# ---------------------------------------------------------------------------

def test_virtual_scatterer_head_on():
    fs = fl.FlightStream(u0=np.array([1.0, 0, 0]),
                         xi=np.array([1.0]),
                         u=np.array([[-1.0, 0, 0]]),
                         eps=np.array([0], dtype=np.uint8))
    centers = fl.virtual_scatterers(fs, 0.1)
    assert np.allclose(centers[0], [0.1, 0, 0], atol=1e-15)


def test_virtual_scatterer_right_angle():
    fs = fl.FlightStream(u0=np.array([1.0, 0, 0]),
                         xi=np.array([1.0]),
                         u=np.array([[0.0, 1.0, 0]]),
                         eps=np.array([0], dtype=np.uint8))
    centers = fl.virtual_scatterers(fs, 0.1)
    s = 0.1 / math.sqrt(2.0)
    assert np.allclose(centers[0], [s, -s, 0], atol=1e-15)


def test_virtual_scatterers_specular_consistency():
    # reflecting the incoming direction at the implied center reproduces
    # the outgoing direction, and |center - turn point| = r exactly
    r = 0.07
    fs = fl.generate_flight_stream(RngStream(12, 0), 200.0)
    centers = fl.virtual_scatterers(fs, r)
    pts = np.vstack((np.zeros(3), np.cumsum(fs.steps(), axis=0)[:-1]))
    dist = np.linalg.norm(centers - pts, axis=1)
    assert np.abs(dist - r).max() <= 1e-12
    u_in = np.vstack((fs.u0, fs.u[:-1]))
    for k in range(0, len(centers), 7):
        n = (pts[k] - centers[k]) / r
        n /= np.linalg.norm(n)
        out = reflect(u_in[k], n)
        assert np.abs(out - fs.u[k]).max() <= 1e-9
