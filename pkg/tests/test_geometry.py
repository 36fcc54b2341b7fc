import math

import numpy as np
import pytest

from lorentz_lab import geometry as geo


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def random_units(rng, n):
    z = rng.uniform(-1.0, 1.0, n)
    phi = rng.uniform(0.0, 2.0 * np.pi, n)
    rho = np.sqrt(1.0 - z * z)
    return np.stack((rho * np.cos(phi), rho * np.sin(phi), z), axis=1)


# ---------------------------------------------------------------------------
# reflect
# ---------------------------------------------------------------------------

def test_reflect_head_on_reversal():
    out = geo.reflect(np.array([0.0, 0.0, -1.0]), np.array([0.0, 0.0, 1.0]))
    assert np.allclose(out, [0.0, 0.0, 1.0], atol=1e-12)


def test_reflect_tangential_unchanged():
    out = geo.reflect(np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]))
    assert np.allclose(out, [1.0, 0.0, 0.0], atol=1e-12)


def test_reflect_mirror_symmetry():
    s = math.sqrt(2.0) / 2.0
    out = geo.reflect(np.array([s, 0.0, -s]), np.array([0.0, 0.0, 1.0]))
    assert np.allclose(out, [s, 0.0, s], atol=1e-12)


def test_reflect_speed_conservation_bulk():
    # 1e6 random (v, n): |v'| = 1 to 1e-12.  The bulk check uses the same
    # formula vectorised; bitwise agreement with the scalar op is asserted
    # on a subsample.
    rng = np.random.default_rng(7)
    v = random_units(rng, 1_000_000)
    n = random_units(rng, 1_000_000)
    d = np.einsum("ij,ij->i", v, n)
    out = v - 2.0 * d[:, None] * n
    out /= np.sqrt(np.einsum("ij,ij->i", out, out))[:, None]
    speeds = np.sqrt(np.einsum("ij,ij->i", out, out))
    assert np.abs(speeds - 1.0).max() <= 1e-12
    for i in range(0, 1_000_000, 50_000):
        assert np.abs(geo.reflect(v[i], n[i]) - out[i]).max() <= 1e-15


def test_reflect_involution_and_normal_component():
    rng = np.random.default_rng(8)
    for _ in range(20_000):
        v = unit(rng.normal(size=3))
        n = unit(rng.normal(size=3))
        w = geo.reflect(v, n)
        assert abs(float(w @ n) + float(v @ n)) <= 1e-12
        back = geo.reflect(w, n)
        assert np.abs(back - v).max() <= 1e-12
        # v' - v is parallel to n
        d = w - v
        assert np.linalg.norm(np.cross(d, n)) <= 1e-12


# ---------------------------------------------------------------------------
# angle
# ---------------------------------------------------------------------------

def test_angle_basics():
    e = unit([0.3, -0.5, 0.81])
    assert geo.angle(e, e) == 0.0
    assert geo.angle(e, -e) == pytest.approx(math.pi, abs=1e-12)
    assert geo.angle(np.array([1.0, 0, 0]), np.array([0.0, 1.0, 0])) == pytest.approx(
        math.pi / 2, abs=1e-12)


def test_angle_clamps_fp_overshoot():
    u = unit([1.0, 1.0, 1.0])
    v = u * (1.0 + 1e-16)  # dot may exceed 1 in FP
    assert geo.angle(u, v) == 0.0


# ---------------------------------------------------------------------------
# first_sphere_hit
# ---------------------------------------------------------------------------

def test_hit_axis_aligned():
    t, n = geo.first_sphere_hit(np.array([-2.0, 0, 0]), np.array([1.0, 0, 0]),
                                np.zeros(3), 1.0, 10.0)
    assert t == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(n, [-1.0, 0, 0], atol=1e-12)


def test_hit_misses():
    assert geo.first_sphere_hit(np.array([-2.0, 5.0, 0]), np.array([1.0, 0, 0]),
                                np.zeros(3), 1.0, 10.0) is None


def test_hit_offset_quadratic():
    # (-2 + t)^2 + 0.36 = 1  =>  t = 2 - 0.8
    t, _ = geo.first_sphere_hit(np.array([-2.0, 0.6, 0]), np.array([1.0, 0, 0]),
                                np.zeros(3), 1.0, 10.0)
    assert t == pytest.approx(1.2, abs=1e-12)


def test_hit_inside_is_degenerate():
    with pytest.raises(geo.DegenerateGeometryError):
        geo.first_sphere_hit(np.array([0.1, 0, 0]), np.array([1.0, 0, 0]),
                             np.zeros(3), 1.0, 10.0)


def test_hit_respects_t_max():
    assert geo.first_sphere_hit(np.array([-2.0, 0, 0]), np.array([1.0, 0, 0]),
                                np.zeros(3), 1.0, 0.5) is None


def test_grazing_counts_as_miss():
    geo.counters.reset()
    p = np.array([-2.0, 1.0, 0.0])  # exactly tangent line
    got = geo.first_sphere_hit(p, np.array([1.0, 0, 0]), np.zeros(3), 1.0, 10.0)
    assert got is None


def test_hit_agrees_with_grid_scan():
    # Brute-force oracle: scan |p + t v - c| on a grid of step 1e-4 * radius;
    # same hit/miss verdict and |t| agreement within 1e-3 * radius.
    rng = np.random.default_rng(123)
    n_cases = 10_000
    steps = 20_000
    mismatches = 0
    for start in range(0, n_cases, 500):
        m = min(500, n_cases - start)
        radius = rng.uniform(0.5, 1.5, m)
        t_max = steps * 1e-4 * radius
        p = rng.normal(size=(m, 3)) * 1.5
        v = random_units(rng, m)
        c = rng.normal(size=(m, 3)) * 1.0
        # push p outside the sphere
        d = p - c
        dist = np.linalg.norm(d, axis=1)
        bad = dist < radius * 1.05
        p[bad] = c[bad] + d[bad] / dist[bad, None] * (radius[bad] * 1.3)[:, None]
        ts = np.arange(steps + 1)[None, :] * (1e-4 * radius)[:, None]
        for i in range(m):
            pos = p[i][None, :] + ts[i][:, None] * v[i][None, :]
            dd = np.linalg.norm(pos - c[i][None, :], axis=1) - radius[i]
            inside = np.nonzero(dd <= 0.0)[0]
            grid_t = ts[i][inside[0]] if len(inside) else None
            got = geo.first_sphere_hit(p[i], v[i], c[i], radius[i], t_max[i])
            if grid_t is None and got is None:
                continue
            if grid_t is None or got is None:
                # the grid can miss a sliver-thin crossing; tolerate only those
                mismatches += 1
                continue
            assert abs(got[0] - grid_t) <= 1e-3 * radius[i]
    assert mismatches <= 3


def test_first_hit_among_matches_scalar():
    rng = np.random.default_rng(5)
    for _ in range(300):
        p = rng.normal(size=3) * 2
        v = unit(rng.normal(size=3))
        centers = rng.normal(size=(8, 3)) * 2
        r = 0.3
        d = centers - p
        dist = np.linalg.norm(d, axis=1)
        centers[dist < 1.4 * r] += 3.0
        best = None
        for k, c in enumerate(centers):
            got = geo.first_sphere_hit(p, v, c, r, 5.0)
            if got and (best is None or got[0] < best[0]):
                best = (got[0], k)
        got_many = geo.first_hit_among(p, v, centers, r, 5.0)
        if best is None:
            assert got_many is None
        else:
            assert got_many is not None
            assert got_many[1] == best[1]
            assert got_many[0] == pytest.approx(best[0], abs=1e-12)


# ---------------------------------------------------------------------------
# sojourn_length
# ---------------------------------------------------------------------------

def oracle_sojourn(x, w, e, s, t_hi=200.0, n=400_000):
    """Quadrature oracle: measure of {t' in (0, t_hi): dist(x + t'w, ray) < s}."""
    ts = (np.arange(n) + 0.5) * (t_hi / n)
    p = x[None, :] + ts[:, None] * w[None, :]
    pe = p @ e
    d2 = np.einsum("ij,ij->i", p, p) - np.where(pe < 0.0, pe, 0.0) ** 2
    return float((d2 < s * s).mean() * t_hi)


def test_sojourn_moving_away():
    assert geo.sojourn_length(np.array([0.0, 10.0, 0]), np.array([0.0, 1.0, 0]),
                              np.array([1.0, 0, 0]), 1.0) == 0.0


def test_sojourn_perpendicular_through_origin():
    # Confirmed against the quadrature oracle: the t' > 0 clip halves the
    # raw |t'| < s window, leaving measure exactly s.
    x = np.zeros(3)
    w = np.array([0.0, 1.0, 0.0])
    e = np.array([1.0, 0.0, 0.0])
    got = geo.sojourn_length(x, w, e, 1.0)
    assert got == pytest.approx(1.0, abs=1e-12)
    assert got == pytest.approx(oracle_sojourn(x, w, e, 1.0), abs=2e-3)


def test_sojourn_shrinking_tube():
    rng = np.random.default_rng(2)
    e = unit(rng.normal(size=3))
    # any w perpendicular to -e
    a = unit(np.cross(e, rng.normal(size=3)))
    x = rng.normal(size=3)
    assert geo.sojourn_length(x, a, e, 1e-6) <= 4e-6 / (math.pi / 2) + 1e-12


def test_sojourn_degenerate_antiparallel():
    e = np.array([1.0, 0.0, 0.0])
    x = np.array([-5.0, 0.2, 0.0])  # line stays within 0.3 of the axis
    assert geo.sojourn_length(x, -e, e, 0.3) == math.inf
    # outside the tube: finite
    x2 = np.array([-5.0, 2.0, 0.0])
    assert math.isfinite(geo.sojourn_length(x2, -e, e, 0.3))


def test_sojourn_matches_quadrature():
    rng = np.random.default_rng(77)
    checked = 0
    while checked < 250:
        x = rng.normal(size=3) * 3
        w = unit(rng.normal(size=3))
        e = unit(rng.normal(size=3))
        s = rng.uniform(0.05, 1.5)
        if geo.angle(-e, w) < 0.05:
            continue  # keep the sojourn well inside the oracle horizon
        got = geo.sojourn_length(x, w, e, s)
        assert math.isfinite(got)
        assert got == pytest.approx(oracle_sojourn(x, w, e, s), abs=6e-3 + 0.01 * got)
        checked += 1


def test_sojourn_angle_bound_small_sample():
    # The 4s/angle bound is a theorem only while sin(angle) >= angle/2
    # (angle <= ~1.895); the audited domain here is angle <= pi/2, plus the
    # exact all-angle relaxation 2s/sin(angle) from replacing the ray by
    # its full line.  The full 1e5-case audit is acceptance criterion 11.
    rng = np.random.default_rng(99)
    for _ in range(5000):
        x = rng.normal(size=3) * 2
        w = unit(rng.normal(size=3))
        e = unit(rng.normal(size=3))
        s = rng.uniform(0.01, 1.0)
        ang = geo.angle(-e, w)
        if ang < 0.01:
            continue
        got = geo.sojourn_length(x, w, e, s)
        assert got <= 2.0 * s / math.sin(ang) + 1e-9
        if ang <= math.pi / 2:
            assert got <= 4.0 * s / ang + 1e-9


def test_sojourn_obtuse_counterexample():
    # A mover riding the reference ray's own line toward its tip stays at
    # distance zero for |x| time units: the naive 4s/angle form (angle =
    # pi here) cannot hold, while the 2s/sin(angle) relaxation is vacuous.
    e = np.array([1.0, 0.0, 0.0])
    x = -5.0 * e
    s = 0.25
    got = geo.sojourn_length(x, e, e * -1.0 + 2.0 * e, s)  # w = +e
    assert got == pytest.approx(5.0 + s, abs=1e-12)
    assert got > 4.0 * s / math.pi
