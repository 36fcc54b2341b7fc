import math

import numpy as np
import pytest
from scipy import stats

from lorentz_lab import exploration as ex
from lorentz_lab import flight as fl
from lorentz_lab.geometry import DegenerateGeometryError
from lorentz_lab.streams import RngStream


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# candidate centers and shadow tests
# ---------------------------------------------------------------------------

def test_candidate_center_head_on():
    c = ex.candidate_center(np.zeros(3), np.array([1.0, 0, 0]),
                            np.array([-1.0, 0, 0]), 0.1)
    assert np.allclose(c, [0.1, 0, 0], atol=1e-15)


def test_candidate_center_right_angle():
    c = ex.candidate_center(np.zeros(3), np.array([1.0, 0, 0]),
                            np.array([0.0, 1.0, 0]), 0.1)
    s = 0.1 / math.sqrt(2)
    assert np.allclose(c, [s, -s, 0], atol=1e-15)


def test_candidate_center_degenerate():
    u = unit([1, 2, 3])
    with pytest.raises(DegenerateGeometryError):
        ex.candidate_center(np.zeros(3), u, u.copy(), 0.1)


def _path(points):
    pts = np.asarray(points, dtype=float)
    seg = np.diff(pts, axis=0)
    lens = np.linalg.norm(seg, axis=1)
    return fl.PiecewisePath(np.concatenate(([0.0], np.cumsum(lens))), pts,
                            seg / lens[:, None])


def test_shadow_fresh_territory():
    r = 0.05
    past = _path([[0, 0, 0], [2, 0, 0]])
    cand = ex.candidate_center(np.array([2.0, 0, 0]), np.array([1.0, 0, 0]),
                               unit([1, 1, 0]), r)
    shadowed, d = ex.shadow_test(past, cand, r)
    assert not shadowed
    assert d == pytest.approx(r, rel=1e-12)


def test_shadow_swept_tube():
    r = 0.05
    # an early sweep passes within r of where the candidate will sit
    past = _path([[0, 0.5, -0.03], [3, 0.5, -0.03], [3, 2, 0], [0, 2, 0],
                  [0, 0.5, 0], [1.9, 0.5, 0]])
    cand = ex.candidate_center(past.points[-1], np.array([1.0, 0, 0]),
                               np.array([0.0, 0, 1.0]), r)
    # candidate sits near (1.935, 0.5, -0.035); the first segment ran along
    # (x, 0.5, -0.03), a miss distance of ~0.005
    shadowed, d = ex.shadow_test(past, cand, r)
    assert shadowed
    assert d < r * 0.5


def test_shadow_distance_matches_grid_oracle():
    rng = np.random.default_rng(31)
    r = 0.1
    for _ in range(300):
        pts = np.cumsum(rng.normal(size=(6, 3)) * 0.8, axis=0)
        path = _path(pts)
        q = pts[-1] + rng.normal(size=3) * 0.5
        ts = np.arange(0.0, path.times[-1], r / 100.0)
        grid = np.linalg.norm(path.position(ts) - q, axis=1).min()
        d = ex.segments_point_min_distance(path.points[:-1], path.points[1:], q)
        assert abs(d - grid) <= r / 50.0


# ---------------------------------------------------------------------------
# the explorer
# ---------------------------------------------------------------------------

def _explore_trial(seed, trial, r, T):
    fs = fl.generate_flight_stream(RngStream(seed, trial), T)
    return fs, ex.explore(fs, r, T)


def test_explorer_matches_flight_path_before_mismatch():
    max_rel = 0.0
    clean = 0
    for trial in range(300):
        fs, res = _explore_trial(21, trial, 0.01, 20.0)
        ypath = fl.flight_path(fs, t_max=20.0)
        t_stop = res.first_mismatch if res.first_mismatch is not None else 20.0
        ts = np.union1d(res.path.times, ypath.times)
        ts = ts[ts < t_stop - 1e-12]
        if len(ts):
            diff = np.linalg.norm(res.path.position(ts) - ypath.position(ts), axis=1)
            max_rel = max(max_rel, float((diff / (1.0 + ts)).max()))
        if res.first_mismatch is None:
            clean += 1
            end = np.linalg.norm(res.path.end_point - ypath.end_point)
            assert end <= 1e-9 * 21.0
    assert max_rel <= 1e-9
    assert clean > 200  # at r = 0.01, T = 20 most trials never mismatch


def test_explorer_paths_are_consistent():
    for trial in range(200):
        fs, res = _explore_trial(22, trial, 0.02, 15.0)
        rep = ex.check_r_consistent(res.path, res.scatterers.real_centers(), 0.02)
        assert rep.ok
        # tangency attained: some collision sits at distance exactly r
        assert rep.min_distance == pytest.approx(0.02, rel=1e-9)


def test_explorer_collision_geometry():
    # at every recollision the impact point is at distance r from the
    # scatterer and the speed stays 1
    found = 0
    for trial in range(400):
        fs, res = _explore_trial(23, trial, 0.05, 30.0)
        centers = res.scatterers
        for ev in res.events:
            if ev.kind != ex.RECOLLISION:
                continue
            p = res.path.position(ev.time)
            c = centers.items[ev.scatterer].center
            assert np.linalg.norm(p - c) == pytest.approx(0.05, rel=1e-9)
            found += 1
        sp = np.linalg.norm(res.path.velocities, axis=1)
        assert np.abs(sp - 1.0).max() <= 1e-12
        if found > 50:
            break
    assert found > 10


def test_explorer_shadowed_scatterings_are_stars():
    seen = 0
    for trial in range(400):
        fs, res = _explore_trial(24, trial, 0.05, 30.0)
        for ev in res.events:
            if ev.kind == ex.SHADOWED:
                assert ev.scatterer == ex.STAR
                seen += 1
        if seen > 10:
            break
    assert seen > 0


def test_first_mismatch_is_first_event():
    for trial in range(200):
        fs, res = _explore_trial(25, trial, 0.05, 30.0)
        t = res.events.first_time((ex.RECOLLISION, ex.SHADOWED))
        assert t == res.first_mismatch or (t is None and res.first_mismatch is None)


# ---------------------------------------------------------------------------
# consistency / compatibility checkers
# ---------------------------------------------------------------------------

def test_consistency_empty_centers():
    path = _path([[0, 0, 0], [1, 0, 0]])
    assert ex.check_r_consistent(path, np.empty((0, 3)), 0.05).ok


def test_forced_recollision_is_inconsistent():
    # short middle flight, then a turn-back: the third flight passes within
    # r/sqrt(2) of the first turn's scatterer center (grid oracle below)
    r = 0.1
    fs = fl.FlightStream(u0=np.array([0.0, 0, 1.0]),
                         xi=np.array([2.0, 0.5, 2.0]),
                         u=np.array([[0.0, 1.0, 0], [1.0, 0, 0], [-1.0, 0, 0]]),
                         eps=np.array([0, 1, 0], dtype=np.uint8))
    path = fl.flight_path(fs)
    centers = fl.virtual_scatterers(fs, r)
    rep = ex.check_r_consistent(path, centers, r)
    assert not rep.ok
    assert rep.worst_violation == pytest.approx(r - r / math.sqrt(2), rel=1e-9)
    ts = np.arange(0.0, path.times[-1], r / 200.0)
    grid = min(np.linalg.norm(path.position(ts) - c, axis=1).min() for c in centers)
    assert rep.min_distance == pytest.approx(grid, abs=r / 100.0)


def test_compatibility_far_apart_and_concatenation():
    a = _path([[0, 0, 0], [1, 0, 0], [1, 1, 0]])
    b = _path([[50, 0, 0], [51, 0, 0], [51, 1, 0]])
    b = fl.PiecewisePath(b.times + a.times[-1], b.points, b.velocities)
    assert ex.check_r_compatible(a, b, 0.05)
    with pytest.raises(ValueError):
        ex.check_r_compatible(a, fl.PiecewisePath(a.times, b.points, b.velocities), 0.05)


# ---------------------------------------------------------------------------
# fixed-field billiard
# ---------------------------------------------------------------------------

def test_field_empty_is_straight():
    path, cols = ex.direct_field_simulate(np.empty((0, 3)), 0.05,
                                          np.array([1.0, 0, 0]), 5.0)
    assert not cols
    assert np.allclose(path.end_point, [5.0, 0, 0], atol=1e-12)


def test_field_head_on_reverses():
    path, cols = ex.direct_field_simulate(np.array([[2.0, 0, 0]]), 0.5,
                                          np.array([1.0, 0, 0]), 5.0)
    assert len(cols) == 1
    assert cols[0] == pytest.approx(1.5, abs=1e-12)
    assert np.allclose(path.velocities[-1], [-1.0, 0, 0], atol=1e-12)


def test_field_origin_covered_raises():
    with pytest.raises(DegenerateGeometryError):
        ex.direct_field_simulate(np.array([[0.01, 0, 0]]), 0.05,
                                 np.array([1.0, 0, 0]), 1.0)


def test_lazy_field_is_query_order_independent():
    f1 = ex.LazyPoissonField(1234, 5.0)
    f2 = ex.LazyPoissonField(1234, 5.0)
    a = f1.near_segment(np.zeros(3), np.array([2.0, 0, 0]), 0.1)
    f2.near_segment(np.array([5.0, 5, 5]), np.array([6.0, 5, 5]), 0.1)
    b = f2.near_segment(np.zeros(3), np.array([2.0, 0, 0]), 0.1)
    assert np.array_equal(np.sort(a.ravel()), np.sort(b.ravel()))


def test_poisson_billiard_first_collision_is_exponential():
    # rate-1 normalisation: intensity 1/(pi r^2) makes the first free path
    # Exp(1) exactly (the far cap of the swept capsule exactly offsets the
    # excluded ball at the origin)
    r = 0.05
    firsts = []
    for trial in range(2500):
        st = RngStream(900, trial)
        path, cols, attempts = ex.poisson_billiard_trial(st, r, 8.0)
        assert attempts >= 1
        if cols:
            firsts.append(cols[0])
    firsts = np.asarray(firsts)
    assert len(firsts) > 2480  # losing only the e^-8 censored tail
    assert stats.kstest(firsts, "expon").pvalue > 0.01
