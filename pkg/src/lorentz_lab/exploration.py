"""Exploration dynamics coupled to a flight stream.

The explorer replays a flight stream as a mechanical trajectory among
hard spheres of radius r that are *discovered* at scattering instants and
remembered forever.  While it sweeps fresh territory it reproduces the
flight path exactly; returning into remembered territory produces
recollisions (the explorer turns, the flight path does not) and shadowed
scatterings (the flight path turns, the explorer does not, and the
offered scatterer is suppressed because its ball would overlap the swept
tube).

Also provided: mechanical consistency/compatibility checkers for
piecewise-linear paths, and an independent billiard simulator in an
explicitly sampled Poisson field, used as a distributional oracle for the
explorer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    BudgetExceededError,
    DegenerateGeometryError,
    REL_TOL,
    counters,
    first_hit_among,
    points_segment_min_distance,
    reflect,
    segments_point_min_distance,
)
from .flight import FlightStream, PiecewisePath, sample_direction
from .streams import RngStream, cell_generator

SUBCOLLISION_BUDGET = 10 ** 6

RECOLLISION = "recollision"
SHADOWED = "shadowed-scattering"
FRESH = "fresh-scattering"


@dataclass
class Event:
    kind: str
    time: float
    flight_index: int
    scatterer: int


@dataclass
class EventLog:
    """Timestamped recollision / shadowing / fresh-scattering records."""

    records: list = field(default_factory=list)

    def append(self, kind, time, flight_index, scatterer=-1):
        self.records.append(Event(kind, time, flight_index, scatterer))

    def first_time(self, kinds) -> float | None:
        ts = [ev.time for ev in self.records if ev.kind in kinds]
        return min(ts) if ts else None

    def count(self, kind) -> int:
        return sum(1 for ev in self.records if ev.kind == kind)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


class _PointGrid:
    """Uniform hash grid over points; queries return a superset of the
    points within ``pad`` of a query segment."""

    def __init__(self, cell: float):
        self.cell = cell
        self.cells: dict = {}

    def insert(self, idx: int, p: np.ndarray) -> None:
        key = (int(math.floor(p[0] / self.cell)),
               int(math.floor(p[1] / self.cell)),
               int(math.floor(p[2] / self.cell)))
        self.cells.setdefault(key, []).append(idx)

    def near_segment(self, p0: np.ndarray, p1: np.ndarray, pad: float) -> list:
        lo = np.minimum(p0, p1) - pad
        hi = np.maximum(p0, p1) + pad
        out: list = []
        for ix in range(int(math.floor(lo[0] / self.cell)), int(math.floor(hi[0] / self.cell)) + 1):
            for iy in range(int(math.floor(lo[1] / self.cell)), int(math.floor(hi[1] / self.cell)) + 1):
                for iz in range(int(math.floor(lo[2] / self.cell)), int(math.floor(hi[2] / self.cell)) + 1):
                    got = self.cells.get((ix, iy, iz))
                    if got:
                        out.extend(got)
        return out


class _SegmentGrid:
    """Uniform hash grid over segments, for point-vs-swept-tube queries."""

    def __init__(self, cell: float):
        self.cell = cell
        self.cells: dict = {}

    def insert(self, idx: int, p0: np.ndarray, p1: np.ndarray) -> None:
        lo = np.minimum(p0, p1)
        hi = np.maximum(p0, p1)
        for ix in range(int(math.floor(lo[0] / self.cell)), int(math.floor(hi[0] / self.cell)) + 1):
            for iy in range(int(math.floor(lo[1] / self.cell)), int(math.floor(hi[1] / self.cell)) + 1):
                for iz in range(int(math.floor(lo[2] / self.cell)), int(math.floor(hi[2] / self.cell)) + 1):
                    self.cells.setdefault((ix, iy, iz), []).append(idx)

    def near_point(self, p: np.ndarray, pad: float) -> list:
        out: list = []
        seen = set()
        for ix in range(int(math.floor((p[0] - pad) / self.cell)), int(math.floor((p[0] + pad) / self.cell)) + 1):
            for iy in range(int(math.floor((p[1] - pad) / self.cell)), int(math.floor((p[1] + pad) / self.cell)) + 1):
                for iz in range(int(math.floor((p[2] - pad) / self.cell)), int(math.floor((p[2] + pad) / self.cell)) + 1):
                    for idx in self.cells.get((ix, iy, iz), ()):
                        if idx not in seen:
                            seen.add(idx)
                            out.append(idx)
        return out


STAR = -1  # suppressed scatterer marker: behaves as infinitely far away


@dataclass
class Scatterer:
    center: np.ndarray | None  # None encodes the suppressed (STAR) case
    birth_index: int


class ScattererSet:
    """Discovered scatterer centers with a uniform grid index.

    Suppressed scatterings are kept as STAR entries so that scatterer ids
    track scattering indices; only real centers enter the grid.
    """

    def __init__(self, r: float):
        self.r = r
        self.items: list[Scatterer] = []
        self.grid = _PointGrid(cell=max(1.0, 4.0 * r))
        self._centers: list[np.ndarray] = []
        self._ids: list[int] = []

    def add(self, center: np.ndarray, birth_index: int) -> int:
        idx = len(self.items)
        self.items.append(Scatterer(center, birth_index))
        self.grid.insert(len(self._centers), center)
        self._centers.append(center)
        self._ids.append(idx)
        return idx

    def add_star(self, birth_index: int) -> int:
        idx = len(self.items)
        self.items.append(Scatterer(None, birth_index))
        return idx

    def real_centers(self) -> np.ndarray:
        if not self._centers:
            return np.empty((0, 3))
        return np.asarray(self._centers)

    def near_segment(self, p0: np.ndarray, p1: np.ndarray):
        """(centers, ids) of all stored scatterers possibly within r of the
        segment (a superset; exact tests are done by the caller)."""
        rows = self.grid.near_segment(p0, p1, self.r * (1.0 + 1e-6))
        if not rows:
            return np.empty((0, 3)), []
        pts = np.asarray([self._centers[i] for i in rows])
        return pts, [self._ids[i] for i in rows]

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class ExplorationResult:
    path: PiecewisePath
    scatterers: ScattererSet
    events: EventLog
    first_mismatch: float | None


def candidate_center(xn, v_in, u_out, r):
    """Center of the sphere that would turn v_in into u_out at point xn.

    Sits at distance exactly r from xn along (v_in - u_out); tangent to
    both the incoming and outgoing rays.
    """
    d = v_in - u_out
    nrm = math.sqrt(float(d @ d))
    if nrm == 0.0:
        counters.degenerate_inputs += 1
        raise DegenerateGeometryError("incoming and outgoing directions bitwise equal")
    return xn + (r / nrm) * d


def shadow_test(past: PiecewisePath, candidate: np.ndarray, r: float):
    """Exact shadow decision for a candidate center against a past path.

    Returns (shadowed, d) where d is the min distance from the path to the
    candidate.  The path's current endpoint is tangent by construction, so
    d <= r always; shadowed iff d < r*(1 - 1e-9), the tolerance absorbing
    rounding around the exact-arithmetic acceptance case d = r.
    """
    d = segments_point_min_distance(past.points[:-1], past.points[1:], candidate)
    return d < r * (1.0 - REL_TOL), d


def explore(fs: FlightStream, r: float, t_max: float) -> ExplorationResult:
    """Run the explorer over the flight stream up to time t_max.

    Each scattering interval is mechanical free flight with elastic
    collisions on the discovered scatterers (several recollisions may
    chain inside one interval).  At each scattering time the offered
    center is placed at distance r from the current point along
    (incoming - offered direction); it is accepted unless the whole past
    path has already swept within r of it, in which case the scattering
    is shadowed and suppressed.
    """
    if not 0.0 < r < 0.5:
        raise ValueError("r must lie in (0, 0.5)")
    if fs.taus[-1] + 1e-12 < t_max:
        raise ValueError("flight stream ends before t_max")
    u1 = fs.u[0]
    scat = ScattererSet(r)
    scat.add(candidate_center(np.zeros(3), fs.u0, u1, r), birth_index=0)
    segs = _SegmentGrid(cell=max(1.0, 4.0 * r))
    seg_p0: list[np.ndarray] = []
    seg_p1: list[np.ndarray] = []

    times = [0.0]
    pts = [np.zeros(3)]
    vels: list[np.ndarray] = []
    events = EventLog()

    pos = np.zeros(3)
    vel = u1
    t_now = 0.0
    mismatch: float | None = None

    def add_segment(t_end, new_pos, v):
        seg_p0.append(pos.copy())
        seg_p1.append(new_pos.copy())
        segs.insert(len(seg_p0) - 1, seg_p0[-1], seg_p1[-1])
        times.append(t_end)
        pts.append(new_pos.copy())
        vels.append(v.copy())

    n = 0  # flights completed
    while t_now < t_max and n < fs.n_flights:
        tau_n = float(fs.taus[n])
        t_end = min(tau_n, t_max)
        remaining = t_end - t_now
        chain = 0
        while remaining > 0.0:
            cand, ids = scat.near_segment(pos, pos + vel * remaining)
            hit = first_hit_among(pos, vel, cand, r, remaining) if len(cand) else None
            if hit is None:
                new_pos = pos + remaining * vel
                add_segment(t_end, new_pos, vel)
                pos = new_pos
                t_now = t_end
                break
            th, k, nrm = hit
            t_now += th
            if th > 0.0:
                new_pos = pos + th * vel
                add_segment(t_now, new_pos, vel)
                pos = new_pos
            events.append(RECOLLISION, t_now, n + 1, ids[k])
            if mismatch is None:
                mismatch = t_now
            vel = reflect(vel, nrm)
            remaining -= th
            chain += 1
            if chain > SUBCOLLISION_BUDGET:
                raise BudgetExceededError("recollision chain exceeded budget")
        if tau_n > t_max or n + 1 >= fs.n_flights:
            break
        # Scattering decision at tau_n: accept the offered turn unless the
        # past tube shadows the candidate center.
        u_next = fs.u[n + 1]
        cand_c = candidate_center(pos, vel, u_next, r)
        rows = segs.near_point(cand_c, r * (1.0 + 1e-6))
        dmin = segments_point_min_distance(
            np.asarray([seg_p0[i] for i in rows]),
            np.asarray([seg_p1[i] for i in rows]),
            cand_c,
        )
        if dmin < r * (1.0 - REL_TOL):
            scat.add_star(birth_index=n + 1)
            events.append(SHADOWED, tau_n, n + 1, STAR)
            if mismatch is None:
                mismatch = tau_n
        else:
            sid = scat.add(cand_c, birth_index=n + 1)
            events.append(FRESH, tau_n, n + 1, sid)
            vel = u_next
        n += 1

    path = PiecewisePath(np.asarray(times), np.asarray(pts), np.asarray(vels))
    return ExplorationResult(path, scat, events, mismatch)


@dataclass
class ConsistencyReport:
    ok: bool
    worst_violation: float
    min_distance: float


def check_r_consistent(path: PiecewisePath, scatterer_centers, r: float,
                       chunk: int = 4096) -> ConsistencyReport:
    """Does the path stay outside all scatterer balls except for tangencies?

    ok iff the min over (path point, center) distances is >= r*(1 - 1e-9);
    collisions attain equality exactly, so a consistent mechanical path
    reports min_distance == r up to rounding.
    """
    centers = np.asarray(scatterer_centers, dtype=float).reshape(-1, 3)
    if len(centers) == 0 or len(path.velocities) == 0:
        return ConsistencyReport(True, 0.0, math.inf)
    dmin = math.inf
    p0, p1 = path.points[:-1], path.points[1:]
    for i in range(0, len(centers), chunk):
        for q in centers[i:i + chunk]:
            d = segments_point_min_distance(p0, p1, q)
            if d < dmin:
                dmin = d
    return ConsistencyReport(dmin >= r * (1.0 - REL_TOL), max(0.0, r - dmin), dmin)


def check_r_compatible(path_a: PiecewisePath, path_b: PiecewisePath, r: float,
                       centers_a=None, centers_b=None) -> bool:
    """Mechanical compatibility of two paths over disjoint time intervals.

    True iff a's path stays >= r away from b's centers and vice versa.
    By default each path's centers are derived from its own interior
    velocity changes; explicit center sets may be passed instead (e.g. to
    include a junction center).  Overlapping time supports are an error.
    """
    a_first = path_a.times[0] <= path_b.times[0]
    lo, hi = (path_a, path_b) if a_first else (path_b, path_a)
    if lo.times[-1] > hi.times[0] + 1e-12:
        raise ValueError("paths must cover non-overlapping time intervals")
    if centers_a is None:
        centers_a = path_a.breakpoint_centers(r)[0]
    if centers_b is None:
        centers_b = path_b.breakpoint_centers(r)[0]
    thresh = r * (1.0 - REL_TOL)
    for path, centers in ((path_a, centers_b), (path_b, centers_a)):
        for q in np.asarray(centers, dtype=float).reshape(-1, 3):
            if segments_point_min_distance(path.points[:-1], path.points[1:], q) < thresh:
                return False
    return True


class LazyPoissonField:
    """Poisson point field sampled lazily on unit cells.

    Cell contents depend only on (key, cell), so the same realisation is
    reproduced no matter in what order a trajectory explores it.
    """

    def __init__(self, key64: int, intensity: float, cell: float = 1.0):
        self.key = key64
        self.intensity = intensity
        self.cell = cell
        self._cache: dict = {}

    def _cell_points(self, ix: int, iy: int, iz: int) -> np.ndarray:
        key = (ix, iy, iz)
        got = self._cache.get(key)
        if got is None:
            gen = cell_generator(self.key, ix, iy, iz)
            n = int(gen.poisson(self.intensity * self.cell ** 3))
            got = (np.array([ix, iy, iz], dtype=float) + gen.random((n, 3))) * self.cell
            self._cache[key] = got
        return got

    def near_segment(self, p0: np.ndarray, p1: np.ndarray, pad: float) -> np.ndarray:
        lo = np.minimum(p0, p1) - pad
        hi = np.maximum(p0, p1) + pad
        parts = []
        for ix in range(int(math.floor(lo[0] / self.cell)), int(math.floor(hi[0] / self.cell)) + 1):
            for iy in range(int(math.floor(lo[1] / self.cell)), int(math.floor(hi[1] / self.cell)) + 1):
                for iz in range(int(math.floor(lo[2] / self.cell)), int(math.floor(hi[2] / self.cell)) + 1):
                    pts = self._cell_points(ix, iy, iz)
                    if len(pts):
                        parts.append(pts)
        if not parts:
            return np.empty((0, 3))
        return np.vstack(parts)

    def origin_covered(self, r: float) -> bool:
        pts = self.near_segment(np.zeros(3), np.zeros(3), r)
        if not len(pts):
            return False
        return bool(np.any(np.einsum("ij,ij->i", pts, pts) < r * r))


def _billiard(lookup, start, u0, r, t_max):
    """Free flight plus elastic collisions against spheres supplied by
    ``lookup(p0, p1) -> centers``; returns (path, collision_times)."""
    pos = np.asarray(start, dtype=float)
    vel = np.asarray(u0, dtype=float)
    times = [0.0]
    pts = [pos.copy()]
    vels = []
    col_times: list[float] = []
    t_now = 0.0
    ncol = 0
    while t_now < t_max:
        remaining = t_max - t_now
        cand = lookup(pos, pos + vel * remaining)
        hit = first_hit_among(pos, vel, cand, r, remaining) if len(cand) else None
        if hit is None:
            pos = pos + remaining * vel
            times.append(t_max)
            pts.append(pos.copy())
            vels.append(vel.copy())
            break
        th, k, nrm = hit
        t_now += th
        if th > 0.0:
            pos = pos + th * vel
            times.append(t_now)
            pts.append(pos.copy())
            vels.append(vel.copy())
        vel = reflect(vel, nrm)
        col_times.append(t_now)
        ncol += 1
        if ncol > SUBCOLLISION_BUDGET:
            raise BudgetExceededError("trapped trajectory: collision budget exceeded")
    return PiecewisePath(np.asarray(times), np.asarray(pts), np.asarray(vels)), col_times


def direct_field_simulate(field, r: float, u0, t_max: float):
    """Deterministic billiard trajectory in a fixed scatterer field.

    ``field`` is either an (n, 3) array-like of centers or a
    LazyPoissonField.  The origin must not be covered by a scatterer.
    Returns (path, collision_times).
    """
    if isinstance(field, LazyPoissonField):
        if field.origin_covered(r):
            counters.degenerate_inputs += 1
            raise DegenerateGeometryError("origin covered by a scatterer")
        pad = r * (1.0 + 1e-6)
        return _billiard(lambda a, b: field.near_segment(a, b, pad),
                         np.zeros(3), u0, r, t_max)
    centers = np.asarray(field, dtype=float).reshape(-1, 3)
    if len(centers) and np.any(np.einsum("ij,ij->i", centers, centers) < r * r):
        counters.degenerate_inputs += 1
        raise DegenerateGeometryError("origin covered by a scatterer")
    if len(centers) > 256:
        grid = _PointGrid(cell=max(1.0, 4.0 * r))
        for i, c in enumerate(centers):
            grid.insert(i, c)
        pad = r * (1.0 + 1e-6)

        def lookup(a, b):
            rows = grid.near_segment(a, b, pad)
            return centers[rows] if rows else np.empty((0, 3))
    else:
        def lookup(a, b):
            return centers
    return _billiard(lookup, np.zeros(3), u0, r, t_max)


def poisson_billiard_trial(stream: RngStream, r: float, t_max: float):
    """One annealed billiard trial: fresh Poisson field with the rate-1
    mean-free-path normalisation (intensity 1/(pi r^2)), uniform initial
    direction, resampled until the origin is uncovered.

    Returns (path, collision_times, attempts).
    """
    u0 = sample_direction(stream)
    intensity = 1.0 / (math.pi * r * r)
    attempt = 0
    while True:
        field = LazyPoissonField(stream.spawn_key(attempt), intensity)
        if not field.origin_covered(r):
            path, cols = direct_field_simulate(field, r, u0, t_max)
            return path, cols, attempt + 1
        attempt += 1
        if attempt > 10000:
            raise BudgetExceededError("origin kept being covered; bad intensity?")
