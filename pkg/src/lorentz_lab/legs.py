"""Short-sighted trajectory, packs, legs and per-leg exploration.

The short-sighted process follows the flight stream but honours only the
two *direct* memory effects: shadowing of a scattering by the immediately
preceding flight segment, and recollision with the last seen scatterer.
Both are gated on the previous flight being shorter than one mean free
path, which is what makes disjoint blocks of the construction
independent.

Blocks ("packs") are cut at stopping indices where four consecutive
flights all exceed one mean free path; the pack length can be 2 or >= 5
but never 1, 3 or 4.  Legs built from distinct packs are independent, and
a pack can be time-reversed into an identically distributed one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    BudgetExceededError,
    DegenerateGeometryError,
    REL_TOL,
    angle,
    counters,
    first_hit_among,
    reflect,
    segments_point_min_distance,
)
from .exploration import candidate_center
from .flight import FlightStream, PiecewisePath
from .streams import RngStream

BOUNCE_BUDGET = 10 ** 6


# ---------------------------------------------------------------------------
# Interference indicators
# ---------------------------------------------------------------------------

def eta_indicators(y_prev2, y_prev, y_cur, r):
    """Direct-interference bits for one scattering, from the three flight
    displacement vectors around it.

    Writing xi = |y| and u = y/xi for each displacement, and gating both
    bits on xi_prev < 1:

    * the shadow bit fires when the ball of radius r around the newly
      offered center (at distance r along u_prev - u_cur from the turn
      point) intersects the second-to-last flight segment;
    * the recollide bit fires when the current flight segment enters the
      ball of the previously seen scatterer (at distance r along
      u_prev2 - u_prev from the previous turn point).

    Exact closed-form point/segment distances; no sampling.
    """
    xi_prev2 = math.sqrt(float(y_prev2 @ y_prev2))
    xi_prev = math.sqrt(float(y_prev @ y_prev))
    xi_cur = math.sqrt(float(y_cur @ y_cur))
    if min(xi_prev2, xi_prev, xi_cur) == 0.0:
        counters.degenerate_inputs += 1
        raise DegenerateGeometryError("zero-length flight displacement")
    if xi_prev >= 1.0:
        return 0, 0
    u_prev2 = y_prev2 / xi_prev2
    u_prev = y_prev / xi_prev
    u_cur = y_cur / xi_cur

    d1 = u_prev - u_cur
    n1 = math.sqrt(float(d1 @ d1))
    d2 = u_prev - u_prev2
    n2 = math.sqrt(float(d2 @ d2))
    if n1 == 0.0 or n2 == 0.0:
        counters.degenerate_inputs += 1
        raise DegenerateGeometryError("coincident flight directions")

    c_hat = y_prev + (r / n1) * d1
    t = -float(c_hat @ u_prev2)
    t = min(max(t, 0.0), xi_prev2)
    v = c_hat + t * u_prev2
    hat = 1 if float(v @ v) < r * r else 0

    c_til = y_prev + (r / n2) * d2
    t = -float(c_til @ u_cur)
    t = min(max(t, 0.0), xi_cur)
    v = c_til + t * u_cur
    tilde = 1 if float(v @ v) < r * r else 0
    return hat, tilde


def eta_prime_indicators(xi_prev, u_prev2, u_prev, u_cur, r):
    """Coarse cone versions of the interference bits: pure angle tests
    against the aperture 2r/xi_prev.  They dominate the exact bits except
    on rare borderline configurations (short flights wrapped inside the
    offered ball), so they are compared in expectation, not pathwise."""
    ap = 2.0 * r / xi_prev
    hat = 1 if angle(-u_prev, u_prev2) < ap else 0
    tilde = 1 if angle(-u_prev, u_cur) < ap else 0
    return hat, tilde


def eta_flags(xi: np.ndarray, u: np.ndarray, r: float):
    """Vectorised interference bits over a whole stream.

    Returns boolean arrays (hat, tilde) aligned with the flights; entries
    0 and 1 are always False (their predecessors are outside the stream,
    and the runs that use them are conditioned so the gate is off there).
    """
    n = len(xi)
    hat = np.zeros(n, dtype=bool)
    tilde = np.zeros(n, dtype=bool)
    if n < 3:
        return hat, tilde
    xi_p2, xi_p, xi_c = xi[:-2], xi[1:-1], xi[2:]
    u_p2, u_p, u_c = u[:-2], u[1:-1], u[2:]
    gate = xi_p < 1.0

    y_prev = xi_p[:, None] * u_p
    d1 = u_p - u_c
    n1 = np.sqrt(np.einsum("ij,ij->i", d1, d1))
    ok1 = n1 > 0.0
    c1 = y_prev + r * d1 / np.where(ok1, n1, 1.0)[:, None]
    t = -np.einsum("ij,ij->i", c1, u_p2)
    np.clip(t, 0.0, xi_p2, out=t)
    v = c1 + t[:, None] * u_p2
    hat[2:] = gate & ok1 & (np.einsum("ij,ij->i", v, v) < r * r)

    d2 = u_p - u_p2
    n2 = np.sqrt(np.einsum("ij,ij->i", d2, d2))
    ok2 = n2 > 0.0
    c2 = y_prev + r * d2 / np.where(ok2, n2, 1.0)[:, None]
    t = -np.einsum("ij,ij->i", c2, u_c)
    np.clip(t, 0.0, xi_c, out=t)
    v = c2 + t[:, None] * u_c
    tilde[2:] = gate & ok2 & (np.einsum("ij,ij->i", v, v) < r * r)
    return hat, tilde


def eta_prime_flags(xi: np.ndarray, u: np.ndarray, r: float):
    """Vectorised cone bits (see eta_prime_indicators)."""
    n = len(xi)
    hat = np.zeros(n, dtype=bool)
    tilde = np.zeros(n, dtype=bool)
    if n < 3:
        return hat, tilde
    ap = 2.0 * r / xi[1:-1]
    cos_back = -np.einsum("ij,ij->i", u[1:-1], u[:-2])
    cos_fwd = -np.einsum("ij,ij->i", u[1:-1], u[2:])
    hat[2:] = np.arccos(np.clip(cos_back, -1.0, 1.0)) < ap
    tilde[2:] = np.arccos(np.clip(cos_fwd, -1.0, 1.0)) < ap
    return hat, tilde


@dataclass
class EtaRecords:
    """Per-flight interference bits plus their cone majorants."""

    hat: np.ndarray
    tilde: np.ndarray
    hat_prime: np.ndarray
    tilde_prime: np.ndarray

    @property
    def eta(self) -> np.ndarray:
        return self.hat | self.tilde


# ---------------------------------------------------------------------------
# Packs
# ---------------------------------------------------------------------------

@dataclass
class Pack:
    """A block of flights between stopping indices.

    Invariants: gamma in {2} union {5, 6, ...}; the first two and last two
    flight times exceed 1; the stopping condition (four consecutive long
    flights, looking across the right boundary where needed) first holds
    at the pack end.
    """

    xi: np.ndarray
    u: np.ndarray

    @property
    def gamma(self) -> int:
        return len(self.xi)

    @property
    def theta(self) -> float:
        return float(self.xi.sum())

    def validate(self) -> None:
        g = self.gamma
        if g in (1, 3, 4):
            raise ValueError(f"forbidden pack length {g}")
        f = np.concatenate((self.xi > 1.0, [True, True]))  # successors are long
        if not (f[0] and f[1] and f[g - 2] and f[g - 1]):
            raise ValueError("pack boundary flights must exceed 1")
        for j in range(2, g):  # stopping must first hold at j = gamma
            if f[j - 2] and f[j - 1] and f[j] and f[j + 1]:
                raise ValueError(f"stopping condition already holds at {j}")


def pack_boundaries(xi: np.ndarray) -> np.ndarray:
    """Stopping indices (1-based flight counts) cutting the stream into
    complete packs.  The rule needs two flights of lookahead, so the last
    usable index is n - 2."""
    f = xi > 1.0
    if len(xi) < 4:
        return np.empty(0, dtype=np.int64)
    cand = np.nonzero(f[:-3] & f[1:-2] & f[2:-1] & f[3:])[0] + 2
    stops: list[int] = []
    prev = 0
    for j in cand:
        if j >= prev + 2:
            stops.append(int(j))
            prev = int(j)
    return np.asarray(stops, dtype=np.int64)


def cut_packs(fs: FlightStream):
    """Cut the stream into complete packs (the trailing partial block is
    dropped).  The stream must have been generated with its first two
    flight times conditioned to exceed 1."""
    if fs.n_flights < 2 or min(float(fs.xi[0]), float(fs.xi[1])) <= 1.0:
        raise ValueError("stream must start with two long flights")
    stops = pack_boundaries(fs.xi)
    packs = []
    prev = 0
    for j in stops:
        packs.append(Pack(fs.xi[prev:j].copy(), fs.u[prev:j].copy()))
        prev = j
    return packs


def reverse_pack(p: Pack) -> Pack:
    """Time reversal of a pack: reversed flight times, negated reversed
    directions.  An involution, and distribution preserving."""
    return Pack(p.xi[::-1].copy(), -p.u[::-1].copy())


def sample_pack(stream: RngStream) -> Pack:
    """One pack drawn from fresh randomness (first two flights long).

    The stream is extended until the first stopping index appears, so the
    pack law carries no horizon bias (packs average ~74 flights; their
    length distribution has an exponential tail with rate ~0.013).
    """
    from .flight import _dirs_from_uniforms, _xi_from_uniform, sample_direction

    sample_direction(stream)  # u0 slot, kept for draw-order parity
    xi_parts: list[np.ndarray] = []
    u_parts: list[np.ndarray] = []
    n = 0
    block = 160
    while True:
        raw = stream.uniforms(3 * block).reshape(block, 3)
        xi = _xi_from_uniform(raw[:, 0], "none")
        if n == 0:
            xi[:2] = _xi_from_uniform(raw[:2, 0], "eps=0")
        xi_parts.append(xi)
        u_parts.append(_dirs_from_uniforms(raw[:, 1], raw[:, 2]))
        n += block
        stops = pack_boundaries(np.concatenate(xi_parts))
        if len(stops):
            j = int(stops[0])
            xi_all = np.concatenate(xi_parts)
            u_all = np.concatenate(u_parts)
            return Pack(xi_all[:j].copy(), u_all[:j].copy())
        block = 256


# ---------------------------------------------------------------------------
# Short-sighted trajectory construction
# ---------------------------------------------------------------------------

def _bounce_chain(pos, vel, centers, r, t_budget):
    """Elastic bounce chain among the given spheres within a time budget.

    Returns (times, pts, vels, bounce_times, post_vels, final_vel,
    skipped_inside): piecewise data relative to the chain start.  Spheres
    the mover starts inside of (possible only in the rare neighbouring-
    interference corner) are skipped and counted.
    """
    m = pos[None, :] - centers
    d2 = np.einsum("ij,ij->i", m, m)
    use = d2 >= (r * (1.0 - REL_TOL)) ** 2
    skipped = int(len(centers) - use.sum())
    centers = centers[use]
    times = [0.0]
    pts = [pos.copy()]
    vels: list[np.ndarray] = []
    bounce_times: list[float] = []
    post_vels: list[np.ndarray] = []
    t = 0.0
    while t < t_budget:
        rem = t_budget - t
        hit = first_hit_among(pos, vel, centers, r, rem) if len(centers) else None
        if hit is None:
            pos = pos + rem * vel
            times.append(t_budget)
            pts.append(pos.copy())
            vels.append(vel.copy())
            break
        th, _, nrm = hit
        t += th
        if th > 0.0:
            pos = pos + th * vel
            times.append(t)
            pts.append(pos.copy())
            vels.append(vel.copy())
        vel = reflect(vel, nrm)
        bounce_times.append(t)
        post_vels.append(vel.copy())
        if len(bounce_times) > BOUNCE_BUDGET:
            raise BudgetExceededError("bounce chain exceeded budget")
    return times, pts, vels, bounce_times, post_vels, vel, skipped


@dataclass
class ShortsightedBuild:
    """A short-sighted trajectory plus its bookkeeping."""

    path: PiecewisePath
    flight_points: np.ndarray      # (n+1, 3): positions at the flight times
    records: EtaRecords
    rule_discrepancies: int = 0    # recollide bit fired without deflection
    inside_starts: int = 0         # degenerate neighbouring-interference geometry


def _build_shortsighted(xi, u, hat, tilde, r) -> tuple:
    """Shared constructor: apply the three per-flight rules."""
    n = len(xi)
    times = [0.0]
    pts = [np.zeros(3)]
    vels: list[np.ndarray] = []
    flight_points = np.zeros((n + 1, 3))
    discrep = 0
    inside = 0
    pos = np.zeros(3)
    t = 0.0
    for i in range(n):
        dt = float(xi[i])
        if hat[i]:
            v = u[i - 1]  # scattering suppressed: keep the previous direction
            pos = pos + dt * v
            t += dt
            times.append(t)
            pts.append(pos.copy())
            vels.append(v.copy())
        elif tilde[i]:
            d1 = u[i - 1] - u[i]
            n1 = math.sqrt(float(d1 @ d1))
            d2 = u[i - 1] - u[i - 2]
            n2 = math.sqrt(float(d2 @ d2))
            if n1 == 0.0 or n2 == 0.0:
                counters.degenerate_inputs += 1
                raise DegenerateGeometryError("coincident flight directions")
            c_new = pos + (r / n1) * d1
            c_old = flight_points[i - 1] - (r / n2) * d2
            ts, ps, vs, bts, _, vend, skipped = _bounce_chain(
                pos, u[i], np.vstack((c_new, c_old)), r, dt)
            inside += skipped
            if not bts:
                discrep += 1
            for k in range(1, len(ts)):
                times.append(t + ts[k])
                pts.append(ps[k])
                vels.append(vs[k - 1])
            pos = pts[-1].copy()
            t += dt
        else:
            v = u[i]
            pos = pos + dt * v
            t += dt
            times.append(t)
            pts.append(pos.copy())
            vels.append(v.copy())
        flight_points[i + 1] = pos
    path = PiecewisePath(np.asarray(times), np.asarray(pts), np.asarray(vels))
    return path, flight_points, discrep, inside


def shortsighted_path(fs: FlightStream, r: float, t_max: float | None = None) -> ShortsightedBuild:
    """Short-sighted trajectory over the whole stream.

    Per flight interval: follow the stream direction when neither bit is
    set; keep the previous direction through the interval when the shadow
    bit is set; otherwise, when only the recollide bit is set, run the
    mechanical two-sphere bounce against the newly offered center and the
    last seen one until the interval's time budget is spent.
    """
    if not 0.0 < r < 0.5:
        raise ValueError("r must lie in (0, 0.5)")
    if t_max is not None:
        n = int(np.searchsorted(fs.taus, t_max)) + 1
        n = min(n, fs.n_flights)
    else:
        n = fs.n_flights
    xi, u = fs.xi[:n], fs.u[:n]
    hat, tilde = eta_flags(xi, u, r)
    hatp, tildep = eta_prime_flags(xi, u, r)
    path, fp, discrep, inside = _build_shortsighted(xi, u, hat, tilde, r)
    rec = EtaRecords(hat, tilde, hatp, tildep)
    return ShortsightedBuild(path, fp, rec, discrep, inside)


def leg_path(pack: Pack, r: float) -> ShortsightedBuild:
    """Short-sighted trajectory of one leg, built from its pack alone.

    The pack's boundary conditioning turns the interference gates off on
    the first three and the last flight, so no out-of-pack data is needed.
    """
    hat, tilde = eta_flags(pack.xi, pack.u, r)
    hatp, tildep = eta_prime_flags(pack.xi, pack.u, r)
    path, fp, discrep, inside = _build_shortsighted(pack.xi, pack.u, hat, tilde, r)
    return ShortsightedBuild(path, fp, EtaRecords(hat, tilde, hatp, tildep),
                             discrep, inside)


def leg_path_reversed(pack: Pack, r: float) -> PiecewisePath:
    """Backward leg: the time reversal of the leg trajectory, translated to
    start at the origin.  Its endpoint is exactly minus the forward leg's
    endpoint."""
    return leg_path(pack, r).path.reversed()


def shortsighted_single_flight(fs: FlightStream, k: int, r: float) -> PiecewisePath:
    """Variant trajectory that applies the short-sighted rules on flight k
    only (1-based, k > 3) and follows the plain flight increments
    everywhere else.  On streams whose only interference bit sits at k it
    coincides with the full short-sighted trajectory."""
    if not 3 < k <= fs.n_flights:
        raise IndexError("flight index out of range (need 3 < k <= n)")
    hat, tilde = eta_flags(fs.xi, fs.u, r)
    mask = np.zeros(fs.n_flights, dtype=bool)
    mask[k - 1] = True
    path, _, _, _ = _build_shortsighted(fs.xi, fs.u, hat & mask, tilde & mask, r)
    return path


# ---------------------------------------------------------------------------
# Per-leg exploration and the one-leg triple
# ---------------------------------------------------------------------------

@dataclass
class LegTriple:
    """Flight, explorer and short-sighted trajectories over one leg, with
    prescribed incoming and outgoing directions at the boundaries."""

    theta: float
    y_path: PiecewisePath
    z_path: PiecewisePath
    x_path: PiecewisePath
    u_in: np.ndarray
    u_out: np.ndarray
    x_out_velocity: np.ndarray
    mismatch: bool
    records: EtaRecords


def sup_path_distance(pa: PiecewisePath, pb: PiecewisePath) -> float:
    """Exact sup_t |pa(t) - pb(t)| for paths on a common time span: both
    are piecewise linear, so the sup is attained at a merged breakpoint."""
    ts = np.union1d(pa.times, pb.times)
    diff = pa.position(ts) - pb.position(ts)
    return float(np.sqrt(np.einsum("ij,ij->i", diff, diff)).max())


def explore_leg(pack: Pack, u_in, u_out, r: float) -> LegTriple:
    """Run the explorer over a single leg with memory cleared at the start.

    The incoming direction seeds the initial scatterer; the prescribed
    outgoing direction is offered at the final scattering and may itself
    be shadowed, in which case the explorer keeps its pre-boundary
    velocity.  The mismatch flag compares explorer vs short-sighted leg
    pathwise on the closed leg and the outgoing velocities at the end.
    """
    build = leg_path(pack, r)
    g = pack.gamma
    taus = np.cumsum(pack.xi)

    centers: list[np.ndarray] = [candidate_center(np.zeros(3), u_in, pack.u[0], r)]
    times = [0.0]
    pts = [np.zeros(3)]
    vels: list[np.ndarray] = []
    pos = np.zeros(3)
    vel = pack.u[0]
    t = 0.0
    for i in range(g):
        t_end = float(taus[i])
        remaining = t_end - t
        chain = 0
        while remaining > 0.0:
            hit = first_hit_among(pos, vel, np.asarray(centers), r, remaining)
            if hit is None:
                pos = pos + remaining * vel
                times.append(t_end)
                pts.append(pos.copy())
                vels.append(vel.copy())
                t = t_end
                break
            th, _, nrm = hit
            t += th
            if th > 0.0:
                pos = pos + th * vel
                times.append(t)
                pts.append(pos.copy())
                vels.append(vel.copy())
            vel = reflect(vel, nrm)
            remaining -= th
            chain += 1
            if chain > BOUNCE_BUDGET:
                raise BudgetExceededError("recollision chain exceeded budget")
        offered = pack.u[i + 1] if i + 1 < g else u_out
        cand = candidate_center(pos, vel, offered, r)
        p0 = np.asarray(pts[:-1])
        p1 = np.asarray(pts[1:])
        if segments_point_min_distance(p0, p1, cand) < r * (1.0 - REL_TOL):
            pass  # shadowed: keep the current velocity
        else:
            centers.append(cand)
            vel = offered
    x_path = PiecewisePath(np.asarray(times), np.asarray(pts), np.asarray(vels))
    theta = float(taus[-1])
    sup = sup_path_distance(x_path, build.path)
    out_mismatch = float(np.abs(vel - u_out).max()) > 1e-9
    mismatch = out_mismatch or sup > 1e-9 * (1.0 + theta)
    y = flight_path_from_arrays(pack.xi, pack.u)
    return LegTriple(theta, y, build.path, x_path, np.asarray(u_in),
                     np.asarray(u_out), vel, mismatch, build.records)


def flight_path_from_arrays(xi: np.ndarray, u: np.ndarray) -> PiecewisePath:
    times = np.concatenate(([0.0], np.cumsum(xi)))
    pts = np.vstack((np.zeros(3), np.cumsum(xi[:, None] * u, axis=0)))
    return PiecewisePath(times, pts, u.copy())
