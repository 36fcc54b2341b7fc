"""Exact 3D primitives shared by every process in the package.

Vectors are numpy arrays of shape (3,) (batch helpers take (n, 3)).
Lengths are measured in mean free paths; every mover has speed 1, so time
and arc length are interchangeable.

Tolerance policy: geometric equalities use relative tolerance 1e-9 scaled
by max(1, coordinate size); unit vectors are renormalised after every
reflection so repeated collisions cannot drift.  Grazing sphere hits with
|v.n| < 1e-12 are treated as misses and counted, since they are
measure-zero and resolving them numerically is meaningless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

UNIT_TOL = 1e-12
REL_TOL = 1e-9
GRAZE_TOL = 1e-12


class DegenerateGeometryError(ValueError):
    """Raised when inputs describe a physically impossible state
    (e.g. a mover strictly inside a scatterer)."""


class BudgetExceededError(RuntimeError):
    """Raised when a collision chain exceeds its sub-collision budget,
    which signals a numeric trap rather than real dynamics."""


@dataclass
class GeometryCounters:
    """Per-process diagnostics for measure-zero events."""

    grazing_misses: int = 0
    degenerate_inputs: int = 0

    def reset(self) -> None:
        self.grazing_misses = 0
        self.degenerate_inputs = 0


counters = GeometryCounters()


def normalize(v: np.ndarray) -> np.ndarray:
    """Return v / |v|; degenerate for |v| = 0."""
    n = math.sqrt(float(v @ v))
    if n == 0.0:
        counters.degenerate_inputs += 1
        raise DegenerateGeometryError("cannot normalise the zero vector")
    return v / n


def reflect(v: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Elastic (specular) reflection of unit velocity v on unit normal n.

    Returns v - 2 (v.n) n, renormalised.  The result satisfies
    |v'| = 1, v'.n = -(v.n), and v' - v parallel to n.
    """
    out = v - 2.0 * float(v @ n) * n
    return out / math.sqrt(float(out @ out))


def angle(u: np.ndarray, v: np.ndarray) -> float:
    """Angle in [0, pi] between unit vectors; dot clamped against FP overshoot."""
    d = float(u @ v)
    if d > 1.0:
        d = 1.0
    elif d < -1.0:
        d = -1.0
    return math.acos(d)


def first_sphere_hit(p, v, c, radius, t_max):
    """First time a speed-1 ray from p along v touches the sphere (c, radius).

    Returns (t_hit, outward unit normal at the hit) for the smallest
    t in (0, t_max], or None when the ray misses.  The mover must start
    outside the sphere: |p - c| >= radius*(1 - 1e-9); anything closer is a
    corrupted state and raises DegenerateGeometryError.

    Grazing contacts (|v.n| < 1e-12 at the would-be hit, i.e. discriminant
    below (1e-12 * radius)^2) count as misses and bump the graze counter.
    A start on the sphere surface moving inward -- a state only reachable
    through rounding -- is resolved as an immediate hit at t = 0.
    """
    m = p - c
    dist2 = float(m @ m)
    r2 = radius * radius
    lo = radius * (1.0 - REL_TOL)
    if dist2 < lo * lo:
        counters.degenerate_inputs += 1
        raise DegenerateGeometryError("ray origin inside scatterer")
    b = float(m @ v)
    disc = b * b - (dist2 - r2)
    if disc <= (GRAZE_TOL * radius) ** 2:
        if disc > 0.0:
            counters.grazing_misses += 1
        return None
    t = -b - math.sqrt(disc)
    hi = radius * (1.0 + REL_TOL)
    if t <= 0.0:
        # On-surface start moving inward: rounding artefact, hit immediately.
        if b < 0.0 and dist2 <= hi * hi:
            t = 0.0
        else:
            return None
    if t > t_max:
        return None
    hit = p + t * v
    n = hit - c
    n = n / math.sqrt(float(n @ n))
    return t, n


def first_hit_among(p, v, centers, radius, t_max):
    """Earliest hit of the ray (p, v) on any sphere of the (k, 3) array.

    Vectorised version of first_sphere_hit over many centers; returns
    (t_hit, center_index, normal) or None.  Same degeneracy and grazing
    conventions as the scalar routine.
    """
    if len(centers) == 0:
        return None
    m = p[None, :] - centers
    dist2 = np.einsum("ij,ij->i", m, m)
    r2 = radius * radius
    lo = radius * (1.0 - REL_TOL)
    if np.any(dist2 < lo * lo):
        counters.degenerate_inputs += 1
        raise DegenerateGeometryError("ray origin inside scatterer")
    b = m @ v
    disc = b * b - (dist2 - r2)
    graze2 = (GRAZE_TOL * radius) ** 2
    ok = disc > graze2
    if not np.any(ok):
        return None
    t = np.where(ok, -b - np.sqrt(np.where(ok, disc, 0.0)), np.inf)
    # On-surface inward starts resolve to t = 0 (see first_sphere_hit).
    hi = radius * (1.0 + REL_TOL)
    surface_in = ok & (t <= 0.0) & (b < 0.0) & (dist2 <= hi * hi)
    t = np.where(surface_in, 0.0, t)
    t = np.where((t < 0.0) | ((t == 0.0) & ~surface_in) | (t > t_max), np.inf, t)
    k = int(np.argmin(t))
    if not np.isfinite(t[k]):
        return None
    th = float(t[k])
    n = p + th * v - centers[k]
    n = n / math.sqrt(float(n @ n))
    return th, k, n


def segment_point_distance(p0, p1, q) -> float:
    """Distance from point q to the segment [p0, p1]."""
    d = p1 - p0
    dd = float(d @ d)
    if dd == 0.0:
        return math.sqrt(float((q - p0) @ (q - p0)))
    t = float((q - p0) @ d) / dd
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    diff = p0 + t * d - q
    return math.sqrt(float(diff @ diff))


def segments_point_min_distance(p0s, p1s, q) -> float:
    """Min distance from point q to a family of segments ((k,3), (k,3))."""
    d = p1s - p0s
    dd = np.einsum("ij,ij->i", d, d)
    w = q[None, :] - p0s
    t = np.einsum("ij,ij->i", w, d) / np.where(dd > 0.0, dd, 1.0)
    np.clip(t, 0.0, 1.0, out=t)
    diff = p0s + t[:, None] * d - q[None, :]
    return float(np.sqrt(np.einsum("ij,ij->i", diff, diff).min()))


def points_segment_min_distance(p0, p1, qs) -> np.ndarray:
    """Distances from each point of (k,3) qs to the segment [p0, p1]."""
    d = p1 - p0
    dd = float(d @ d)
    w = qs - p0[None, :]
    if dd == 0.0:
        return np.sqrt(np.einsum("ij,ij->i", w, w))
    t = (w @ d) / dd
    np.clip(t, 0.0, 1.0, out=t)
    diff = w - t[:, None] * d[None, :]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def _quadratic_below(a2: float, a1: float, a0: float, level: float):
    """Solution set of a2 t^2 + a1 t + a0 < level as an interval (or None).

    Only called with a2 >= 0.  Returns (lo, hi) possibly infinite, or None
    when empty.
    """
    if a2 <= 0.0:
        if a1 == 0.0:
            return (-math.inf, math.inf) if a0 < level else None
        x = (level - a0) / a1
        return (-math.inf, x) if a1 > 0.0 else (x, math.inf)
    disc = a1 * a1 - 4.0 * a2 * (a0 - level)
    if disc <= 0.0:
        return None
    s = math.sqrt(disc)
    return ((-a1 - s) / (2.0 * a2), (-a1 + s) / (2.0 * a2))


def _overlap(iv_a, iv_b) -> float:
    lo = max(iv_a[0], iv_b[0])
    hi = min(iv_a[1], iv_b[1])
    return max(0.0, hi - lo)


def sojourn_length(x, w, e, s) -> float:
    """Length of forward times t' > 0 at which the moving point x + t' w
    passes within s of the forward ray {t e : t >= 0}.

    That is, the Lebesgue measure of {t' > 0 : min_{t>=0} |x + t' w + t e| < s}.
    Always bounded by 2 s / sin(angle(-e, w)) (relax the ray to its full
    line); the stronger 4 s / angle(-e, w) form holds wherever
    sin(angle) >= angle / 2, i.e. up to angle ~1.895, but fails for
    near-reversed movers that ride the ray's line toward its tip.  Returns
    math.inf in the degenerate case w = -e with the line inside the tube.
    """
    we = float(w @ e)
    xe = float(x @ e)
    xw = float(x @ w)
    xx = float(x @ x)
    s2 = s * s

    # Near side: p.e > 0, closest ray point is its tip, condition |p| < s.
    # Far side: p.e <= 0, condition |p|^2 - (p.e)^2 < s^2.
    near = _quadratic_below(1.0, 2.0 * xw, xx, s2)
    far = _quadratic_below(1.0 - we * we, 2.0 * (xw - xe * we), xx - xe * xe, s2)

    # Region where p(t').e <= 0, as an interval of t'.
    if we > 0.0:
        region_far = (-math.inf, -xe / we)
    elif we < 0.0:
        region_far = (-xe / we, math.inf)
    else:
        region_far = (-math.inf, math.inf) if xe <= 0.0 else None

    total = 0.0
    pos = (0.0, math.inf)
    if near is not None:
        if region_far is None:
            iv = near
        elif we > 0.0:
            iv = (region_far[1], math.inf)
            iv = (max(near[0], iv[0]), min(near[1], iv[1]))
        elif we < 0.0:
            iv = (near[0], min(near[1], region_far[0]))
        else:
            iv = None if xe <= 0.0 else near
        if iv is not None and iv[1] > iv[0]:
            total += _overlap(iv, pos)
    if far is not None and region_far is not None:
        lo = max(far[0], region_far[0], 0.0)
        hi = min(far[1], region_far[1])
        if hi == math.inf and lo < math.inf:
            return math.inf
        if hi > lo:
            total += hi - lo
    return total
