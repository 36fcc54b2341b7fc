"""Memoryless random flight process and its ingredient randomness.

A trajectory is driven by i.i.d. pairs (xi_j, u_j): flight times xi_j ~
Exp(1) and directions u_j uniform on the unit sphere, plus one extra
incoming direction u_0.  The signature bit eps_j = 1{xi_j < 1} selects the
conditional laws EXP(1|1) (given xi < 1) and EXP(1|0) (given xi >= 1).

Draw order is fixed and documented: u_0 first (two uniforms), then per
flight one uniform for xi followed by two for u.  Scalar and block
generation consume the stream identically, so vectorised experiments stay
coupled to their scalar counterparts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .geometry import DegenerateGeometryError, counters
from .streams import RngStream

_E = math.e


def _xi_from_uniform(us: np.ndarray, condition: str) -> np.ndarray:
    """Inverse-CDF map from uniforms to flight times (one draw per flight)."""
    if condition == "none":
        return -np.log1p(-us)
    if condition == "eps=1":
        return -np.log1p(-us * (1.0 - 1.0 / _E))
    if condition == "eps=0":
        return 1.0 - np.log1p(-us)
    raise ValueError(f"unknown flight-time condition {condition!r}")


def _dirs_from_uniforms(u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    """Exact uniform directions on the sphere: inverse CDF on the polar
    cosine plus a uniform azimuth."""
    z = 1.0 - 2.0 * u1
    rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = 2.0 * np.pi * u2
    return np.stack((rho * np.cos(phi), rho * np.sin(phi), z), axis=-1)


def sample_flight_time(stream: RngStream, condition: str = "none") -> float:
    """One flight time: Exp(1), or its law conditioned on the signature bit.

    condition "eps=1" has density e^(1-x)/(e-1) on [0,1); "eps=0" is
    1 + Exp(1).  Exactly one uniform is consumed either way.
    """
    return float(_xi_from_uniform(np.array([stream.uniform()]), condition)[0])


def sample_direction(stream: RngStream) -> np.ndarray:
    """One uniform direction on the sphere; consumes exactly two uniforms."""
    u1 = stream.uniform()
    u2 = stream.uniform()
    return _dirs_from_uniforms(np.array([u1]), np.array([u2]))[0]


def sample_directions(stream: RngStream, n: int) -> np.ndarray:
    """(n, 3) uniform directions, draw-for-draw identical to n scalar calls."""
    us = stream.uniforms(2 * n).reshape(n, 2)
    return _dirs_from_uniforms(us[:, 0], us[:, 1])


@dataclass
class Flight:
    """One flight: duration xi (= length at speed 1), direction u and the
    signature bit eps = 1{xi < 1}."""

    xi: float
    u: np.ndarray
    eps: int


@dataclass
class FlightStream:
    """An ordered run of flights plus the index-0 incoming direction.

    Stored as arrays: xi (n,), u (n, 3), eps (n,).  Flight j of the usual
    1-based notation lives at array index j - 1.
    """

    u0: np.ndarray
    xi: np.ndarray
    u: np.ndarray
    eps: np.ndarray

    @cached_property
    def taus(self) -> np.ndarray:
        """Scattering times tau_1..tau_n (strictly increasing)."""
        return np.cumsum(self.xi)

    @property
    def n_flights(self) -> int:
        return len(self.xi)

    def flight(self, j: int) -> Flight:
        """Flight j, 1-based."""
        i = j - 1
        return Flight(float(self.xi[i]), self.u[i], int(self.eps[i]))

    def steps(self) -> np.ndarray:
        """Displacement of each flight, xi_j * u_j, shape (n, 3)."""
        return self.xi[:, None] * self.u


def generate_flight_stream(
    stream: RngStream,
    horizon: float,
    first_two_long: bool = False,
    min_flights: int = 1,
) -> FlightStream:
    """Generate flights until the cumulative time reaches ``horizon``.

    ``first_two_long`` draws the first two flight times from EXP(1|0)
    instead of Exp(1) (same draw count), the conditioning used when a run
    must start with two long flights.
    """
    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    u0 = sample_direction(stream)
    xi_parts, u_parts = [], []
    total = 0.0
    n_done = 0
    block = max(min_flights, int(horizon * 1.25) + 8)
    while total < horizon or n_done < min_flights:
        raw = stream.uniforms(3 * block).reshape(block, 3)
        xi = _xi_from_uniform(raw[:, 0], "none")
        if first_two_long and n_done < 2:
            k = 2 - n_done
            xi[:k] = _xi_from_uniform(raw[:k, 0], "eps=0")
        xi_parts.append(xi)
        u_parts.append(_dirs_from_uniforms(raw[:, 1], raw[:, 2]))
        total += float(xi.sum())
        n_done += block
        block = max(8, int((horizon - total) * 1.25) + 8)
    xi = np.concatenate(xi_parts)
    u = np.concatenate(u_parts)
    cum = np.cumsum(xi)
    last = max(int(np.searchsorted(cum, horizon)), min_flights - 1)
    last = min(last, len(xi) - 1)
    sl = slice(0, last + 1)
    return FlightStream(u0=u0, xi=xi[sl], u=u[sl], eps=(xi[sl] < 1.0).astype(np.uint8))


@dataclass
class PiecewisePath:
    """Speed-1 piecewise-linear trajectory.

    times (m+1,), points (m+1, 3), velocities (m, 3): segment i runs from
    times[i] to times[i+1] at unit velocity velocities[i].  This one
    representation carries every process in the package.
    """

    times: np.ndarray
    points: np.ndarray
    velocities: np.ndarray

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def end_point(self) -> np.ndarray:
        return self.points[-1]

    def position(self, t) -> np.ndarray:
        """Position at time(s) t, clamped to the path's time span."""
        ts = np.atleast_1d(np.asarray(t, dtype=float))
        ts = np.clip(ts, self.times[0], self.times[-1])
        idx = np.clip(np.searchsorted(self.times, ts, side="right") - 1, 0,
                      len(self.velocities) - 1)
        out = self.points[idx] + (ts - self.times[idx])[:, None] * self.velocities[idx]
        return out[0] if np.isscalar(t) else out

    def reversed(self) -> "PiecewisePath":
        """Time reversal translated to start at the origin: the image
        t -> path(T - t) - path(T) on the same duration."""
        T = self.times[-1]
        return PiecewisePath(
            times=(T - self.times[::-1]) + self.times[0] * 0.0,
            points=self.points[::-1] - self.points[-1],
            velocities=-self.velocities[::-1],
        )

    def translated(self, dx: np.ndarray) -> "PiecewisePath":
        return PiecewisePath(self.times, self.points + dx[None, :], self.velocities)

    def breakpoint_centers(self, r: float):
        """Scatterer centers implied by the interior breakpoints: at each
        velocity change, the center at distance r that would have produced
        the turn.  Returns (centers (k,3), breakpoint indices (k,)); straight
        breakpoints (no velocity change) are skipped, as is the final point.
        """
        vin = self.velocities[:-1]
        vout = self.velocities[1:]
        d = vin - vout
        nrm = np.sqrt(np.einsum("ij,ij->i", d, d))
        keep = nrm > 0.0
        idx = np.nonzero(keep)[0] + 1
        centers = self.points[idx] + r * d[keep] / nrm[keep][:, None]
        return centers, idx

    def validate(self, tol: float = 1e-9) -> None:
        """Check continuity and the speed-1 property; raises on violation."""
        dt = np.diff(self.times)
        if np.any(dt < 0):
            raise ValueError("breakpoint times must be nondecreasing")
        sp = np.sqrt(np.einsum("ij,ij->i", self.velocities, self.velocities))
        if np.any(np.abs(sp - 1.0) > 1e-12):
            raise ValueError("segment velocities must be unit")
        rebuilt = self.points[:-1] + dt[:, None] * self.velocities
        err = np.abs(rebuilt - self.points[1:]).max() if len(dt) else 0.0
        scale = max(1.0, float(np.abs(self.points).max()))
        if err > tol * scale:
            raise ValueError("path is not continuous")


def path_from_steps(times: np.ndarray, points: np.ndarray,
                    velocities: np.ndarray) -> PiecewisePath:
    return PiecewisePath(np.asarray(times, float), np.asarray(points, float),
                         np.asarray(velocities, float))


def flight_path(fs: FlightStream, t_max: float | None = None) -> PiecewisePath:
    """The flight trajectory itself: straight concatenation of the flights,
    started at the origin, optionally truncated at t_max."""
    times = np.concatenate(([0.0], fs.taus))
    pts = np.vstack((np.zeros(3), np.cumsum(fs.steps(), axis=0)))
    vel = fs.u.copy()
    if t_max is None:
        return PiecewisePath(times, pts, vel)
    if t_max > times[-1] + 1e-12:
        raise ValueError("t_max exceeds the stream horizon")
    k = int(np.searchsorted(times, t_max, side="left"))
    k = max(k, 1)
    times = np.concatenate((times[:k], [t_max]))
    pts = np.vstack((pts[:k], pts[k - 1] + (t_max - times[k - 1]) * vel[k - 1]))
    return PiecewisePath(times, pts, vel[:k])


def virtual_scatterers(fs: FlightStream, r: float) -> np.ndarray:
    """Centers that would have caused each scattering of the flight path.

    Scattering k (k = 0..n-2 here; k = 0 uses the incoming u0) turns u_k
    into u_{k+1} at the k-th breakpoint; the implied center sits at
    distance exactly r along (u_k - u_{k+1}).  Bitwise-equal consecutive
    directions are a probability-zero degeneracy and raise.
    """
    u_in = np.vstack((fs.u0, fs.u[:-1]))
    u_out = fs.u
    d = u_in - u_out
    nrm = np.sqrt(np.einsum("ij,ij->i", d, d))
    if np.any(nrm == 0.0):
        counters.degenerate_inputs += 1
        raise DegenerateGeometryError("consecutive directions bitwise equal")
    pts = np.vstack((np.zeros(3), np.cumsum(fs.steps(), axis=0)[:-1]))
    return pts + r * d / nrm[:, None]


def mean_square_displacement(t: np.ndarray | float):
    """Exact E|position(t)|^2 for the flight process: 2t - 2(1 - e^-t).

    Follows from the exponential velocity autocorrelation e^-|t-s| of a
    speed-1 mover redirected uniformly at unit rate.
    """
    t = np.asarray(t, dtype=float)
    return 2.0 * t - 2.0 * (1.0 - np.exp(-t))
