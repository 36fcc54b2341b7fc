"""Occupation-measure histograms on logarithmic radial shells, and the
analytic envelopes they are compared against.

Shells: 64 geometric bins spanning (r/4, 50].  Step histograms weigh each
visited breakpoint with 1; path histograms weigh each shell with the exact
time the piecewise-linear trajectory spends in it (per-segment closed
form), so total mass equals total collected weight to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import curve_fit

from ..flight import _dirs_from_uniforms, _xi_from_uniform
from ..legs import eta_flags, pack_boundaries, _bounce_chain
from ..streams import RngStream
from .stats import fit_log_slope

PROCESSES = ("Y_steps", "Y_path", "Zleg_steps", "Zleg_path",
             "Zstar_steps", "Zstar_path", "Xi_star_walk")


@dataclass
class RadialHistogram:
    """Shell-binned occupation estimate."""

    edges: np.ndarray          # (65,)
    mass: np.ndarray           # (64,) total collected weight per shell
    below: float               # weight at radii <= edges[0]
    above: float               # weight beyond edges[-1]
    trials: int
    total_weight: float
    process: str = ""
    envelope: np.ndarray | None = field(default=None, repr=False)

    @property
    def centers(self) -> np.ndarray:
        return np.sqrt(self.edges[:-1] * self.edges[1:])

    @property
    def volumes(self) -> np.ndarray:
        return 4.0 * np.pi / 3.0 * (self.edges[1:] ** 3 - self.edges[:-1] ** 3)

    def density(self) -> np.ndarray:
        """Per-trial occupation density (weight per unit volume per trial)."""
        return self.mass / self.volumes / max(self.trials, 1)

    def conservation_gap(self) -> float:
        return abs(self.mass.sum() + self.below + self.above - self.total_weight)


def shell_edges(r: float) -> np.ndarray:
    return np.geomspace(r / 4.0, 50.0, 65)


def _segment_shell_times(p0, p1, edges):
    """Exact time each segment spends inside each radius, then per shell.

    For |p0 + t v| the sublevel set {|x(t)| <= rho} of a line is an
    interval; clip it to the segment and difference consecutive radii.
    Returns (shell (n,64), below (n,), above (n,))."""
    seg = p1 - p0
    lens = np.linalg.norm(seg, axis=1)
    good = lens > 0
    v = np.where(good[:, None], seg / np.where(good, lens, 1.0)[:, None], 0.0)
    b = np.sum(p0 * v, axis=1)
    c = np.sum(p0 * p0, axis=1)
    disc = edges[None, :] ** 2 - (c - b * b)[:, None]
    root = np.sqrt(np.maximum(disc, 0.0))
    t0 = np.clip(-b[:, None] - root, 0.0, lens[:, None])
    t1 = np.clip(-b[:, None] + root, 0.0, lens[:, None])
    inside = np.where(disc > 0.0, t1 - t0, 0.0)
    shell = np.diff(inside, axis=1)
    below = inside[:, 0]
    above = lens - inside[:, -1]
    return shell, below, above


def _hist_points(radii: np.ndarray, edges: np.ndarray):
    mass, _ = np.histogram(radii, bins=edges)
    below = float((radii <= edges[0]).sum())
    above = float((radii > edges[-1]).sum())
    return mass.astype(float), below, above


def _leg_stream(stream: RngStream, n_legs: int, r: float):
    """Short-sighted global trajectory over n_legs complete legs: flight
    breakpoints, leg boundaries, and bounce windows (see interleg)."""
    from .interleg import MEAN_FLIGHTS_PER_LEG, _draw_stream

    u0_raw = stream.uniforms(2)
    _dirs_from_uniforms(u0_raw[:1], u0_raw[1:])
    xi_parts, u_parts = [], []
    want = int(n_legs * MEAN_FLIGHTS_PER_LEG * 1.08) + 1024
    first = True
    while True:
        xi_b, u_b = _draw_stream(stream, want, first)
        first = False
        xi_parts.append(xi_b)
        u_parts.append(u_b)
        xi = np.concatenate(xi_parts) if len(xi_parts) > 1 else xi_parts[0]
        stops = pack_boundaries(xi)
        if len(stops) >= n_legs:
            break
        want = int((n_legs - len(stops)) * MEAN_FLIGHTS_PER_LEG * 1.2) + 1024
    u = np.concatenate(u_parts) if len(u_parts) > 1 else u_parts[0]
    stops = stops[:n_legs]
    n_used = int(stops[-1])
    hat, tilde = eta_flags(xi[:n_used + 1], u[:n_used + 1], r)
    V = u[:n_used].copy()
    rows = np.nonzero(hat[:n_used])[0]
    V[rows] = u[rows - 1]
    D = xi[:n_used, None] * V
    windows = {}
    for i in np.nonzero((~hat & tilde)[:n_used])[0]:
        d1 = u[i - 1] - u[i]
        d2 = u[i - 1] - u[i - 2]
        c_new = (r / math.sqrt(float(d1 @ d1))) * d1
        c_old = -D[i - 1] - (r / math.sqrt(float(d2 @ d2))) * d2
        ts, ps, vs, bts, _, vend, _ = _bounce_chain(
            np.zeros(3), u[i], np.vstack((c_new, c_old)), r, float(xi[i]))
        D[i] = ps[-1]
        if len(ps) > 2:
            windows[i] = np.asarray(ps)
    P = np.vstack((np.zeros(3), np.cumsum(D, axis=0)))
    return P, stops, windows


def occupation_histogram(process: str, r: float, trials: int, seed: int,
                         horizon: float = 200.0, min_step: int = 1,
                         max_step: int | None = None,
                         condition: tuple | None = None) -> RadialHistogram:
    """Shell-binned occupation estimate for one process family.

    Y_steps / Y_path: breakpoints / path of the plain flight trajectory,
    truncated at path length ``horizon`` (the infinite-horizon tail is
    exponentially tight).  ``min_step`` drops the first min_step-1
    breakpoints from Y_steps (the walk-return shape sits in steps >= 2;
    the first step carries the |x|^-2 single-flight singularity).
    Zleg_* / Zstar_*: per-leg short-sighted trajectories, forward or time
    reversed, with ``trials`` legs.  Xi_star_walk: the walk of reversed-leg
    terminal points, ``horizon`` interpreted as legs per walk.
    ``condition`` forces the signature bits of the first flights of each
    Y trial (conditional flight-time laws, same draw count).
    """
    if process not in PROCESSES:
        raise ValueError(f"unknown process {process!r}")
    edges = shell_edges(r)
    mass = np.zeros(64)
    below = above = total_w = 0.0

    if process in ("Y_steps", "Y_path"):
        per = max(int(horizon) + 64, 96)
        block = max(1, int(2_500_000 / per))
        done = 0
        bi = 0
        while done < trials:
            m = min(block, trials - done)
            stream = RngStream(seed, 500_000 + bi)
            bi += 1
            raw = stream.uniforms(3 * m * per).reshape(m, per, 3)
            xi = _xi_from_uniform(raw[:, :, 0], "none")
            if condition:
                for j, bit in enumerate(condition):
                    xi[:, j] = _xi_from_uniform(raw[:, j, 0],
                                                "eps=1" if bit else "eps=0")
            u = _dirs_from_uniforms(raw[:, :, 1], raw[:, :, 2])
            cum = np.cumsum(xi, axis=1)
            pts = np.cumsum(xi[:, :, None] * u, axis=1)
            keep = cum <= horizon
            if process == "Y_steps":
                keep[:, :min_step - 1] = False
                if max_step is not None:
                    keep[:, max_step:] = False
                radii = np.linalg.norm(pts[keep], axis=1)
                h, b_, a_ = _hist_points(radii, edges)
                mass += h
                below += b_
                above += a_
                total_w += float(keep.sum())
            else:
                p1 = pts[keep]
                prev = np.concatenate((np.zeros((m, 1, 3)), pts[:, :-1, :]),
                                      axis=1)
                p0 = prev[keep]
                sh, b_, a_ = _segment_shell_times(p0, p1, edges)
                mass += sh.sum(axis=0)
                below += float(b_.sum())
                above += float(a_.sum())
                total_w += float(np.linalg.norm(p1 - p0, axis=1).sum())
            done += m
        return RadialHistogram(edges, mass, below, above, trials, total_w,
                               process)

    if process == "Xi_star_walk":
        n_legs_walk = max(int(horizon), 8)
        stream = RngStream(seed, 700_000)
        for _ in range(trials):
            P, stops, _ = _leg_stream(stream, n_legs_walk, r)
            ends = P[stops]
            walk = -np.cumsum(np.diff(np.vstack((np.zeros(3), ends)), axis=0),
                              axis=0)
            radii = np.linalg.norm(walk, axis=1)
            h, b_, a_ = _hist_points(radii, edges)
            mass += h
            below += b_
            above += a_
            total_w += len(walk)
        return RadialHistogram(edges, mass, below, above, trials, total_w,
                               process)

    # per-leg processes
    stream = RngStream(seed, 800_000)
    legs_per_block = 4000
    done = 0
    while done < trials:
        m = min(legs_per_block, trials - done)
        P, stops, windows = _leg_stream(stream, m, r)
        starts = np.concatenate(([0], stops[:-1]))
        if process in ("Zleg_steps", "Zstar_steps"):
            for lo, hi in zip(starts, stops):
                if process == "Zleg_steps":
                    rel = P[lo + 1:hi + 1] - P[lo]
                else:
                    rel = P[lo:hi][::-1] - P[hi]
                if max_step is not None:
                    rel = rel[:max_step]
                radii = np.linalg.norm(rel, axis=1)
                h, b_, a_ = _hist_points(radii, edges)
                mass += h
                below += b_
                above += a_
                total_w += len(rel)
        else:
            org = np.repeat(P[starts], np.diff(np.concatenate(([0], stops))),
                            axis=0)
            ref = np.repeat(P[stops], np.diff(np.concatenate(([0], stops))),
                            axis=0)
            base = org if process == "Zleg_path" else ref
            p0 = P[:-1] - base
            p1 = P[1:] - base
            # bounce windows: replace their single chord by the real pieces
            plain = np.ones(len(p0), dtype=bool)
            extra0, extra1 = [], []
            for i, ps in windows.items():
                plain[i] = False
                extra0.append(ps[:-1] + (P[i] - base[i]))
                extra1.append(ps[1:] + (P[i] - base[i]))
            p0 = np.vstack([p0[plain]] + extra0) if extra0 else p0[plain]
            p1 = np.vstack([p1[plain]] + extra1) if extra1 else p1[plain]
            sh, b_, a_ = _segment_shell_times(p0, p1, edges)
            mass += sh.sum(axis=0)
            below += float(b_.sum())
            above += float(a_.sum())
            total_w += float(np.linalg.norm(p1 - p0, axis=1).sum())
        done += m
    return RadialHistogram(edges, mass, below, above, trials, total_w, process)


# ---------------------------------------------------------------------------
# envelopes
# ---------------------------------------------------------------------------

def envelope_kl(x, ck, cl, c):
    """Walk-return envelope plus the single-flight singular part:
    ck * min(1, 1/x) + cl * exp(-c x) / x^2."""
    return ck * np.minimum(1.0, 1.0 / x) + cl * np.exp(-c * x) / x ** 2


def envelope_l(x, cl, c):
    return cl * np.exp(-c * x) / x ** 2


def envelope_m(x, cm, c):
    return cm * np.exp(-c * x)


def fit_envelope(hist: RadialHistogram, kind: str, min_count: float = 50.0):
    """Least-squares fit of the envelope's free constants on log densities
    over sufficiently populated shells.  Returns (params, ratio, used_mask):
    ratio = density / envelope on the used shells."""
    x = hist.centers
    dens = hist.density()
    used = hist.mass >= min_count
    if used.sum() < 6:
        raise ValueError("too few populated shells for an envelope fit")
    xs, ys = x[used], dens[used]
    if kind == "L":
        coef = np.polyfit(xs, np.log(ys * xs ** 2), 1)
        params = (math.exp(coef[1]), -coef[0])
        env = envelope_l(x, *params)
    elif kind == "M":
        coef = np.polyfit(xs, np.log(ys), 1)
        params = (math.exp(coef[1]), -coef[0])
        env = envelope_m(x, *params)
    elif kind == "K+L":
        def model(lx, lck, lcl, lc):
            return np.log(envelope_kl(np.exp(lx), math.exp(lck),
                                      math.exp(lcl), math.exp(lc)))
        k0 = max(ys[xs > 1.0][0] * xs[xs > 1.0][0] if (xs > 1.0).any() else ys[-1], 1e-12)
        l0 = max(ys[0] * xs[0] ** 2, 1e-12)
        p0 = (math.log(k0), math.log(l0), 0.0)
        popt, _ = curve_fit(model, np.log(xs), np.log(ys), p0=p0, maxfev=20000)
        params = tuple(math.exp(v) for v in popt)
        env = envelope_kl(x, *params)
    else:
        raise ValueError(f"unknown envelope kind {kind!r}")
    hist.envelope = env
    ratio = np.where(used, dens / env, np.nan)
    return params, ratio, used


def density_slope(hist: RadialHistogram, lo: float, hi: float,
                  min_count: float = 25.0):
    """Log-log slope of the shell density over radii in [lo, hi]."""
    x = hist.centers
    dens = hist.density()
    used = (x >= lo) & (x <= hi) & (hist.mass >= min_count)
    if used.sum() < 4:
        raise ValueError("too few shells in the slope window")
    return fit_log_slope(x[used], dens[used])
