"""Monte Carlo event-probability estimators.

Each estimator is deterministic given (kind, r, trials, seed): trials are
tied to stream ids derived from the global trial index, and tallies are
integers, so worker partitioning cannot change any result.
"""

from __future__ import annotations

import numpy as np

from ..exploration import explore
from ..flight import _dirs_from_uniforms, _xi_from_uniform, generate_flight_stream
from ..legs import eta_flags
from ..streams import RngStream, trial_stream
from .interleg import run_interleg
from .stats import EstimateCI, wilson

KINDS = ("eta", "eta_pair", "W_hat", "W_tilde", "W_union", "leg_mismatch",
         "first_mismatch_before_T")


def _eta_tally(r: float, n_flights: int, seed: int, pair: bool):
    stream = RngStream(seed, 0)
    count = 0
    total = 0
    block = 4_000_000
    carry_xi = carry_u = None
    while total < n_flights:
        n = min(block, n_flights - total + 2)
        raw = stream.uniforms(3 * n).reshape(n, 3)
        xi = _xi_from_uniform(raw[:, 0], "none")
        u = _dirs_from_uniforms(raw[:, 1], raw[:, 2])
        if carry_xi is not None:  # overlap two flights so no triple is lost
            xi = np.concatenate((carry_xi, xi))
            u = np.vstack((carry_u, u))
        hat, tilde = eta_flags(xi, u, r)
        eta = hat | tilde
        if pair:
            count += int((eta[2:-1] & eta[3:]).sum())
            total += len(eta) - 3
        else:
            count += int(eta[2:].sum())
            total += len(eta) - 2
        carry_xi, carry_u = xi[-2:], u[-2:]
    return count, total


def _within_flight_events(r: float, trials: int, seed: int, kind: str,
                          n_flights: int = 24, skip: int = 4):
    """Per-scattering shadowing (W_hat) / recollision (W_tilde) events of a
    plain flight path against its own past, pooled over scattering indices
    skip..n_flights-2.  Exact segment/center distances, fully vectorised
    over trial blocks."""
    count = 0
    total = 0
    block = 8_000
    done = 0
    b = 0
    while done < trials:
        m = min(block, trials - done)
        stream = RngStream(seed, 1_000_000 + b)
        b += 1
        raw = stream.uniforms(3 * m * n_flights).reshape(m, n_flights, 3)
        xi = _xi_from_uniform(raw[:, :, 0], "none")
        u = _dirs_from_uniforms(raw[:, :, 1], raw[:, :, 2])
        pts = np.concatenate((np.zeros((m, 1, 3)),
                              np.cumsum(xi[:, :, None] * u, axis=1)), axis=1)
        d = u[:, :-1, :] - u[:, 1:, :]
        nrm = np.linalg.norm(d, axis=2)
        centers = pts[:, 1:-1, :] + r * d / nrm[:, :, None]
        nc = n_flights - 1  # center k sits at the turn into flight k+1
        # exact distance from center k to flight segment i
        p0 = pts[:, None, :-1, :]
        seg = (pts[:, 1:, :] - pts[:, :-1, :])[:, None, :, :]
        w = centers[:, :, None, :] - p0
        dd = np.sum(seg * seg, axis=-1)
        t = np.sum(w * seg, axis=-1) / dd
        np.clip(t, 0.0, 1.0, out=t)
        diff = w - t[..., None] * seg
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        jj = np.arange(nc)[None, :, None]
        ii = np.arange(n_flights)[None, None, :]
        hit = dist < r
        # center k is tangent to flights k and k+1; shadowing looks at the
        # strictly earlier path, recollision at strictly older centers
        hat_any = (hit & (ii <= jj - 1)).any(axis=2)        # by center k
        tilde_any = (hit & (ii >= jj + 2)).any(axis=1)      # by flight i
        lo, hi = skip, nc
        if kind == "W_hat":
            ev = hat_any[:, lo:hi]
        elif kind == "W_tilde":
            ev = tilde_any[:, lo:hi]
        else:
            ev = hat_any[:, lo:hi] | tilde_any[:, lo:hi]
        count += int(ev.sum())
        total += ev.size
        done += m
    return count, total


def estimate_event_probability(kind: str, r: float, trials: int, seed: int,
                               params: dict | None = None) -> EstimateCI:
    """Frequency estimate with a 95% Wilson interval for one event family.

    kinds: eta / eta_pair (per flight), W_hat / W_tilde / W_union (per
    scattering of a plain flight path), leg_mismatch (per leg),
    first_mismatch_before_T (per explorer trial; params["T"]).
    """
    params = dict(params or {})
    if trials < 100:
        raise ValueError("trials must be at least 100")
    if kind not in KINDS:
        raise ValueError(f"unknown event kind {kind!r}")
    if kind in ("eta", "eta_pair"):
        count, total = _eta_tally(r, trials, seed, pair=(kind == "eta_pair"))
        return wilson(count, total)
    if kind in ("W_hat", "W_tilde", "W_union"):
        count, total = _within_flight_events(
            r, trials, seed, kind,
            n_flights=int(params.get("n_flights", 24)),
            skip=int(params.get("skip", 4)))
        return wilson(count, total)
    if kind == "leg_mismatch":
        tally = run_interleg(r, trials, seed,
                             validate=int(params.get("validate", 300)))
        return wilson(tally.mismatch_legs, tally.n_legs)
    # first_mismatch_before_T
    T = float(params.get("T", 10.0))
    count = 0
    for k in range(trials):
        fs = generate_flight_stream(trial_stream(seed, k), T)
        res = explore(fs, r, T)
        if res.first_mismatch is not None and res.first_mismatch <= T:
            count += 1
    return wilson(count, trials)
