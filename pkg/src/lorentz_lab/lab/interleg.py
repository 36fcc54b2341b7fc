"""Multi-leg stream experiment.

One long conditioned flight stream is cut into legs at the pack stopping
indices; the short-sighted trajectory over the whole stream is assembled
(legs tile it), and a single spatial proximity join between the realised
scatterer centers and the swept path classifies every sub-r contact as

* a cross-leg shadowing event (a center of leg j too close to the path of
  an earlier leg),
* a cross-leg recollision event (the path of leg j too close to a center
  placed before the leg), or
* a same-leg contact, which is exactly the condition under which the
  per-leg explorer deviates from the short-sighted leg.

Per-leg explorer-vs-shortsighted mismatch verdicts come from the same-leg
contacts for structurally regular legs; legs whose interference bits
cluster within two flights (where the flight-geometry indicators and the
deviated short-sighted geometry can disagree) are re-simulated in full.
A random validation sample of regular legs is also re-simulated and
compared against the fast verdict.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..flight import _dirs_from_uniforms, _xi_from_uniform
from ..geometry import REL_TOL
from ..legs import Pack, _bounce_chain, eta_flags, explore_leg, pack_boundaries
from ..streams import RngStream

MEAN_FLIGHTS_PER_LEG = 74.5  # measured; only used to size the first draw


@dataclass
class InterlegTally:
    r: float
    seed: int
    n_legs: int
    n_flights: int
    w_hat_legs: int
    w_tilde_legs: int
    w_union_legs: int
    mismatch_legs: int
    corner_legs: int
    eta_flights: int
    eta_hat_flights: int
    eta_tilde_flights: int
    validation_trials: int
    validation_disagreements: int
    rule_discrepancies: int
    gamma: np.ndarray = field(repr=False)
    theta: np.ndarray = field(repr=False)
    endpoints: np.ndarray = field(repr=False)
    mismatch_mask: np.ndarray = field(repr=False)
    w_union_mask: np.ndarray = field(repr=False)

    @property
    def eta_rate(self) -> float:
        return self.eta_flights / self.n_flights


def _draw_stream(stream: RngStream, n_flights: int, first: bool):
    """Draw a block of flights in the canonical order (xi, then direction);
    the very first block conditions its first two flight times to be long."""
    raw = stream.uniforms(3 * n_flights).reshape(n_flights, 3)
    xi = _xi_from_uniform(raw[:, 0], "none")
    if first:
        xi[:2] = _xi_from_uniform(raw[:2, 0], "eps=0")
    u = _dirs_from_uniforms(raw[:, 1], raw[:, 2])
    return xi, u


def run_interleg(r: float, n_legs: int, seed: int, *,
                 chunk_len: float = 1.0,
                 query_batch: int = 2_000_000,
                 knn: int = 8,
                 validate: int = 1500) -> InterlegTally:
    """Run the full multi-leg experiment at one radius.

    Deterministic in (r, n_legs, seed).  Memory scales with the total
    flight count (~74.5 per leg, three float64 coordinate arrays plus the
    float32 KD tree), so one million legs peaks at roughly 6 GB.
    """
    if not 0.0 < r < 0.5:
        raise ValueError("r must lie in (0, 0.5)")
    stream = RngStream(seed, 0)
    # u0 slot (two draws), then flights
    u0_raw = stream.uniforms(2)
    u0 = _dirs_from_uniforms(u0_raw[:1], u0_raw[1:])[0]

    xi_parts, u_parts = [], []
    total = 0
    want = int(n_legs * MEAN_FLIGHTS_PER_LEG * 1.05) + 2048
    first = True
    while True:
        step = min(want, 8_000_000)
        xi_b, u_b = _draw_stream(stream, step, first)
        first = False
        xi_parts.append(xi_b)
        u_parts.append(u_b)
        total += step
        xi = np.concatenate(xi_parts) if len(xi_parts) > 1 else xi_parts[0]
        stops = pack_boundaries(xi)
        if len(stops) >= n_legs:
            break
        want = int((n_legs - len(stops)) * MEAN_FLIGHTS_PER_LEG * 1.1) + 2048
    u = np.concatenate(u_parts) if len(u_parts) > 1 else u_parts[0]
    del xi_parts, u_parts

    stops = stops[:n_legs]
    n_used = int(stops[-1])
    # flight n_used (the next leg's first) supplies the final junction turn
    hat, tilde = eta_flags(xi[:n_used + 2], u[:n_used + 2], r)

    # Effective per-flight velocities under the short-sighted rules; the
    # recollide flights get their displacement from the bounce chain.
    nv = n_used + 1
    V = u[:nv].copy()
    hat_rows = np.nonzero(hat[:nv])[0]
    V[hat_rows] = u[hat_rows - 1]
    tilde_rows = np.nonzero((~hat & tilde)[:n_used])[0]

    D = xi[:n_used, None] * V[:n_used]
    esc_vel = {}          # flight -> escape velocity (f64)
    windows = {}          # flight -> (rel sub-breakpoints, sub velocities)
    discrepancies = 0
    for i in tilde_rows:
        d1 = u[i - 1] - u[i]
        d2 = u[i - 1] - u[i - 2]
        c_new = (r / math.sqrt(float(d1 @ d1))) * d1
        c_old = -D[i - 1] - (r / math.sqrt(float(d2 @ d2))) * d2
        ts, ps, vs, bts, _, vend, _ = _bounce_chain(
            np.zeros(3), u[i], np.vstack((c_new, c_old)), r, float(xi[i]))
        if not bts:
            discrepancies += 1
        D[i] = ps[-1]
        esc_vel[i] = vend
        if len(ps) > 2:
            windows[i] = (np.asarray(ps), np.asarray(vs))

    P = np.vstack((np.zeros(3), np.cumsum(D, axis=0)))
    del D

    leg_starts = np.concatenate(([0], stops[:-1]))
    leg_of_flight = np.searchsorted(stops, np.arange(n_used), side="right") + 1

    # ---- centers at flight breakpoints -----------------------------------
    v_in = np.vstack((u0, V[:n_used]))
    for i, w in esc_vel.items():
        v_in[i + 1] = w
    v_out = V[:n_used + 1]
    dv = v_in - v_out
    nrm = np.sqrt(np.einsum("ij,ij->i", dv, dv))
    real = nrm > 0.0  # equal velocities mean a suppressed (starred) turn
    k_idx = np.nonzero(real)[0].astype(np.int64)
    offsets = (r * dv[real] / nrm[real][:, None]).astype(np.float32)
    del dv, nrm, v_in, v_out

    owner = np.zeros(len(k_idx), dtype=np.int32)
    pos = k_idx > 0
    owner[pos] = leg_of_flight[k_idx[pos] - 1]
    start_of = np.full(len(k_idx), -1, dtype=np.int32)
    inside = k_idx < n_used
    so = np.where(inside, leg_of_flight[np.minimum(k_idx, n_used - 1)], -1)
    start_of[:] = np.where(inside & (so != owner), so, -1)

    tilde_mask_flight = np.zeros(n_used + 1, dtype=bool)
    tilde_mask_flight[tilde_rows] = True
    win_tag = np.full(len(k_idx), -1, dtype=np.int64)
    is_t = tilde_mask_flight[np.minimum(k_idx, n_used)] & (k_idx < n_used)
    win_tag[is_t] = k_idx[is_t]
    nxt = (k_idx + 1 < n_used) & tilde_mask_flight[np.minimum(k_idx + 1, n_used)]
    fill = (~is_t) & nxt
    win_tag[fill] = k_idx[fill] + 1

    coords32 = (P[k_idx] + offsets).astype(np.float32)
    tree = cKDTree(coords32, balanced_tree=False, compact_nodes=False)

    # ---- per-leg event masks ----------------------------------------------
    what_mask = np.zeros(n_legs + 2, dtype=bool)
    wtilde_mask = np.zeros(n_legs + 2, dtype=bool)
    sameleg_mask = np.zeros(n_legs + 2, dtype=bool)

    thresh = r * (1.0 - REL_TOL)
    bound32 = np.float32(chunk_len * 0.5 + r + 3e-3)

    def process_pairs(cid, pa, pb, leg_s, sb, eb, win_s):
        c = P[k_idx[cid]] + offsets[cid]
        seg = pb - pa
        dd = np.einsum("ij,ij->i", seg, seg)
        w = c - pa
        t = np.einsum("ij,ij->i", w, seg) / np.where(dd > 0, dd, 1.0)
        np.clip(t, 0.0, 1.0, out=t)
        diff = w - t[:, None] * seg
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        ck = k_idx[cid]
        keep = (dist < thresh) & (ck != sb) & (ck != eb)
        wt = win_tag[cid]
        keep &= ~((wt >= 0) & (wt == win_s))
        if not keep.any():
            return
        cid, leg_s = cid[keep], leg_s[keep]
        c_owner = owner[cid]
        c_start = start_of[cid]
        same = (c_owner == leg_s) | (c_start == leg_s)
        sameleg_mask[leg_s[same]] = True
        rest = ~same
        late = rest & (c_owner > leg_s)
        what_mask[c_owner[late]] = True
        early = rest & (c_owner < leg_s)
        wtilde_mask[leg_s[early]] = True

    # ---- chunked queries over the swept path ------------------------------
    sat_chunks = []

    def query_chunks(pa, pb, leg_s, sb, eb, win_s):
        lens = np.linalg.norm(pb - pa, axis=1)
        pieces = np.maximum(1, np.ceil(lens / chunk_len).astype(np.int64))
        rep = np.repeat(np.arange(len(pa)), pieces)
        cum = np.concatenate(([0], np.cumsum(pieces)))
        local = np.arange(len(rep)) - cum[rep]
        frac0 = local / pieces[rep]
        frac1 = (local + 1) / pieces[rep]
        a = pa[rep] + frac0[:, None] * (pb[rep] - pa[rep])
        b = pa[rep] + frac1[:, None] * (pb[rep] - pa[rep])
        mid = ((a + b) * 0.5).astype(np.float32)
        half = (lens[rep] / pieces[rep]) * 0.5
        dist, idx = tree.query(mid, k=knn, distance_upper_bound=bound32,
                               workers=-1)
        cut = (half + (r + 2e-3))[:, None]
        good = dist <= cut
        sat = good[:, -1]
        if sat.any():
            sat_chunks.append((a[sat].copy(), b[sat].copy(), rep[sat].copy(),
                               np.nonzero(sat)[0], half[sat],
                               leg_s[rep[sat]].copy(), sb[rep[sat]].copy(),
                               eb[rep[sat]].copy(), win_s[rep[sat]].copy()))
        rows, cols = np.nonzero(good)
        if not len(rows):
            return
        cid = idx[rows, cols]
        seg_rows = rep[rows]
        process_pairs(cid, pa[seg_rows], pb[seg_rows], leg_s[seg_rows],
                      sb[seg_rows], eb[seg_rows], win_s[seg_rows])

    flights = np.arange(n_used)
    straight = ~tilde_mask_flight[:n_used]
    f_batch = max(1, int(query_batch / 1.6))
    for lo in range(0, n_used, f_batch):
        hi = min(lo + f_batch, n_used)
        rows = flights[lo:hi][straight[lo:hi]]
        if len(rows):
            query_chunks(P[rows], P[rows + 1], leg_of_flight[rows],
                         rows, rows + 1, np.full(len(rows), -1, dtype=np.int64))
        wrows = flights[lo:hi][~straight[lo:hi]]
        if len(wrows):
            pa_l, pb_l, leg_l, sb_l, eb_l, win_l = [], [], [], [], [], []
            for i in wrows:
                if i in windows:
                    ps = windows[i][0] + P[i]
                    m = len(ps) - 1
                    pa_l.append(ps[:-1])
                    pb_l.append(ps[1:])
                    sb = np.full(m, -1, dtype=np.int64)
                    eb = np.full(m, -1, dtype=np.int64)
                    sb[0] = i
                    eb[-1] = i + 1
                else:  # bounce chain degenerated to a single segment
                    pa_l.append(P[i][None, :])
                    pb_l.append(P[i + 1][None, :])
                    m = 1
                    sb = np.array([i], dtype=np.int64)
                    eb = np.array([i + 1], dtype=np.int64)
                sb_l.append(sb)
                eb_l.append(eb)
                leg_l.append(np.full(m, leg_of_flight[i], dtype=np.int32))
                win_l.append(np.full(m, i, dtype=np.int64))
            query_chunks(np.vstack(pa_l), np.vstack(pb_l),
                         np.concatenate(leg_l), np.concatenate(sb_l),
                         np.concatenate(eb_l), np.concatenate(win_l))

    # saturated chunks (more than knn candidates): exact ball re-query
    for a, b, rep_s, _, half, leg_s, sb, eb, win_s in sat_chunks:
        mids = ((a + b) * 0.5).astype(np.float32)
        lists = tree.query_ball_point(mids, bound32, workers=-1)
        for j, got in enumerate(lists):
            if not got:
                continue
            cid = np.asarray(got, dtype=np.int64)
            m = len(cid)
            process_pairs(cid, np.repeat(a[j][None, :], m, axis=0),
                          np.repeat(b[j][None, :], m, axis=0),
                          np.full(m, leg_s[j], dtype=np.int32),
                          np.full(m, sb[j], dtype=np.int64),
                          np.full(m, eb[j], dtype=np.int64),
                          np.full(m, win_s[j], dtype=np.int64))

    del tree, coords32

    # ---- per-leg bookkeeping ----------------------------------------------
    gamma = np.diff(np.concatenate(([0], stops)))
    theta = np.add.reduceat(xi[:n_used], leg_starts)
    endpoints = P[stops] - P[leg_starts]

    eta_leg = np.zeros(n_legs + 2, dtype=bool)
    both = hat[:n_used] | tilde[:n_used]
    eta_rows = np.nonzero(both)[0]
    eta_leg[leg_of_flight[eta_rows]] = True
    corner = np.zeros(n_legs + 2, dtype=bool)
    e = both
    adj = np.nonzero((e[:-1] & e[1:]))[0]
    corner[leg_of_flight[adj]] = True
    adj2 = np.nonzero((e[:-2] & e[2:]))[0]
    corner[leg_of_flight[adj2]] = True

    def full_mismatch(leg: int) -> bool:
        lo, hi = leg_starts[leg - 1], stops[leg - 1]
        pack = Pack(xi[lo:hi].copy(), u[lo:hi].copy())
        uin = u0 if lo == 0 else u[lo - 1]
        uout = u[hi]
        return explore_leg(pack, uin, uout, r).mismatch

    mismatch = sameleg_mask.copy()
    corner_ids = np.nonzero(corner[1:n_legs + 1])[0] + 1
    for leg in corner_ids:
        mismatch[leg] = full_mismatch(int(leg))

    # validation: the fast verdict must agree with the full per-leg replay
    vrng = np.random.default_rng(seed ^ 0x5EED)
    n_val = min(validate, n_legs)
    val_ids = 1 + vrng.choice(n_legs, size=n_val, replace=False)
    disagreements = 0
    for leg in val_ids:
        if corner[leg]:
            continue
        if full_mismatch(int(leg)) != bool(sameleg_mask[leg]):
            disagreements += 1

    w_union = what_mask | wtilde_mask
    return InterlegTally(
        r=r, seed=seed, n_legs=n_legs, n_flights=n_used,
        w_hat_legs=int(what_mask[1:n_legs + 1].sum()),
        w_tilde_legs=int(wtilde_mask[1:n_legs + 1].sum()),
        w_union_legs=int(w_union[1:n_legs + 1].sum()),
        mismatch_legs=int(mismatch[1:n_legs + 1].sum()),
        corner_legs=int(corner[1:n_legs + 1].sum()),
        eta_flights=int(both.sum()),
        eta_hat_flights=int(hat[:n_used].sum()),
        eta_tilde_flights=int(tilde[:n_used].sum()),
        validation_trials=int(n_val),
        validation_disagreements=int(disagreements),
        rule_discrepancies=int(discrepancies),
        gamma=gamma, theta=theta, endpoints=endpoints,
        mismatch_mask=mismatch[1:n_legs + 1],
        w_union_mask=w_union[1:n_legs + 1],
    )
