"""Two-scatterer middle-segment laboratory.

The ingredients are (u, xi, v): a direction into a short flight, its
length (conditioned below one mean free path), and the direction offered
after it, with a reference incoming direction e.  Around this sit two
spheres of radius r: the one that produced the turn at the origin and the
one offered at the far end of the short flight.  The lab measures

* membership of the shadow set (the backward ray re-enters the offered
  ball) and the recollision set (the onward flight re-enters the old
  ball),
* the bounce chain between the two spheres: trapping time, escape
  direction, collision count,
* the defocusing plane: both centers lie in a plane through the first
  impact point; the velocity component along its normal never decreases.

Everything scales exactly under (u, xi, v) -> (u, xi/r, v) with unit
spheres, which is how the flat-measure integrals are evaluated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..geometry import BudgetExceededError, first_hit_among, reflect
from ..flight import _dirs_from_uniforms, _xi_from_uniform
from ..streams import RngStream
from .stats import EstimateCI, mean_ci

E_DIR = np.array([1.0, 0.0, 0.0])


def _membership(xi, u, v, r):
    """Vectorised membership and entry times of the shadow / recollision
    sets.  Returns (in_hat, in_tilde, sigma_hat, sigma_tilde)."""
    du = u - v
    nd = np.linalg.norm(du, axis=1)
    c_hat = xi[:, None] * u + r * du / nd[:, None]
    b = c_hat[:, 0]  # dot with e = (1,0,0)
    cc = np.sum(c_hat * c_hat, axis=1)
    perp2 = cc - b * b
    inside = cc < r * r
    in_hat = inside | ((b < 0.0) & (perp2 < r * r))
    disc = np.maximum(b * b - (cc - r * r), 0.0)
    sigma_hat = np.where(inside, 0.0,
                         np.where(in_hat, -b - np.sqrt(disc), np.inf))

    de = u - E_DIR[None, :]
    ne = np.linalg.norm(de, axis=1)
    a_ctr = -r * de / ne[:, None]  # the old scatterer's center, r(e-u)/|e-u|
    m0 = xi[:, None] * u - a_ctr
    bt = np.sum(m0 * v, axis=1)
    mm = np.sum(m0 * m0, axis=1)
    in_tilde = (bt < 0.0) & (mm - bt * bt < r * r)
    disc_t = np.maximum(bt * bt - (mm - r * r), 0.0)
    sigma_tilde = np.where(in_tilde, -bt - np.sqrt(disc_t), np.inf)
    return in_hat, in_tilde, sigma_hat, sigma_tilde, a_ctr, c_hat


def _plane_normal(xi, u, v, r):
    """Unit normal of the plane spanned by the two center vectors, signed
    so that its e-component is positive (degenerate rows -> zero)."""
    a = (E_DIR[None, :] - u)
    a = a / np.linalg.norm(a, axis=1)[:, None]
    b = (xi / r)[:, None] * u + (u - v) / np.linalg.norm(u - v, axis=1)[:, None]
    n = np.cross(a, b)
    nn = np.linalg.norm(n, axis=1)
    ok = nn > 0.0
    n = np.where(ok[:, None], n / np.where(ok, nn, 1.0)[:, None], 0.0)
    sign = np.where(n[:, 0] < 0.0, -1.0, 1.0)
    return n * sign[:, None], ok


def _escape_chain(pos, vel, centers, r, budget=10 ** 6):
    """Bounce between fixed spheres until escape; returns (bounce_times,
    post-bounce velocities)."""
    t = 0.0
    bts, vels = [], []
    while True:
        hit = first_hit_among(pos, vel, centers, r, math.inf)
        if hit is None:
            return bts, vels, vel
        th, _, nrm = hit
        t += th
        pos = pos + th * vel
        vel = reflect(vel, nrm)
        bts.append(t)
        vels.append(vel.copy())
        if len(bts) > budget:
            raise BudgetExceededError("two-sphere chain exceeded budget")


@dataclass
class MiddleOutcome:
    """One sample of the middle-segment lab."""

    in_A_hat: bool
    in_A_tilde: bool
    sigma_hat: float
    sigma_tilde: float
    beta_tilde: float
    w_hat: np.ndarray
    w_tilde: np.ndarray
    nu: int
    n_plane: np.ndarray


@dataclass
class MiddleBatch:
    """Vectorised sample of the lab at one radius."""

    r: float
    n: int
    xi: np.ndarray
    angle_u: np.ndarray          # angle(-e, u); the shadow escape angle
    in_hat: np.ndarray
    in_tilde: np.ndarray
    sigma_hat: np.ndarray
    sigma_tilde: np.ndarray
    tilde_rows: np.ndarray       # indices of recollision members
    beta: np.ndarray             # trapping times of those rows
    angle_w: np.ndarray          # angle(-e, escape velocity)
    nu: np.ndarray               # collision counts (two turns + bounces)
    v_dot_n: np.ndarray
    monotone_ok: np.ndarray
    pathwise_ok: np.ndarray
    plane_degenerate: int = 0


def middle_segment_sample(stream: RngStream, r: float) -> MiddleOutcome:
    """One sample drawn from the lab's ingredient law: u, v uniform on the
    sphere and xi from the short-flight conditional law."""
    raw = stream.uniforms(5)
    u = _dirs_from_uniforms(raw[0:1], raw[1:2])[0]
    xi = float(_xi_from_uniform(raw[2:3], "eps=1")[0])
    v = _dirs_from_uniforms(raw[3:4], raw[4:5])[0]
    return _sample_one(xi, u, v, r)


def _sample_one(xi, u, v, r) -> MiddleOutcome:
    xi_a = np.array([xi])
    in_h, in_t, s_h, s_t, a_ctr, c_hat = _membership(xi_a, u[None, :],
                                                     v[None, :], r)
    n_pl, ok = _plane_normal(xi_a, u[None, :], v[None, :], r)
    beta = 0.0
    w_t = v.copy()
    nu = 2
    if in_t[0]:
        bts, vels, w_t = _escape_chain(xi * u, v.copy(),
                                       np.vstack((a_ctr[0], c_hat[0])), r)
        beta = bts[-1] if bts else 0.0
        nu += len(bts)
    return MiddleOutcome(bool(in_h[0]), bool(in_t[0]), float(s_h[0]),
                         float(s_t[0]), beta, u.copy(), w_t, nu, n_pl[0])


def sample_middle_batch(r: float, trials: int, seed: int) -> MiddleBatch:
    """Draw ``trials`` lab samples; recollision members get the full bounce
    chain, the defocusing monotonicity check and the pathwise trapping-time
    bound beta <= xi + r/|v.n|."""
    stream = RngStream(seed, 0)
    raw = stream.uniforms(5 * trials).reshape(trials, 5)
    u = _dirs_from_uniforms(raw[:, 0], raw[:, 1])
    xi = _xi_from_uniform(raw[:, 2], "eps=1")
    v = _dirs_from_uniforms(raw[:, 3], raw[:, 4])
    in_h, in_t, s_h, s_t, a_ctr, c_hat = _membership(xi, u, v, r)
    n_pl, plane_ok = _plane_normal(xi, u, v, r)
    angle_u = np.arccos(np.clip(-u[:, 0], -1.0, 1.0))

    rows = np.nonzero(in_t)[0]
    beta = np.zeros(len(rows))
    angle_w = np.zeros(len(rows))
    nu = np.zeros(len(rows), dtype=np.int64)
    vdn = np.zeros(len(rows))
    mono = np.ones(len(rows), dtype=bool)
    pathw = np.ones(len(rows), dtype=bool)
    degen = 0
    for j, i in enumerate(rows):
        bts, vels, w_esc = _escape_chain(xi[i] * u[i], v[i].copy(),
                                         np.vstack((a_ctr[i], c_hat[i])), r)
        beta[j] = bts[-1] if bts else 0.0
        angle_w[j] = math.acos(max(-1.0, min(1.0, -float(w_esc[0]))))
        nu[j] = 2 + len(bts)
        if not plane_ok[i]:
            degen += 1
            continue
        npl = n_pl[i]
        vdn[j] = float(v[i] @ npl)
        seq = [float(npl[0]), float(u[i] @ npl), vdn[j]]
        seq += [float(w @ npl) for w in vels]
        arr = np.asarray(seq)
        mono[j] = bool(np.all(np.diff(arr) >= -1e-9) and arr[0] >= -1e-12)
        bound = xi[i] + (r / abs(vdn[j]) if vdn[j] != 0.0 else math.inf)
        pathw[j] = beta[j] <= bound + 1e-9 * (1.0 + beta[j])
    return MiddleBatch(r, trials, xi, angle_u, in_h, in_t, s_h, s_t,
                       rows, beta, angle_w, nu, vdn, mono, pathw, degen)


def middle_tail_curves(batch: MiddleBatch, s_grid: np.ndarray) -> dict:
    """Empirical tail curves with their analytic envelope shapes.

    shadow_angle: mu(angle(-e, u) < s on the shadow set), envelope r*s.
    recollide_angle: same for the escape direction, envelope
    r*s*(max(|log s|, 1)).  trap_time: mu(beta/r > s on the recollision
    set), envelope r*min(s^-1 max(log s,1), 1).  Each curve comes with the
    per-point fitted constant ratio."""
    s_grid = np.asarray(s_grid, dtype=float)
    n = batch.n
    shadow = np.array([
        float(np.sum(batch.in_hat & (batch.angle_u < s))) / n for s in s_grid])
    reco = np.array([
        float(np.sum(batch.angle_w < s)) / n for s in s_grid])
    trap = np.array([
        float(np.sum(batch.beta > s * batch.r)) / n for s in s_grid])
    env_shadow = batch.r * np.minimum(s_grid, 1.0)
    env_reco = batch.r * np.minimum(
        s_grid * np.maximum(np.abs(np.log(s_grid)), 1.0), 1.0)
    env_trap = batch.r * np.minimum(
        np.maximum(np.abs(np.log(s_grid)), 1.0) / s_grid, 1.0)
    out = {"s": s_grid}
    for name, tail, env in (("shadow_angle", shadow, env_shadow),
                            ("recollide_angle", reco, env_reco),
                            ("trap_time", trap, env_trap)):
        out[name] = tail
        out[name + "_envelope"] = env
        with np.errstate(divide="ignore", invalid="ignore"):
            out[name + "_ratio"] = np.where(env > 0, tail / env, np.nan)
    return out


def unit_membership(h: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Membership of the unit-radius (dilated) sets, used for the flat
    measure: in_hat(u, h, v), in_tilde(u, h, v) at r = 1."""
    in_h, in_t, _, _, _, _ = _membership(h, u, v, 1.0)
    return in_h, in_t


@dataclass
class LambdaEstimate:
    lam_hat: EstimateCI
    lam_tilde: EstimateCI
    diff: EstimateCI            # paired difference, same samples
    h_max: float
    truncation_bound: float


def lambda_measure_estimate(trials: int, h_max: float, seed: int) -> LambdaEstimate:
    """Importance-sampled flat measure of the two unit-scale sets.

    h is uniform on [0, h_max] with weight h_max.  Both sets demand the
    relevant angle be below ~2/h, so the truncated tail is bounded by
    int_{h_max}^inf 2 h^-2 dh = 2/h_max, reported as truncation_bound.
    """
    if h_max < 50:
        raise ValueError("h_max must be at least 50")
    stream = RngStream(seed, 0)
    block = 2_000_000
    done = 0
    vals_h, vals_t, vals_d = [], [], []
    while done < trials:
        m = min(block, trials - done)
        raw = stream.uniforms(5 * m).reshape(m, 5)
        u = _dirs_from_uniforms(raw[:, 0], raw[:, 1])
        h = raw[:, 2] * h_max
        v = _dirs_from_uniforms(raw[:, 3], raw[:, 4])
        in_h, in_t = unit_membership(h, u, v)
        vals_h.append(in_h)
        vals_t.append(in_t)
        done += m
    in_h = np.concatenate(vals_h)
    in_t = np.concatenate(vals_t)
    lam_h = mean_ci(in_h * h_max)
    lam_t = mean_ci(in_t * h_max)
    diff = mean_ci((in_h.astype(float) - in_t.astype(float)) * h_max)
    return LambdaEstimate(lam_h, lam_t, diff, h_max, 2.0 / h_max)
