"""Diffusive-scaling diagnostics for the coupled explorer/flight pair.

Per trial the two trajectories share one stream, so their sup distance is
a genuine coupling observable.  Endpoint statistics are compared against
the exact displacement variance of the flight process,
E|Y(t)|^2 = 2t - 2(1 - e^-t) (2/3 of it per coordinate), which plays the
role of the diffusivity oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial
from multiprocessing import get_context

import numpy as np

from ..exploration import RECOLLISION, SHADOWED, explore
from ..flight import (_dirs_from_uniforms, _xi_from_uniform, flight_path,
                      generate_flight_stream, mean_square_displacement)
from ..legs import sup_path_distance
from ..streams import RngStream, trial_stream
from .stats import normal_ks_pvalue


def gk_position_variance(t: float) -> float:
    """Exact E|Y(t)|^2 (all three coordinates together)."""
    return float(mean_square_displacement(t))


def coupled_trial(trial: int, seed: int, r: float, T: float,
                  msd_times: tuple) -> dict:
    """One coupled explorer/flight trial; returns endpoint and sup data."""
    fs = generate_flight_stream(trial_stream(seed, trial), T)
    res = explore(fs, r, T)
    y = flight_path(fs, t_max=T)
    sup = sup_path_distance(res.path, y)
    msd = np.einsum("ij,ij->i", res.path.position(np.asarray(msd_times)),
                    res.path.position(np.asarray(msd_times)))
    return {
        "x_end": res.path.end_point,
        "y_end": y.end_point,
        "sup": sup,
        "msd": msd,
        "mismatches": res.events.count(RECOLLISION) + res.events.count(SHADOWED),
        "first_mismatch": res.first_mismatch,
    }


def _run_trials(seed, r, T, msd_times, trials, workers):
    fn = partial(coupled_trial, seed=seed, r=r, T=T, msd_times=tuple(msd_times))
    if workers <= 1:
        return [fn(k) for k in range(trials)]
    with get_context("spawn").Pool(workers) as pool:
        return pool.map(fn, range(trials), chunksize=64)


def flight_endpoint_sample(seed: int, T: float, trials: int) -> np.ndarray:
    """(trials, 3) endpoints of independent flight paths, vectorised."""
    out = np.empty((trials, 3))
    block = max(1, int(4_000_000 / (T * 1.3 + 32)))
    per = int(T * 1.3) + 48
    done = 0
    bi = 0
    while done < trials:
        m = min(block, trials - done)
        stream = RngStream(seed, 3_000_000 + bi)
        bi += 1
        raw = stream.uniforms(3 * m * per).reshape(m, per, 3)
        xi = _xi_from_uniform(raw[:, :, 0], "none")
        cum = np.cumsum(xi, axis=1)
        if cum[:, -1].min() <= T:  # astronomically unlikely; keep exact
            raise RuntimeError("flight block too short for horizon")
        u = _dirs_from_uniforms(raw[:, :, 1], raw[:, :, 2])
        pts = np.cumsum(xi[:, :, None] * u, axis=1)
        idx = np.argmax(cum > T, axis=1)
        rows = np.arange(m)
        prev = np.where(idx[:, None] > 0, pts[rows, idx - 1], 0.0)
        tprev = np.where(idx > 0, cum[rows, idx - 1], 0.0)
        out[done:done + m] = prev + (T - tprev)[:, None] * u[rows, idx]
        done += m
    return out


@dataclass
class ScalingReport:
    r: float
    T: float
    trials: int
    seed: int
    sup_quantiles: dict
    var_x: np.ndarray
    var_y: np.ndarray
    var_ratio: np.ndarray
    cov_x: np.ndarray = field(repr=False)
    ks_p_x: np.ndarray = field(default=None, repr=False)
    ks_p_y: np.ndarray = field(default=None, repr=False)
    bonferroni_m: int = 6
    msd_times: np.ndarray = field(default=None, repr=False)
    msd_x: np.ndarray = field(default=None, repr=False)
    msd_oracle: np.ndarray = field(default=None, repr=False)
    y_diffusivity: float = 0.0
    gk_diffusivity: float = 0.0
    mean_mismatches: float = 0.0
    regime_warnings: tuple = ()

    @property
    def ks_bonferroni_min(self) -> float:
        return float(min(self.ks_p_x.min(), self.ks_p_y.min()) * self.bonferroni_m)


def scaling_diagnostics(r: float, T: float, trials: int, seed: int,
                        msd_points: int = 16, y_trials: int = 20_000,
                        workers: int = 1) -> ScalingReport:
    """Distribution of sup|X - Y|/sqrt(T), endpoint variances and normality,
    the explorer's mean-square displacement curve, and the flight-process
    diffusivity against its exact oracle.

    Warns (without failing) when the run sits outside the regimes
    r*T << 1 or r^2 log^2(1/r) * T << 1 that the couplings target.
    """
    warnings = []
    if r * T > 1.5:
        warnings.append(f"r*T = {r * T:.3g} is not small: past the naive regime")
    l2 = (math.log(1.0 / r)) ** 2
    if r * r * l2 * T > 1.5:
        warnings.append(f"r^2 log^2 T = {r * r * l2 * T:.3g} is not small")
    msd_times = tuple(np.linspace(T / msd_points, T, msd_points))
    rows = _run_trials(seed, r, T, msd_times, trials, workers)
    x_end = np.asarray([row["x_end"] for row in rows])
    y_end = np.asarray([row["y_end"] for row in rows])
    sups = np.asarray([row["sup"] for row in rows]) / math.sqrt(T)
    msd_x = np.mean(np.asarray([row["msd"] for row in rows]), axis=0)
    mism = float(np.mean([row["mismatches"] for row in rows]))

    sq = math.sqrt(T)
    var_x = (x_end / sq).var(axis=0, ddof=1)
    var_y = (y_end / sq).var(axis=0, ddof=1)
    cov_x = np.cov((x_end / sq).T)
    sigma = math.sqrt(gk_position_variance(T) / (3.0 * T))
    ks_x = np.asarray([normal_ks_pvalue(x_end[:, i] / sq, sigma) for i in range(3)])
    ks_y = np.asarray([normal_ks_pvalue(y_end[:, i] / sq, sigma) for i in range(3)])

    y_big = flight_endpoint_sample(seed, T, y_trials)
    y_diff = float(y_big.var(axis=0, ddof=1).mean() / T)
    gk = gk_position_variance(T) / (3.0 * T)

    qs = {q: float(np.quantile(sups, q)) for q in (0.5, 0.9, 0.95, 0.99)}
    return ScalingReport(
        r=r, T=T, trials=trials, seed=seed,
        sup_quantiles=qs,
        var_x=var_x, var_y=var_y, var_ratio=var_x / var_y,
        cov_x=cov_x, ks_p_x=ks_x, ks_p_y=ks_y, bonferroni_m=6,
        msd_times=np.asarray(msd_times), msd_x=msd_x,
        msd_oracle=mean_square_displacement(np.asarray(msd_times)),
        y_diffusivity=y_diff, gk_diffusivity=float(gk),
        mean_mismatches=mism,
        regime_warnings=tuple(warnings),
    )
