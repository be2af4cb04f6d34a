"""Evaluation of simulated ensembles.

Sphere runs are scored by the radial error ``| |x| - R |`` and by the law of
the endpoint statistic ``t = <mu, x_T>`` under a von Mises–Fisher target.
Swiss-roll runs are scored in latent coordinates, with each visited state
mapped to the latent coordinates of its nearest cloud point.
"""
from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate

from .errors import OutOfDomainError, ParameterError
from .neighbors import SpatialIndex, build_index


@dataclass
class EvalReport:
    """Flat metric record; metrics that do not apply stay ``None`` and are omitted from JSON."""

    n_paths: int = 0
    mean_radial_err: Optional[float] = None
    max_radial_err: Optional[float] = None
    ks_statistic: Optional[float] = None
    mean_endpoint_statistic: Optional[float] = None
    avg_nn_dist: Optional[float] = None
    avg_nn_dist_sd: Optional[float] = None
    max_latent_jump: Optional[float] = None
    spread: Optional[float] = None
    msd: Optional[float] = None
    msd_se: Optional[float] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


# --- sphere ----------------------------------------------------------------

def radial_error(traj, R: float = 1.0) -> np.ndarray:
    """Per-step ``| |x_l| - R |`` for a trajectory (or a raw state matrix)."""
    states = np.asarray(getattr(traj, "states", traj), dtype=float)
    return np.abs(np.linalg.norm(states, axis=-1) - R)


def endpoint_statistic(trajs, mu, project: bool = True) -> np.ndarray:
    """``<mu, x_T>`` per path, endpoints first projected to the unit sphere if ``project``."""
    mu = np.asarray(mu, dtype=float)
    if abs(np.linalg.norm(mu) - 1.0) > 1e-12:
        raise ParameterError("mu must have unit norm")
    ends = np.array([np.asarray(getattr(t, "states", t))[-1] for t in trajs], dtype=float)
    if project:
        ends = ends / np.linalg.norm(ends, axis=1, keepdims=True)
    return ends @ mu


@functools.lru_cache(maxsize=256)
def _vmf_log_norm(dim: int, kappa: float) -> float:
    # integral of e^{kappa (t-1)} (1-t)^a (1+t)^a over [-1, 1]; the 'alg'
    # weight absorbs the endpoint singularity when a < 0.
    a = (dim - 3) / 2.0
    val, _ = integrate.quad(lambda t: math.exp(kappa * (t - 1.0)), -1.0, 1.0,
                            weight="alg", wvar=(a, a), epsabs=0.0, epsrel=1e-13, limit=200)
    return math.log(val) + kappa


def vmf_statistic_density(dim: int, kappa: float, t) -> np.ndarray:
    """Density of ``t = <mu, x>`` for x ~ vMF(mu, kappa) on the unit sphere in R^dim.

    ``p(t) ∝ exp(kappa t) (1 - t^2)^((dim - 3) / 2)`` on (-1, 1), normalized by
    adaptive quadrature.  Zero outside (-1, 1); for ``dim < 3`` the density
    is unbounded at ±1 and evaluating there raises :class:`OutOfDomainError`.
    """
    if int(dim) < 2 or not kappa > 0:
        raise ParameterError("need dim >= 2 and kappa > 0")
    t = np.asarray(t, dtype=float)
    if dim < 3 and np.any(np.abs(t) == 1.0):
        raise OutOfDomainError("density is singular at t = ±1 for dim < 3")
    inside = np.abs(t) < 1.0
    ti = np.where(inside, t, 0.0)
    logp = kappa * ti + 0.5 * (dim - 3) * np.log1p(-ti * ti) - _vmf_log_norm(int(dim), float(kappa))
    out = np.where(inside, np.exp(logp), 0.0)
    return out if out.ndim else float(out)


def vmf_statistic_cdf(dim: int, kappa: float, t) -> np.ndarray:
    """CDF of :func:`vmf_statistic_density`, by quadrature."""
    a = (dim - 3) / 2.0
    logZ = _vmf_log_norm(int(dim), float(kappa))

    def one(x):
        if x <= -1.0:
            return 0.0
        if x >= 1.0:
            return 1.0
        # (1-s)^a (1+s)^a with s in [-1, x]: write (1-s)^a into the integrand.
        val, _ = integrate.quad(lambda s: math.exp(kappa * s - logZ) * (1.0 - s) ** a, -1.0, x,
                                weight="alg", wvar=(a, 0.0), epsabs=1e-14, epsrel=1e-12, limit=200)
        return min(max(val, 0.0), 1.0)

    t = np.asarray(t, dtype=float)
    out = np.array([one(float(x)) for x in t.ravel()]).reshape(t.shape)
    return out if out.ndim else float(out)


def ks_distance(samples, cdf: Callable) -> float:
    """Kolmogorov–Smirnov distance between the empirical CDF of ``samples`` and ``cdf``.

    The supremum is attained at a sample value or just left of one, so both
    sides are compared there.  Left limits of ``cdf`` are taken one ulp below,
    which keeps the result exact for step-shaped (right-continuous) targets.
    """
    s = np.sort(np.asarray(samples, dtype=float).ravel())
    n = len(s)
    if n == 0:
        raise ParameterError("need at least one sample")
    u = np.unique(s)
    e_right = np.searchsorted(s, u, side="right") / n
    e_left = np.searchsorted(s, u, side="left") / n
    F = np.asarray(cdf(u), dtype=float)
    F_left = np.asarray(cdf(np.nextafter(u, -np.inf)), dtype=float)
    return float(max(np.max(np.abs(e_right - F)), np.max(np.abs(e_left - F_left))))


def vmf_histogram(t, dim: int, kappa: float, bins: int = 40) -> list[tuple[float, float, int, float]]:
    """Rows ``(bin_left, bin_right, count, target_density)`` on [-1, 1].

    ``target_density`` is the bin-averaged analytic density.
    """
    edges = np.linspace(-1.0, 1.0, bins + 1)
    counts, _ = np.histogram(np.clip(t, -1.0, 1.0), bins=edges)
    F = vmf_statistic_cdf(dim, kappa, edges)
    dens = np.diff(F) / np.diff(edges)
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i]), float(dens[i])) for i in range(bins)]


def sphere_report(trajs: Sequence, R: float = 1.0, mu=None, kappa: Optional[float] = None) -> EvalReport:
    """Radial-error statistics and, when ``mu``/``kappa`` are given, the KS distance.

    ``mean_radial_err`` and ``max_radial_err`` are the time-mean and the
    time-max of the radial error of a single path, each averaged over paths.
    """
    per_path = [radial_error(t, R) for t in trajs]
    rep = EvalReport(n_paths=len(trajs),
                     mean_radial_err=float(np.mean([r.mean() for r in per_path])),
                     max_radial_err=float(np.mean([r.max() for r in per_path])))
    if mu is not None and kappa is not None:
        mu = np.asarray(mu, dtype=float)
        t = endpoint_statistic(trajs, mu)
        dim = len(mu)
        rep.ks_statistic = ks_distance(t, lambda s: vmf_statistic_cdf(dim, kappa, s))
        rep.mean_endpoint_statistic = float(t.mean())
    return rep


# --- Swiss roll ----------------------------------------------------------------

def _group_by_start(trajs) -> list[list[int]]:
    groups: dict[bytes, list[int]] = {}
    for i, t in enumerate(trajs):
        groups.setdefault(np.asarray(t.states[0], dtype=float).tobytes(), []).append(i)
    return list(groups.values())


def swiss_roll_report(trajs: Sequence, cloud, groups: Optional[Sequence[Sequence[int]]] = None,
                      index: Optional[SpatialIndex] = None) -> EvalReport:
    """Latent-space locality metrics for an ensemble on a Swiss roll.

    Paths are grouped by start state unless ``groups`` (lists of path
    indices) is given.  ``avg_nn_dist`` is the mean over all visited states
    of the distance to the nearest cloud point (``avg_nn_dist_sd`` the
    standard deviation of the per-start means); ``max_latent_jump`` the largest
    single-step latent move; ``spread`` the mean over starts of the trace of
    the latent endpoint covariance; ``msd`` the mean over starts of the mean
    squared latent displacement, with its standard error.
    """
    if cloud.latent is None:
        raise ParameterError("swiss roll report needs latent coordinates")
    if not trajs:
        raise ParameterError("empty ensemble")
    index = index or build_index(cloud)
    groups = [list(g) for g in groups] if groups is not None else _group_by_start(trajs)
    latent = cloud.latent
    nn_mean, nn_sum, n_states = {}, 0.0, 0
    lat_start, lat_end = {}, {}
    max_jump = 0.0
    for p, t in enumerate(trajs):
        i, d = index.nearest(t.states)
        nn_mean[p] = float(d.mean())
        nn_sum += float(d.sum())
        n_states += len(d)
        lat = latent[i]
        if len(lat) > 1:
            max_jump = max(max_jump, float(np.linalg.norm(np.diff(lat, axis=0), axis=1).max()))
        lat_start[p], lat_end[p] = lat[0], lat[-1]
    per_start_nn, spreads, msds = [], [], []
    for g in groups:
        per_start_nn.append(np.mean([nn_mean[p] for p in g]))
        ends = np.array([lat_end[p] for p in g])
        spreads.append(float(np.trace(np.atleast_2d(np.cov(ends.T, ddof=0)))) if len(g) > 1 else 0.0)
        msds.append(float(np.mean([np.sum((lat_end[p] - lat_start[p]) ** 2) for p in g])))
    k = len(groups)
    return EvalReport(
        n_paths=len(trajs),
        avg_nn_dist=nn_sum / n_states,
        avg_nn_dist_sd=float(np.std(per_start_nn, ddof=1)) if k > 1 else 0.0,
        max_latent_jump=max_jump,
        spread=float(np.mean(spreads)),
        msd=float(np.mean(msds)),
        msd_se=float(np.std(msds, ddof=1) / math.sqrt(k)) if k > 1 else 0.0,
    )
