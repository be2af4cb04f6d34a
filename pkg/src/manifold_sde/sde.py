"""Euler–Maruyama integration of the point-cloud diffusion.

One step from state ``x`` reads, with ``(v, S, Gamma)`` the operator field
extended to ``x`` and ``h`` the effective step (``step * speedup``)::

    u  = x + [v + langevin_drift(Gamma, x)] h + S sqrt(h) xi
    x' = drgd(u)            # optional denoising retraction

Paths in an ensemble are integrated together as a batch, but every path owns
its random stream (derived from ``(seed, path_index)``), so results do not
depend on batching or thread scheduling.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DivergenceError, ParameterError
from .graph_ops import OperatorField, extend_batch
from .manifolds import SPHERE
from .neighbors import SpatialIndex
from .score import ScoreConfig

IMD = "imd"
CDC_ONLY = "cdc_only"
AMBIENT_NOISE = "ambient_noise"
METHODS = (IMD, CDC_ONLY, AMBIENT_NOISE)

DIVERGENCE_FACTOR = 100.0
_NOISE_BLOCK = 256  # steps of noise drawn per path at a time


@dataclass(frozen=True)
class IntegratorConfig:
    """Step size, step count and integration options.

    ``method`` selects the full scheme (``imd``) or one of the two
    ablations: ``cdc_only`` drops the generator drift, ``ambient_noise``
    replaces the CDC noise by isotropic ambient noise.
    """

    step: float = 1e-3
    steps: int = 1000
    speedup: float = 1.0
    seed: int = 0
    drgd_enabled: bool = False
    knn_extension: int = 1
    method: str = IMD

    def __post_init__(self):
        if not self.step > 0 or not self.speedup > 0:
            raise ParameterError("step and speedup must be > 0")
        if int(self.steps) < 0:
            raise ParameterError(f"steps must be >= 0, got {self.steps}")
        if int(self.knn_extension) < 1:
            raise ParameterError("knn_extension must be >= 1")
        if self.method not in METHODS:
            raise ParameterError(f"unknown method {self.method!r}")

    @property
    def h_eff(self) -> float:
        return self.step * self.speedup


NONE = "none"
VMF = "vmf"
QUADRATIC = "quadratic"


@dataclass(frozen=True)
class DriftSpec:
    """Potential entering the Langevin drift.

    ``vmf`` is ``U(x) = -kappa mu.x``; ``quadratic`` is ``U(x) = |x - z*|^2 / 2``.
    ``beta`` is the inverse temperature of the target ``exp(-beta U)``.
    """

    kind: str = NONE
    mu: Optional[tuple] = None
    kappa: Optional[float] = None
    z_star: Optional[tuple] = None
    beta: float = 1.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ParameterError("beta must be > 0")
        if self.kind == VMF:
            if self.mu is None or self.kappa is None or not self.kappa > 0:
                raise ParameterError("vmf drift needs mu and kappa > 0")
            if abs(np.linalg.norm(self.mu) - 1.0) > 1e-12:
                raise ParameterError("vmf mean direction must have unit norm")
        elif self.kind == QUADRATIC:
            if self.z_star is None:
                raise ParameterError("quadratic drift needs z_star")
        elif self.kind != NONE:
            raise ParameterError(f"unknown drift kind {self.kind!r}")

    @classmethod
    def vmf(cls, mu, kappa, beta=1.0):
        return cls(VMF, mu=tuple(float(v) for v in mu), kappa=float(kappa), beta=beta)

    @classmethod
    def quadratic(cls, z_star, beta=1.0):
        return cls(QUADRATIC, z_star=tuple(float(v) for v in z_star), beta=beta)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    nn_dist: np.ndarray
    radial_err: Optional[np.ndarray] = None
    error: Optional[DivergenceError] = None
    path_index: Optional[int] = None

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1


def potential_gradient(spec: DriftSpec, x) -> np.ndarray:
    """Ambient gradient of the potential; accepts one state or a batch."""
    x = np.asarray(x, dtype=float)
    if spec.kind == VMF:
        return np.broadcast_to(-spec.kappa * np.asarray(spec.mu), x.shape).copy()
    if spec.kind == QUADRATIC:
        return x - np.asarray(spec.z_star)
    return np.zeros_like(x)


def langevin_drift(spec: DriftSpec, cdc, x) -> np.ndarray:
    """Tangentially projected force ``-(beta/2) Gamma grad U``.

    The 1/2 matches the 1/2-Laplacian generated by the CDC noise, so the
    stationary law is ``exp(-beta U)``.
    """
    grad = potential_gradient(spec, x)
    return -0.5 * spec.beta * np.einsum("...ij,...j->...i", cdc, grad)


def derive_seed(seed: int, path_index: int) -> int:
    """Seed of path ``path_index`` in an ensemble seeded by ``seed``."""
    return int(np.random.SeedSequence([int(seed), int(path_index)]).generate_state(1, np.uint64)[0])


class _Engine:
    """Shared immutable state for batched stepping."""

    def __init__(self, field: OperatorField, index: SpatialIndex, cfg: IntegratorConfig,
                 spec: DriftSpec, score: Optional[ScoreConfig], bound: float):
        if cfg.drgd_enabled and score is None:
            raise ParameterError("DRGD requires a score configuration")
        self.field, self.index, self.cfg, self.spec, self.score = field, index, cfg, spec, score
        self.bound = bound

    def coefficients(self, X):
        drift, root, cdc, _, nn_d = extend_batch(self.field, self.index, X, self.cfg.knn_extension)
        return drift, root, cdc, nn_d

    def step(self, X, xi, coeffs=None):
        cfg = self.cfg
        h = cfg.h_eff
        drift, root, cdc, nn_d = coeffs if coeffs is not None else self.coefficients(X)
        if cfg.method == AMBIENT_NOISE:
            force = -0.5 * self.spec.beta * potential_gradient(self.spec, X)
            U = X + force * h + math.sqrt(h) * xi
        else:
            force = langevin_drift(self.spec, cdc, X)
            if cfg.method == IMD:
                force = force + drift
            U = X + force * h + math.sqrt(h) * np.einsum("pij,pj->pi", root, xi)
        if cfg.drgd_enabled:
            U = self.score.barycenter(U)
        return U

    def diverged(self, X):
        bad = ~np.all(np.isfinite(X), axis=1)
        with np.errstate(invalid="ignore"):
            bad |= np.linalg.norm(X, axis=1) > self.bound
        return bad


def em_step(field: OperatorField, index: SpatialIndex, cfg: IntegratorConfig, spec: DriftSpec,
            x, xi, score: Optional[ScoreConfig] = None, bound: float = math.inf) -> np.ndarray:
    """One integrator step from ``x`` with the standard-normal draw ``xi`` supplied.

    DRGD is applied only if ``cfg.drgd_enabled``.  Raises
    :class:`DivergenceError` if the new state is non-finite or exceeds ``bound``.
    """
    eng = _Engine(field, index, cfg, spec, score, bound)
    X = np.asarray(x, dtype=float)[None, :]
    out = eng.step(X, np.asarray(xi, dtype=float)[None, :])
    if eng.diverged(out)[0]:
        raise DivergenceError(1, out[0])
    return out[0]


def _run_batch(eng: _Engine, x0s: np.ndarray, seeds: Sequence[int], R: Optional[float],
               path_ids: Sequence[Optional[int]]) -> list[Trajectory]:
    cfg = eng.cfg
    P, n = x0s.shape
    L = int(cfg.steps)
    rngs = [np.random.default_rng(s) for s in seeds]
    states = np.empty((L + 1, P, n))
    nn = np.empty((L + 1, P))
    states[0] = x0s
    alive = np.ones(P, dtype=bool)
    failed_at = np.full(P, -1)
    errors: list[Optional[DivergenceError]] = [None] * P
    X = x0s.copy()
    noise = None
    for ell in range(L):
        b = ell % _NOISE_BLOCK
        if b == 0:
            block = min(_NOISE_BLOCK, L - ell)
            noise = np.stack([r.standard_normal((block, n)) for r in rngs], axis=1)
        act = np.nonzero(alive)[0]
        coeffs = eng.coefficients(X[act])
        nn[ell, act] = coeffs[3]
        Xn = eng.step(X[act], noise[b, act], coeffs)
        bad = eng.diverged(Xn)
        X[act] = Xn
        states[ell + 1, act] = Xn
        for j in act[bad]:
            alive[j] = False
            failed_at[j] = ell + 1
            errors[j] = DivergenceError(ell + 1, X[j].copy(), path_ids[j])
        if not alive.any():
            break
    act = np.nonzero(alive)[0]
    if len(act):
        nn[L, act] = eng.index.nearest(X[act])[1]
    h = cfg.h_eff
    out = []
    for p in range(P):
        end = L + 1 if failed_at[p] < 0 else failed_at[p] + 1
        st = states[:end, p].copy()
        nd = nn[:end, p].copy()
        if failed_at[p] >= 0:
            nd[-1] = np.nan
        rad = np.abs(np.linalg.norm(st, axis=1) - R) if R is not None else None
        out.append(Trajectory(times=np.arange(end) * h, states=st, nn_dist=nd,
                              radial_err=rad, error=errors[p], path_index=path_ids[p]))
    return out


def _sphere_radius(cloud) -> Optional[float]:
    spec = getattr(cloud, "spec", None)
    return spec.radius if spec is not None and spec.kind == SPHERE else None


def _bound(cloud) -> float:
    return DIVERGENCE_FACTOR * cloud.diameter()


def simulate(field: OperatorField, index: SpatialIndex, cloud, cfg: IntegratorConfig,
             spec: DriftSpec = DriftSpec(), score: Optional[ScoreConfig] = None,
             x0=None) -> Trajectory:
    """Integrate one path from ``x0`` (default: the first cloud point).

    Raises :class:`DivergenceError` (with the step index) on blow-up.
    """
    x0 = cloud.points[0] if x0 is None else np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise ParameterError("x0 must be finite")
    eng = _Engine(field, index, cfg, spec, score, _bound(cloud))
    traj = _run_batch(eng, x0[None, :].copy(), [cfg.seed], _sphere_radius(cloud), [None])[0]
    if traj.error is not None:
        raise traj.error
    return traj


def simulate_ensemble(field: OperatorField, index: SpatialIndex, cloud, cfg: IntegratorConfig,
                      spec: DriftSpec = DriftSpec(), score: Optional[ScoreConfig] = None,
                      x0s=None, n_paths: Optional[int] = None, threads: int = 1,
                      batch_size: int = 512) -> list[Trajectory]:
    """Integrate ``n_paths`` independent paths.

    ``x0s`` is either one start state (shared by all paths) or one row per
    path; by default every path starts at the first cloud point.  Path ``p``
    uses the seed ``derive_seed(cfg.seed, p)``.  A path that diverges keeps
    its truncated states and carries the error in ``Trajectory.error``; the
    other paths are unaffected.
    """
    if x0s is None:
        x0s = cloud.points[0]
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    if n_paths is None:
        n_paths = len(x0s)
    if n_paths < 1:
        raise ParameterError("n_paths must be >= 1")
    if len(x0s) == 1:
        x0s = np.repeat(x0s, n_paths, axis=0)
    elif len(x0s) != n_paths:
        raise ParameterError(f"got {len(x0s)} start states for {n_paths} paths")
    eng = _Engine(field, index, cfg, spec, score, _bound(cloud))
    R = _sphere_radius(cloud)
    seeds = [derive_seed(cfg.seed, p) for p in range(n_paths)]
    chunks = [range(s, min(s + batch_size, n_paths)) for s in range(0, n_paths, batch_size)]

    def run(ch):
        return _run_batch(eng, x0s[ch.start:ch.stop].copy(), seeds[ch.start:ch.stop], R, list(ch))

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(ch) for ch in chunks]
    return [t for part in parts for t in part]
