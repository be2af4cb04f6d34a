"""Synthetic point clouds with known geometry, and point-cloud CSV I/O.

Three reference manifolds are supported: the round sphere S^d in R^{d+1},
the embedded torus T^2 in R^3 and the Swiss roll in R^3.  Every sampler
draws from the surface volume measure and is deterministic given its seed.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateInputError, OutOfDomainError, ParameterError, ParseError

SPHERE = "sphere"
TORUS = "torus"
SWISS_ROLL = "swiss_roll"
KINDS = (SPHERE, TORUS, SWISS_ROLL)


@dataclass(frozen=True)
class ManifoldSpec:
    """Parameters of a reference manifold.

    Use the ``sphere``, ``torus`` and ``swiss_roll`` constructors rather than
    filling fields by hand; unused fields stay ``None``.
    """

    kind: str
    dim: Optional[int] = None
    radius: Optional[float] = None
    minor_radius: Optional[float] = None
    t_lo: Optional[float] = None
    t_hi: Optional[float] = None
    height: Optional[float] = None

    def __post_init__(self):
        if self.kind == SPHERE:
            if self.dim is None or int(self.dim) < 1:
                raise ParameterError(f"sphere dimension must be >= 1, got {self.dim}")
            if self.radius is None or not self.radius > 0:
                raise ParameterError(f"sphere radius must be > 0, got {self.radius}")
        elif self.kind == TORUS:
            R, r = self.radius, self.minor_radius
            if R is None or r is None or not (0 < r < R):
                raise ParameterError(f"torus needs 0 < minor < major, got major={R}, minor={r}")
        elif self.kind == SWISS_ROLL:
            lo, hi, H = self.t_lo, self.t_hi, self.height
            if lo is None or hi is None or not (hi > lo > 0):
                raise ParameterError(f"swiss roll needs t_hi > t_lo > 0, got [{lo}, {hi}]")
            if H is None or not H > 0:
                raise ParameterError(f"swiss roll height must be > 0, got {H}")
        else:
            raise ParameterError(f"unknown manifold kind {self.kind!r}")

    @classmethod
    def sphere(cls, dim: int, radius: float = 1.0) -> "ManifoldSpec":
        return cls(SPHERE, dim=int(dim), radius=float(radius))

    @classmethod
    def torus(cls, major: float, minor: float) -> "ManifoldSpec":
        return cls(TORUS, radius=float(major), minor_radius=float(minor))

    @classmethod
    def swiss_roll(cls, t_lo: float, t_hi: float, height: float) -> "ManifoldSpec":
        return cls(SWISS_ROLL, t_lo=float(t_lo), t_hi=float(t_hi), height=float(height))

    @property
    def intrinsic_dim(self) -> int:
        return self.dim if self.kind == SPHERE else 2

    @property
    def ambient_dim(self) -> int:
        return self.dim + 1 if self.kind == SPHERE else 3

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "ManifoldSpec":
        kw = dict(d)
        kind = kw.pop("kind")
        if "dim" in kw:
            kw["dim"] = int(kw["dim"])
        return cls(kind, **{k: (v if k == "dim" else float(v)) for k, v in kw.items()})


@dataclass
class PointCloud:
    """N points in R^n, optionally with latent coordinates and the generating spec."""

    points: np.ndarray
    intrinsic_dim: int
    latent: Optional[np.ndarray] = None
    spec: Optional[ManifoldSpec] = None
    _diameter: Optional[float] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[0] < 1:
            raise ParameterError("points must be a non-empty N x n matrix")
        if not np.all(np.isfinite(self.points)):
            raise ParameterError("points contain non-finite values")
        if self.latent is not None:
            self.latent = np.ascontiguousarray(self.latent, dtype=float)
            if self.latent.ndim == 1:
                self.latent = self.latent[:, None]
            if self.latent.shape[0] != self.points.shape[0] or self.latent.shape[1] not in (1, 2):
                raise ParameterError("latent must be N x 1 or N x 2")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.points.shape[1]

    def diameter(self) -> float:
        """Exact largest pairwise distance (chunked brute force, cached)."""
        if self._diameter is None:
            self._diameter = _diameter(self.points)
        return self._diameter


def _diameter(X: np.ndarray, chunk: int = 2048) -> float:
    sq = np.einsum("ij,ij->i", X, X)
    best = 0.0
    for start in range(0, len(X), chunk):
        B = X[start:start + chunk]
        d2 = sq[start:start + chunk, None] + sq[None, :] - 2.0 * B @ X.T
        best = max(best, float(d2.max()))
    return math.sqrt(max(best, 0.0))


def _check_n(N):
    if int(N) < 1:
        raise ParameterError(f"N must be >= 1, got {N}")
    return int(N)


def sample_sphere(d: int, R: float, N: int, seed: int) -> PointCloud:
    """Uniform sample of the radius-R sphere S^d in R^{d+1}."""
    spec = ManifoldSpec.sphere(d, R)
    N = _check_n(N)
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((N, d + 1))
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    return PointCloud(R * Z / norms, intrinsic_dim=d, spec=spec)


def torus_embed(latent: np.ndarray, R: float, r: float) -> np.ndarray:
    latent = np.atleast_2d(latent)
    u, v = latent[:, 0], latent[:, 1]
    rho = R + r * np.cos(v)
    return np.column_stack([rho * np.cos(u), rho * np.sin(u), r * np.sin(v)])


def torus_latent(X: np.ndarray, R: float) -> np.ndarray:
    X = np.atleast_2d(X)
    u = np.mod(np.arctan2(X[:, 1], X[:, 0]), 2 * np.pi)
    rho = np.hypot(X[:, 0], X[:, 1])
    v = np.mod(np.arctan2(X[:, 2], rho - R), 2 * np.pi)
    return np.column_stack([u, v])


def sample_torus(R: float, r: float, N: int, seed: int) -> PointCloud:
    """Sample the torus from its area measure.

    u is uniform; v is drawn by rejection against the area factor
    ``(R + r cos v) / (R + r)``.
    """
    spec = ManifoldSpec.torus(R, r)
    N = _check_n(N)
    rng = np.random.default_rng(seed)
    vs = []
    have = 0
    while have < N:
        m = 2 * (N - have) + 16
        v = rng.uniform(0.0, 2 * np.pi, m)
        keep = v[rng.uniform(0.0, 1.0, m) * (R + r) <= R + r * np.cos(v)]
        vs.append(keep)
        have += len(keep)
    v = np.concatenate(vs)[:N]
    u = rng.uniform(0.0, 2 * np.pi, N)
    latent = np.column_stack([u, v])
    return PointCloud(torus_embed(latent, R, r), intrinsic_dim=2, latent=latent, spec=spec)


def swiss_roll_embed(latent: np.ndarray) -> np.ndarray:
    latent = np.atleast_2d(latent)
    t, h = latent[:, 0], latent[:, 1]
    return np.column_stack([t * np.cos(t), h, t * np.sin(t)])


def sample_swiss_roll(t_lo: float, t_hi: float, H: float, N: int, seed: int) -> PointCloud:
    """Sample the Swiss roll ``(t cos t, h, t sin t)`` from its area measure.

    The spiral's arclength element is sqrt(1 + t^2) dt, so t is drawn by
    rejection against that density; h is uniform on [0, H].
    """
    spec = ManifoldSpec.swiss_roll(t_lo, t_hi, H)
    N = _check_n(N)
    rng = np.random.default_rng(seed)
    top = math.sqrt(1.0 + t_hi * t_hi)
    ts = []
    have = 0
    while have < N:
        m = 2 * (N - have) + 16
        t = rng.uniform(t_lo, t_hi, m)
        keep = t[rng.uniform(0.0, 1.0, m) * top <= np.sqrt(1.0 + t * t)]
        ts.append(keep)
        have += len(keep)
    t = np.concatenate(ts)[:N]
    h = rng.uniform(0.0, H, N)
    latent = np.column_stack([t, h])
    return PointCloud(swiss_roll_embed(latent), intrinsic_dim=2, latent=latent, spec=spec)


def project_sphere(x, R: float = 1.0) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    nrm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(nrm == 0):
        raise DegenerateInputError("cannot project the zero vector onto a sphere")
    return R * x / nrm


def swiss_roll_latent(x, tol: float = 1e-3) -> tuple[float, float]:
    """Invert the Swiss-roll parametrization at a point on (or very near) the roll.

    The angle ``atan2(z, x)`` fixes t modulo 2*pi; the branch is the one whose
    spiral radius is closest to the point's distance from the roll axis.

    Raises
    ------
    OutOfDomainError
        If the reconstructed surface point is farther than ``tol`` from ``x``.
    """
    x = np.asarray(x, dtype=float)
    rho = math.hypot(x[0], x[2])
    theta = math.atan2(x[2], x[0])
    k = round((rho - theta) / (2 * math.pi))
    t = theta + 2 * math.pi * k
    if t <= 0:
        t += 2 * math.pi
    h = float(x[1])
    back = swiss_roll_embed(np.array([[t, h]]))[0]
    dist = float(np.linalg.norm(back - x))
    if not dist <= tol:
        raise OutOfDomainError(f"point {x} is {dist:.3g} away from the Swiss roll (tol {tol})")
    return t, h


# --- CSV I/O -------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_cloud(path, cloud: PointCloud) -> None:
    """Write a point cloud as CSV.

    Metadata (intrinsic dimension, manifold spec) goes into leading ``#``
    comment lines; the header is ``x1..xn[,lat1,lat2]``.
    """
    n = cloud.ambient_dim
    header = [f"x{i + 1}" for i in range(n)]
    if cloud.latent is not None:
        header += [f"lat{i + 1}" for i in range(cloud.latent.shape[1])]
    with open(path, "w", newline="") as fh:
        fh.write(f"# intrinsic_dim={cloud.intrinsic_dim}\n")
        if cloud.spec is not None:
            items = " ".join(f"{k}={v}" if k in ("kind", "dim") else f"{k}={_fmt(v)}"
                             for k, v in cloud.spec.to_dict().items())
            fh.write(f"# manifold {items}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        data = cloud.points if cloud.latent is None else np.hstack([cloud.points, cloud.latent])
        for row in data:
            w.writerow([_fmt(v) for v in row])


def load_cloud(path) -> PointCloud:
    intrinsic_dim = None
    spec = None
    header = None
    rows = []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                try:
                    if body.startswith("intrinsic_dim="):
                        intrinsic_dim = int(body.split("=", 1)[1])
                    elif body.startswith("manifold"):
                        kv = dict(item.split("=", 1) for item in body.split()[1:])
                        spec = ManifoldSpec.from_dict(kv)
                except (ValueError, TypeError) as exc:
                    raise ParseError(f"bad metadata comment: {exc}", lineno) from None
                continue
            cells = next(csv.reader([line]))
            if header is None:
                header = [c.strip() for c in cells]
                n = sum(1 for c in header if c.startswith("x"))
                n_lat = sum(1 for c in header if c.startswith("lat"))
                expected = [f"x{i + 1}" for i in range(n)] + [f"lat{i + 1}" for i in range(n_lat)]
                if n == 0 or header != expected:
                    raise ParseError(f"unexpected header {header}", lineno)
                continue
            if len(cells) != len(header):
                raise ParseError(f"expected {len(header)} cells, got {len(cells)}", lineno)
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                raise ParseError(f"non-numeric cell in row {len(rows) + 1}", lineno) from None
    if header is None or not rows:
        raise ParseError("file contains no data rows")
    data = np.array(rows)
    pts = data[:, :n]
    latent = data[:, n:] if n_lat else None
    if intrinsic_dim is None:
        intrinsic_dim = spec.intrinsic_dim if spec is not None else n - 1
    return PointCloud(pts, intrinsic_dim=intrinsic_dim, latent=latent, spec=spec)
