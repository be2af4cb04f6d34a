"""Closed-form score of a Gaussian kernel density estimate.

For data ``x_1..x_N`` and smoothing scale ``sigma`` the smoothed empirical
density is ``p(x) ∝ sum_i exp(-|x - x_i|^2 / 2 sigma^2)`` and its score is

    s(x) = sum_i w_i(x) (x_i - x) / sigma^2,   w = softmax_i(-|x - x_i|^2 / 2 sigma^2).

This is the minimizer of denoising score matching at noise level sigma, so it
stands in for a trained score network.  The denoising step
``u + sigma^2 s(u)`` is then the softmax-weighted barycenter of the data.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ParameterError

DEFAULT_SIGMA_FRACTION = 0.005
_MAX_BLOCK = 4_000_000  # entries of the (queries x data) weight matrix per block


@dataclass
class ScoreConfig:
    sigma: float
    points: np.ndarray

    def __post_init__(self):
        if not self.sigma > 0:
            raise ParameterError(f"sigma must be > 0, got {self.sigma}")
        self.points = np.ascontiguousarray(self.points, dtype=float)
        self._sq = np.einsum("ij,ij->i", self.points, self.points)

    @classmethod
    def for_cloud(cls, cloud, sigma=None) -> "ScoreConfig":
        """Default sigma is 0.005 times the cloud diameter."""
        if sigma is None:
            sigma = DEFAULT_SIGMA_FRACTION * cloud.diameter()
        return cls(float(sigma), cloud.points)

    def _weights(self, U: np.ndarray) -> np.ndarray:
        # |u - x_i|^2 expanded; the per-row |u|^2 term cancels in the softmax.
        logits = (U @ self.points.T - 0.5 * self._sq[None, :]) / self.sigma ** 2
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        return w

    def barycenter(self, U) -> np.ndarray:
        """Softmax-weighted data barycenter for each row of ``U``."""
        U = np.atleast_2d(np.asarray(U, dtype=float))
        out = np.empty_like(U)
        step = max(1, _MAX_BLOCK // len(self.points))
        for s in range(0, len(U), step):
            out[s:s + step] = self._weights(U[s:s + step]) @ self.points
        return out

    def log_density(self, x) -> float:
        """Unnormalized KDE log-density ``log sum_i exp(-|x - x_i|^2 / 2 sigma^2)``."""
        x = np.asarray(x, dtype=float)
        d2 = np.sum((self.points - x) ** 2, axis=1)
        return float(logsumexp(-d2 / (2 * self.sigma ** 2)))


def score_at(cfg: ScoreConfig, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return (cfg.barycenter(x[None, :])[0] - x) / cfg.sigma ** 2


def score_batch(cfg: ScoreConfig, U) -> np.ndarray:
    U = np.atleast_2d(np.asarray(U, dtype=float))
    return (cfg.barycenter(U) - U) / cfg.sigma ** 2


def drgd_step(cfg: ScoreConfig, u) -> np.ndarray:
    """Denoising retraction ``u + sigma^2 s(u)``, i.e. the weighted barycenter."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        return cfg.barycenter(u[None, :])[0]
    return cfg.barycenter(u)
