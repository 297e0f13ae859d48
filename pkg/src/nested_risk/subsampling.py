"""Random sub-sampling of portfolio terms and stratified allocation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InvalidImportanceError(ValueError):
    pass


class DegenerateAllocationError(ValueError):
    pass


@dataclass(frozen=True)
class IndexSampler:
    probabilities: np.ndarray
    cumulative: np.ndarray
    work_model: np.ndarray

    @classmethod
    def from_probabilities(cls, probabilities, work=None) -> "IndexSampler":
        p = np.asarray(probabilities, dtype=float)
        if np.any(p <= 0):
            raise InvalidImportanceError("all probabilities must be positive")
        p = p / p.sum()
        cdf = np.cumsum(p)
        cdf[-1] = 1.0
        w = np.ones_like(p) if work is None else np.asarray(work, dtype=float)
        return cls(p, cdf, w)

    @property
    def size(self) -> int:
        return len(self.probabilities)

    def expected_work(self) -> float:
        return float(self.probabilities @ self.work_model)


def optimal_probabilities(importance, work) -> IndexSampler:
    """p_i proportional to importance_i / sqrt(work_i)."""
    g = np.asarray(importance, dtype=float)
    w = np.asarray(work, dtype=float)
    if g.shape != w.shape:
        raise ValueError("importance and work must have the same length")
    if np.any(g <= 0) or np.any(w <= 0):
        raise InvalidImportanceError("importance and work must be strictly positive")
    raw = g / np.sqrt(w)
    p = raw / raw.sum()
    cdf = np.cumsum(p)
    cdf[-1] = 1.0
    return IndexSampler(p, cdf, w)


def draw(sampler: IndexSampler, noise, size=None):
    """Inverse-CDF lookup by binary search on the cumulative table."""
    u = noise.uniform(size)
    idx = np.searchsorted(sampler.cumulative, u, side="right")
    return np.minimum(idx, sampler.size - 1)


def subsampled_mean_estimate(sampler: IndexSampler, values: np.ndarray, indices: np.ndarray) -> float:
    """(1/(N P)) * sum_n f_{j_n} / p_{j_n}, given the sampled term values."""
    p = sampler.probabilities[indices]
    return float(np.mean(values / (sampler.size * p)))


@dataclass(frozen=True)
class Allocation:
    samples_per_term: np.ndarray

    def cost(self, work) -> float:
        return float(self.samples_per_term @ np.asarray(work, dtype=float))


def stratified_allocation(sigma_estimates, work, budget: float) -> Allocation:
    """N_i = B * (sigma_i / sqrt(W_i)) / sum_j sigma_j sqrt(W_j), real valued."""
    sig = np.asarray(sigma_estimates, dtype=float)
    w = np.asarray(work, dtype=float)
    if budget <= 0:
        raise ValueError("budget must be positive")
    if np.any(sig < 0) or not np.any(sig > 0):
        raise DegenerateAllocationError("need non-negative sigma estimates with at least one positive")
    if np.any(w <= 0):
        raise ValueError("work must be positive")
    n = budget * (sig / np.sqrt(w)) / np.sum(sig * np.sqrt(w))
    return Allocation(n)


def stratified_mse(sigmas, sigma_estimates, work, budget: float) -> float:
    """Closed-form MSE of the stratified estimator at the optimal allocation."""
    sig = np.asarray(sigmas, dtype=float)
    est = np.asarray(sigma_estimates, dtype=float)
    w = np.sqrt(np.asarray(work, dtype=float))
    return float(np.mean(sig**2 / est * w) * np.mean(est * w) / budget)


def stratified_mse_direct(sigmas, allocation: Allocation) -> float:
    """(1/P^2) * sum_i sigma_i^2 / N_i."""
    sig = np.asarray(sigmas, dtype=float)
    n = allocation.samples_per_term
    return float(np.sum(sig**2 / n) / len(sig) ** 2)


def random_subsampling_mse(means, second_moments, probabilities, n_samples: float) -> float:
    """Exact MSE of the weighted random sub-sampler with independent terms."""
    m = np.asarray(means, dtype=float)
    g2 = np.asarray(second_moments, dtype=float)
    p = np.asarray(probabilities, dtype=float)
    big_p = len(m)
    return float((np.sum(g2 / p) - np.sum(m) ** 2) / (n_samples * big_p**2))
