"""Small Monte Carlo helpers: batch means, autocorrelation, process fan-out."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np


def mean_and_se(x, axis=0):
    """Sample mean and naive standard error along ``axis``."""
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    return x.mean(axis=axis), x.std(axis=axis, ddof=1) / np.sqrt(n)


def batch_means(x, n_batches=20):
    """Mean and batch-means standard error of a correlated series.

    The series is cut into ``n_batches`` contiguous blocks (leftover tail
    dropped) and the SE is computed from the block means.
    """
    x = np.asarray(x, dtype=float)
    m = x.shape[0] // n_batches
    if m < 1:
        raise ValueError(f"series of length {x.shape[0]} is too short for {n_batches} batches")
    blocks = x[: m * n_batches].reshape((n_batches, m) + x.shape[1:]).mean(axis=1)
    return x.mean(axis=0), blocks.std(axis=0, ddof=1) / np.sqrt(n_batches)


def autocorrelation(x, max_lag=None):
    """Normalized autocorrelation function of a 1-d series (FFT based)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if max_lag is None:
        max_lag = n // 2
    y = x - x.mean()
    f = np.fft.rfft(y, 2 * n)
    acov = np.fft.irfft(f * np.conj(f))[: max_lag + 1] / n
    if acov[0] == 0:
        return np.zeros(max_lag + 1)
    return acov / acov[0]


def integrated_autocorrelation_time(x, c=5.0) -> float:
    """``tau = 1 + 2 sum_k rho(k)`` with Sokal's automatic window ``M >= c tau``."""
    rho = autocorrelation(x)
    tau = 1.0
    for m in range(1, rho.size):
        tau = 1 + 2 * rho[1 : m + 1].sum()
        if m >= c * tau:
            break
    return float(max(tau, 1.0))


def parallel_map(fn, items, workers=1):
    """``list(map(fn, items))``, fanned out to processes when ``workers > 1``."""
    items = list(items)
    if workers is None or workers <= 0:
        workers = os.cpu_count() or 1
    if workers == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))
