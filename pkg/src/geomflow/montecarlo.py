"""Monte Carlo plumbing: chunked path execution and estimates.

Estimates carry the sample mean together with its standard error.
Statistics that are nonlinear in sample means get their standard error from
fixed contiguous path blocks, so the reported noise does not depend on
chunk size or thread count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigInvalid, InsufficientSamples

DEFAULT_CHUNK = 16384
DEFAULT_BLOCKS = 64


def thread_count(explicit: Optional[int] = None) -> int:
    """Worker threads to use; GEOMFLOW_THREADS overrides the default of 1."""
    if explicit is not None:
        return max(1, int(explicit))
    raw = os.environ.get("GEOMFLOW_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigInvalid(f"GEOMFLOW_THREADS must be an integer, got {raw!r}")


@dataclass(frozen=True)
class Estimate:
    """Sample mean with standard error. mean/stderr may be vectors."""

    mean: np.ndarray | float
    stderr: np.ndarray | float
    n: int

    @property
    def ci95(self):
        return 1.96 * self.stderr

    @property
    def half_width(self):
        return 3.0 * self.stderr

    def __repr__(self):
        return f"Estimate(mean={self.mean!r}, stderr={self.stderr!r}, n={self.n})"


def estimate_mean(samples: np.ndarray) -> Estimate:
    """Plain mean estimate along axis 0 (scalar or vector samples)."""
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    if n < 2:
        raise InsufficientSamples("need at least two samples for a standard error")
    mean = samples.mean(axis=0)
    stderr = samples.std(axis=0, ddof=1) / math.sqrt(n)
    if samples.ndim == 1:
        return Estimate(float(mean), float(stderr), n)
    return Estimate(mean, stderr, n)


def block_bounds(n: int, n_blocks: int = DEFAULT_BLOCKS) -> list[tuple[int, int]]:
    """Contiguous path-index blocks, fixed by n alone (not by chunking)."""
    n_blocks = min(n_blocks, n)
    edges = np.linspace(0, n, n_blocks + 1).astype(int)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(n_blocks)]


def block_estimate(
    samples: np.ndarray,
    stat_fn: Callable[[np.ndarray], float],
    n_blocks: int = DEFAULT_BLOCKS,
) -> Estimate:
    """Estimate of a statistic nonlinear in the sample mean.

    Value is stat_fn on the full sample; noise is the spread of the
    statistic across contiguous blocks, scaled down by sqrt(blocks).
    """
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    bounds = block_bounds(n, n_blocks)
    if len(bounds) < 2:
        raise InsufficientSamples("need at least two blocks")
    vals = np.asarray([stat_fn(samples[lo:hi]) for lo, hi in bounds], dtype=float)
    full = stat_fn(samples)
    stderr = vals.std(axis=0, ddof=1) / math.sqrt(len(bounds))
    if np.ndim(full) == 0:
        return Estimate(float(full), float(stderr), n)
    return Estimate(np.asarray(full), stderr, n)


def map_paths(
    fn: Callable[[int, int], np.ndarray],
    n_paths: int,
    width: int,
    chunk_size: int = DEFAULT_CHUNK,
    threads: Optional[int] = None,
) -> np.ndarray:
    """Evaluate fn(lo, hi) -> (hi - lo, width) over path-index chunks.

    Results land in a preallocated array by absolute path index, so the
    output is identical for any chunk size or thread count as long as fn
    derives its randomness from the path indices.
    """
    out = np.empty((n_paths, width), dtype=float)
    ranges = [(lo, min(lo + chunk_size, n_paths)) for lo in range(0, n_paths, chunk_size)]
    workers = thread_count(threads)

    def run_one(bounds):
        lo, hi = bounds
        res = np.asarray(fn(lo, hi), dtype=float)
        if res.ndim == 1:
            res = res[:, None]
        out[lo:hi] = res

    if workers == 1 or len(ranges) == 1:
        for b in ranges:
            run_one(b)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_one, ranges))
    return out


def richardson_pair(coarse: Estimate, fine_half_interval: Estimate) -> Estimate:
    """Linear extrapolation 2 * A(delta) - A(2 delta) for interval-size bias.

    fine_half_interval is the estimate at the base interval, coarse the one
    at the doubled interval; errors add in quadrature (the common-noise
    part largely cancels when the two share an ensemble, so this is
    conservative).
    """
    mean = 2.0 * np.asarray(fine_half_interval.mean) - np.asarray(coarse.mean)
    stderr = np.hypot(2.0 * np.asarray(fine_half_interval.stderr), np.asarray(coarse.stderr))
    n = min(coarse.n, fine_half_interval.n)
    if np.ndim(mean) == 0:
        return Estimate(float(mean), float(stderr), n)
    return Estimate(mean, stderr, n)


def energy_distance_pvalue(
    a: np.ndarray,
    b: np.ndarray,
    n_permutations: int = 200,
    rng: Optional[np.random.Generator] = None,
    max_points: int = 2000,
) -> float:
    """Permutation p-value for equality of two sample laws (energy statistic).

    Subsamples to max_points per side to keep the pairwise-distance cost
    bounded; the test is used as a coarse regression guard, not as a sharp
    inferential tool.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[0] == 1:
        a = a.T
    if b.shape[0] == 1:
        b = b.T
    if a.shape[0] > max_points:
        a = a[rng.choice(a.shape[0], max_points, replace=False)]
    if b.shape[0] > max_points:
        b = b[rng.choice(b.shape[0], max_points, replace=False)]
    na, nb = a.shape[0], b.shape[0]
    pooled = np.concatenate([a, b], axis=0)
    dist = np.linalg.norm(pooled[:, None, :] - pooled[None, :, :], axis=2)

    def energy(idx_a, idx_b):
        dab = dist[np.ix_(idx_a, idx_b)].mean()
        daa = dist[np.ix_(idx_a, idx_a)].mean()
        dbb = dist[np.ix_(idx_b, idx_b)].mean()
        return 2.0 * dab - daa - dbb

    base_a = np.arange(na)
    base_b = np.arange(na, na + nb)
    observed = energy(base_a, base_b)
    count = 0
    for _ in range(n_permutations):
        perm = rng.permutation(na + nb)
        if energy(perm[:na], perm[na:]) >= observed:
            count += 1
    return (count + 1.0) / (n_permutations + 1.0)
