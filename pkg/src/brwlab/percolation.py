"""Oriented bond percolation on the even lattice {(n,m): n+m even}.

Bonds go from (n,m) up to (n+1,m+1) and (n-1,m+1), each open with
probability p independently. Edge uniforms come from a counter hash of
(seed, replica, m, n, direction) rather than a sequential stream, so the
value attached to an edge is independent of traversal order. Reusing the
same uniforms across p-values makes open sets, reached sets and the
extinction level sigma monotone in p replica by replica.

Only the frontier is sampled (lazy edges), which is equal in law to
sampling the full lattice; ``reachable_levels_bruteforce`` samples the
full diamond with the same hash and must agree exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import numba
from numba import njit, prange, set_num_threads

from .errors import ValidationError
from .rng import edge_uniform
from .stats import TailEstimate, tail_from_levels, wilson_interval

SURVIVED = -1


@njit(cache=True, nogil=True)
def _sigma_one(p, m_max, seed, replica):
    """Extinction level of one run; SURVIVED (-1) if level m_max is reached."""
    width = 2 * m_max + 1
    cur = np.zeros(width, dtype=np.uint8)
    nxt = np.zeros(width, dtype=np.uint8)
    center = m_max
    cur[center] = 1
    lo = center
    hi = center
    for m in range(m_max):
        nlo = width
        nhi = -1
        for k in range(lo, hi + 1):
            if cur[k] == 0:
                continue
            n = k - center
            if edge_uniform(seed, replica, m, n, 0) < p and k + 1 < width:
                nxt[k + 1] = 1
                if k + 1 < nlo:
                    nlo = k + 1
                if k + 1 > nhi:
                    nhi = k + 1
            if edge_uniform(seed, replica, m, n, 1) < p and k - 1 >= 0:
                nxt[k - 1] = 1
                if k - 1 < nlo:
                    nlo = k - 1
                if k - 1 > nhi:
                    nhi = k - 1
        for k in range(lo, hi + 1):
            cur[k] = 0
        if nhi < 0:
            return m + 1
        tmp = cur
        cur = nxt
        nxt = tmp
        lo = nlo
        hi = nhi
    return SURVIVED


@njit(cache=True, parallel=True)
def _sigma_batch(p, m_max, replicas, seed, out):
    for r in prange(replicas):
        out[r] = _sigma_one(p, m_max, seed, r)


@dataclass
class PercolationRun:
    seed: int
    replica: int
    p: float
    sigma: Optional[int]  # None means survived to the horizon
    survived: bool
    reached: Optional[list] = None  # per-level sets of columns, when kept

    @property
    def sigma_or_horizon(self) -> int:
        return SURVIVED if self.survived else int(self.sigma)


def percolate(
    p: float,
    m_max: int,
    seed: int,
    replica: int = 0,
    keep_reached: bool = False,
) -> PercolationRun:
    """Single run by lazy frontier propagation from the origin."""
    if not (0.0 <= p <= 1.0):
        raise ValidationError("bond probability p must lie in [0,1]")
    if m_max < 1:
        raise ValidationError("height m_max must be >= 1")
    if not keep_reached:
        s = int(_sigma_one(p, m_max, seed, replica))
        return PercolationRun(seed, replica, p, None if s == SURVIVED else s, s == SURVIVED)
    levels = [{0}]
    for m in range(m_max):
        nxt = set()
        for n in levels[m]:
            if edge_uniform(seed, replica, m, n, 0) < p:
                nxt.add(n + 1)
            if edge_uniform(seed, replica, m, n, 1) < p:
                nxt.add(n - 1)
        if not nxt:
            return PercolationRun(seed, replica, p, m + 1, False, levels)
        levels.append(nxt)
    return PercolationRun(seed, replica, p, None, True, levels)


def percolate_batch(
    p: float, m_max: int, replicas: int, seed: int, threads: int = 1
) -> np.ndarray:
    """sigma per replica; SURVIVED (-1) marks runs alive at the horizon."""
    if not (0.0 <= p <= 1.0):
        raise ValidationError("bond probability p must lie in [0,1]")
    if replicas < 0:
        raise ValidationError("replicas must be >= 0")
    out = np.empty(max(replicas, 1), dtype=np.int64)
    if replicas == 0:
        return out[:0]
    set_num_threads(min(max(1, threads), numba.config.NUMBA_NUM_THREADS))
    _sigma_batch(p, m_max, replicas, seed, out)
    return out


def reachable_levels_bruteforce(p: float, m_max: int, seed: int, replica: int) -> list:
    """Full-lattice reachability over the diamond |n| <= m, same edge hash.

    Oracle for the frontier propagation: samples every bond in the window,
    then computes reachability level by level from the complete bond field.
    """
    open_bonds = {}
    for m in range(m_max):
        for n in range(-m_max, m_max + 1):
            if (n + m) % 2 != 0:
                continue
            open_bonds[(n, m, 0)] = edge_uniform(seed, replica, m, n, 0) < p
            open_bonds[(n, m, 1)] = edge_uniform(seed, replica, m, n, 1) < p
    levels = [{0}]
    for m in range(m_max):
        nxt = set()
        for n in levels[m]:
            if open_bonds[(n, m, 0)] and n + 1 <= m_max:
                nxt.add(n + 1)
            if open_bonds[(n, m, 1)] and n - 1 >= -m_max:
                nxt.add(n - 1)
        if not nxt:
            break
        levels.append(nxt)
    return levels


def sigma_tail(
    p: float,
    m_max: int,
    replicas: int,
    seed: int,
    r_grid=None,
    threads: int = 1,
) -> TailEstimate:
    """Empirical r -> P{r < sigma < infinity}; survivors are excluded from
    the event but kept in the denominator."""
    if not (0.0 < p < 1.0):
        raise ValidationError("sigma_tail needs p strictly inside (0,1)")
    sig = percolate_batch(p, m_max, replicas, seed, threads)
    if r_grid is None:
        r_grid = np.arange(0, m_max + 1)
    if not np.any(sig >= 0):
        warnings.warn("no finite-sigma runs; tail is identically zero")
    return tail_from_levels(sig, m_max, r_grid)


@dataclass
class SurvivalFrequency:
    p: float
    m_max: int
    replicas: int
    frequency: float
    lo: float
    hi: float


def percolation_probability(
    p: float, m_max: int, replicas: int, seed: int, threads: int = 1
) -> SurvivalFrequency:
    """Frequency of surviving to level m_max, an upper-bounding finite-height
    surrogate for the percolation probability (decreasing in m_max)."""
    sig = percolate_batch(p, m_max, replicas, seed, threads)
    k = int(np.sum(sig == SURVIVED))
    n = len(sig)
    lo, hi = wilson_interval(k, n) if n else (0.0, 1.0)
    return SurvivalFrequency(p, m_max, n, k / n if n else 0.0, lo, hi)
