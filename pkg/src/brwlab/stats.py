"""Estimators and oracles for extinction-time statistics.

The tail of interest is P{s < tau < infinity}: the probability the
process dies, but only after time s. Censored replicas (horizon or
population cap) proxy survival and enter denominators only; both counts
are carried so the bias is auditable.

The linear birth-death chain (rates: up lambda*n, down n) is the
whole-space reduction of the BRW and serves as the exact oracle for
huge-cube runs. Its closed-form extinction CDF is itself validated
against numerical integration of the truncated master equation before
being trusted (see ``master_equation_cdf``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import expm_multiply

from .engine import ExtinctionRecord, ParticleConfiguration, SimulationParams
from .errors import ValidationError


def wilson_interval(k: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """95% Wilson score interval for a binomial proportion."""
    if n == 0:
        return (0.0, 1.0)
    phat = k / n
    denom = 1.0 + z * z / n
    center = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


# ---------------------------------------------------------------------------
# extinction-tail estimation


@dataclass
class TailEstimate:
    s: np.ndarray
    tail: np.ndarray  # P-hat{s < tau < inf}
    lo: np.ndarray
    hi: np.ndarray
    n_total: int
    n_extinct: int
    n_censored_horizon: int
    n_censored_cap: int

    def __len__(self):
        return len(self.s)


def tail_estimate(records: Sequence[ExtinctionRecord], s_grid) -> TailEstimate:
    """Empirical tail of the extinction time over a grid of s values."""
    if len(records) == 0:
        raise ValidationError("tail_estimate needs at least one record")
    s = np.asarray(s_grid, dtype=np.float64)
    taus = np.array([r.tau for r in records if r.extinct])
    n = len(records)
    n_h = sum(1 for r in records if r.outcome == "censored_horizon")
    n_c = sum(1 for r in records if r.outcome == "censored_cap")
    counts = np.array([(taus > si).sum() for si in s], dtype=np.int64)
    tail = counts / n
    lo = np.empty_like(tail)
    hi = np.empty_like(tail)
    for i, k in enumerate(counts):
        lo[i], hi[i] = wilson_interval(int(k), n)
    return TailEstimate(s, tail, lo, hi, n, len(taus), n_h, n_c)


def tail_from_levels(levels: np.ndarray, horizon: int, r_grid) -> TailEstimate:
    """Tail for integer extinction levels, -1 meaning survived the horizon."""
    levels = np.asarray(levels)
    if levels.size == 0:
        raise ValidationError("tail_from_levels needs at least one run")
    r = np.asarray(r_grid, dtype=np.float64)
    finite = levels[levels >= 0].astype(np.float64)
    n = len(levels)
    counts = np.array([(finite > ri).sum() for ri in r], dtype=np.int64)
    tail = counts / n
    lo = np.empty_like(tail)
    hi = np.empty_like(tail)
    for i, k in enumerate(counts):
        lo[i], hi[i] = wilson_interval(int(k), n)
    return TailEstimate(r, tail, lo, hi, n, len(finite), n - len(finite), 0)


@dataclass
class ExpFit:
    q_hat: float
    c_hat: float
    r2: float
    window: tuple[float, float]
    n_points: int
    flagged: bool = False  # slope nonpositive or degenerate input


def fit_exponential(
    tail: TailEstimate,
    tail_floor: float = 1e-3,
    tail_ceil: float = 0.5,
    s_hi: Optional[float] = None,
    min_points: int = 5,
) -> ExpFit:
    """Least squares on (s, log tail) over the window tail in [floor, ceil].

    ``s_hi`` caps the window (pass 3*T_max/4 to stay clear of horizon
    censoring). Raises if fewer than ``min_points`` usable points remain.
    """
    mask = (tail.tail >= tail_floor) & (tail.tail <= tail_ceil)
    if s_hi is not None:
        mask &= tail.s <= s_hi
    s = tail.s[mask]
    y = np.log(tail.tail[mask])
    if len(s) < min_points:
        usable = (float(s.min()), float(s.max())) if len(s) else (math.nan, math.nan)
        raise ValidationError(
            f"exponential fit needs >= {min_points} points in the window, got {len(s)} "
            f"(usable s range {usable})"
        )
    a, b = np.polyfit(s, y, 1)  # y ~ a*s + b
    resid = y - (a * s + b)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 0.0
    flagged = not (a < 0) or ss_tot == 0.0
    return ExpFit(
        q_hat=-float(a),
        c_hat=float(np.exp(b)),
        r2=r2,
        window=(float(s.min()), float(s.max())),
        n_points=int(len(s)),
        flagged=flagged,
    )


# ---------------------------------------------------------------------------
# linear birth-death oracle


def extinction_probability(lam: float) -> float:
    """t -> infinity limit of the extinction CDF: min(1, 1/lambda)."""
    if lam <= 0:
        raise ValidationError("lambda must be > 0")
    return min(1.0, 1.0 / lam)


def extinction_cdf(lam: float, t: float) -> float:
    """P{tau <= t} for the linear birth-death chain started from one particle.

    Closed form for lam != 1; the critical case is the limit t/(1+t).
    Validated against ``master_equation_cdf`` (see tests).
    """
    if lam <= 0:
        raise ValidationError("lambda must be > 0")
    if t < 0:
        raise ValidationError("t must be >= 0")
    if t == 0:
        return 0.0
    if lam == 1.0:
        return t / (1.0 + t)
    g = math.exp((lam - 1.0) * t)
    if math.isinf(g):  # deep subcritical limit already reached
        return 1.0 if lam < 1 else 1.0 / lam
    return (g - 1.0) / (lam * g - 1.0)


def master_equation_cdf(lam: float, t: float, n_states: int = 2000) -> float:
    """Extinction CDF by integrating the truncated master equation.

    States 0..n_states with flows cut at the cap; the probability mass at
    zero after time t is P{tau <= t}. Truncation error is bounded by the
    chance of visiting the cap and later dying, which is astronomically
    small for the lambdas and horizons used here.
    """
    if lam <= 0:
        raise ValidationError("lambda must be > 0")
    n = n_states
    rows, cols, vals = [], [], []
    for k in range(1, n + 1):
        # deaths k -> k-1 at rate k
        rows.append(k - 1)
        cols.append(k)
        vals.append(float(k))
        out = float(k)
        # births k -> k+1 at rate lam*k, cut at the cap
        if k < n:
            rows.append(k + 1)
            cols.append(k)
            vals.append(lam * k)
            out += lam * k
        else:
            out += 0.0
        rows.append(k)
        cols.append(k)
        vals.append(-out)
    q = sparse.csc_matrix((vals, (rows, cols)), shape=(n + 1, n + 1))
    p0 = np.zeros(n + 1)
    p0[1] = 1.0
    pt = expm_multiply(q * t, p0)
    return float(pt[0])


# ---------------------------------------------------------------------------
# subexponential-tail diagnostics


@dataclass
class SubexpDiagnostic:
    q_hat: float  # +inf sentinel for bounded-support samples
    c_hat: float
    r2: float
    theta: np.ndarray
    mgf: np.ndarray
    mgf_stable: np.ndarray  # per-theta half-sample agreement within 5%
    n_samples: int

    @property
    def any_unstable(self) -> bool:
        return not bool(np.all(self.mgf_stable))


def subexp_diagnostics(samples, min_samples: int = 10_000) -> SubexpDiagnostic:
    """Tail-rate fit plus empirical MGF values below the fitted rate.

    Bounded-support samples are detected by the top 0.1% of the sample
    being squeezed against the maximum; they get a +inf rate sentinel.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64))
    n = len(x)
    if n < min_samples:
        raise ValidationError(f"subexp diagnostics need >= {min_samples} samples, got {n}")
    x_max = x[-1]
    x_med = x[n // 2]
    x_q = x[int(n * (1 - 1e-3))]
    spread = x_max - x_med
    bounded = spread <= 0 or (x_max - x_q) / spread < 0.15
    if bounded:
        q_hat, c_hat, r2 = math.inf, math.nan, math.nan
        theta_ref = 1.0 / max(np.mean(x), 1e-300)
    else:
        grid = np.linspace(0.0, x_q, 60)
        tail = np.array([(x > s).sum() / n for s in grid])
        est = TailEstimate(grid, tail, tail, tail, n, n, 0, 0)
        fit = fit_exponential(est, tail_floor=1e-3, tail_ceil=0.5)
        q_hat, c_hat, r2 = fit.q_hat, fit.c_hat, fit.r2
        theta_ref = q_hat
    theta = np.array([0.25, 0.5, 0.75]) * theta_ref
    shuffled = np.random.default_rng(0).permutation(x)  # halves must be exchangeable
    half = n // 2
    mgf = np.array([np.mean(np.exp(th * x)) for th in theta])
    mgf_a = np.array([np.mean(np.exp(th * shuffled[:half])) for th in theta])
    mgf_b = np.array([np.mean(np.exp(th * shuffled[half:])) for th in theta])
    stable = np.abs(mgf_a - mgf_b) / mgf < 0.05
    return SubexpDiagnostic(q_hat, c_hat, r2, theta, mgf, stable, n)


@dataclass
class SumLemmaReport:
    z: np.ndarray
    lhs: np.ndarray  # P{X+Y >= 2z}
    rhs: np.ndarray  # P{X >= z} + P{Y >= z}
    tol: np.ndarray
    ok: bool


def check_sum_lemma(samples_x, samples_y, z_grid) -> SumLemmaReport:
    """Empirical check of P{X+Y >= 2z} <= P{X >= z} + P{Y >= z}.

    Tolerance is 3 combined binomial standard errors at each z.
    """
    x = np.asarray(samples_x, dtype=np.float64)
    y = np.asarray(samples_y, dtype=np.float64)
    if len(x) != len(y):
        raise ValidationError("paired samples must have equal length")
    n = len(x)
    z = np.asarray(z_grid, dtype=np.float64)
    lhs = np.array([(x + y >= 2 * zi).mean() for zi in z])
    px = np.array([(x >= zi).mean() for zi in z])
    py = np.array([(y >= zi).mean() for zi in z])
    rhs = px + py
    se = np.sqrt(
        lhs * (1 - lhs) / n + px * (1 - px) / n + py * (1 - py) / n
    )
    tol = 3.0 * se
    ok = bool(np.all(lhs <= rhs + tol))
    return SumLemmaReport(z, lhs, rhs, tol, ok)


# ---------------------------------------------------------------------------
# survival probes


@dataclass
class SurvivalProbe:
    positions: np.ndarray
    frequency: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    replicas: int

    @property
    def delta_hat(self) -> float:
        """Empirical uniform lower bound over the probed grid."""
        return float(np.min(self.frequency)) if len(self.frequency) else math.nan


def survival_probe(
    params: SimulationParams,
    positions,
    replicas: int,
    threads: int = 1,
) -> SurvivalProbe:
    """Monte Carlo survival frequency from each starting point.

    Survival means not extinct by the horizon (capped runs count as
    surviving). Replica streams are keyed by (seed, position index *
    replicas + replica) so positions do not share randomness.
    """
    dtype = np.int64 if params.domain.is_discrete else np.float64
    pos = np.asarray(positions, dtype=dtype)
    if pos.size == 0:
        return SurvivalProbe(pos.reshape(0, params.domain.dimension),
                             np.array([]), np.array([]), np.array([]), replicas)
    if pos.ndim == 1:
        pos = pos.reshape(-1, params.domain.dimension)
    freq = np.empty(len(pos))
    lo = np.empty(len(pos))
    hi = np.empty(len(pos))
    for i, row in enumerate(pos):
        conf = ParticleConfiguration(row.reshape(1, -1), params.domain)
        recs = _batch_with_offset(params, conf, replicas, i * replicas, threads)
        k = sum(1 for r in recs if not r.extinct)
        freq[i] = k / replicas
        lo[i], hi[i] = wilson_interval(k, replicas)
    return SurvivalProbe(pos, freq, lo, hi, replicas)


def _batch_with_offset(params, conf, replicas, offset, threads):
    """simulate_batch with replica stream indices shifted by ``offset``."""
    from .rng import replica_stream
    from . import _engine_nb as nb
    from .engine import OUTCOME_BY_STATUS, _kernel_tables

    d = params.domain.dimension
    fam, p0, p1 = _kernel_tables(params.kernel)
    hw = params.domain.halfwidth
    discrete = params.domain.is_discrete
    empty_log = (
        np.empty(0, dtype=np.float64),
        np.empty(0, dtype=np.int8),
        np.empty(0, dtype=np.int64),
        np.empty(0, dtype=np.float64),
    )

    def run_range(lo_i, hi_i):
        out = []
        pos = np.empty((params.n_cap, d), dtype=np.int64 if discrete else np.float64)
        for rep in range(lo_i, hi_i):
            gen = replica_stream(params.seed, offset + rep)
            if discrete:
                status, t_end, tau, pop, peak, events = nb.sim_lean_discrete(
                    gen, params.lam, d, int(hw), fam, p0,
                    np.zeros(1), np.zeros((1, 1), dtype=np.int64),
                    conf.positions, params.t_max, params.n_cap, pos, *empty_log,
                )
            else:
                status, t_end, tau, pop, peak, events = nb.sim_lean_continuous(
                    gen, params.lam, d, hw, fam, p0, p1,
                    conf.positions, params.t_max, params.n_cap, pos, *empty_log,
                )
            out.append(ExtinctionRecord(
                offset + rep, params.seed, OUTCOME_BY_STATUS[status], tau, t_end,
                pop, peak, events,
            ))
        return out

    if threads <= 1 or replicas < 4:
        return run_range(0, replicas)
    from concurrent.futures import ThreadPoolExecutor

    chunk = (replicas + threads - 1) // threads
    ranges = [(lo_i, min(lo_i + chunk, replicas)) for lo_i in range(0, replicas, chunk)]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        parts = list(ex.map(lambda r: run_range(*r), ranges))
    merged = []
    for part in parts:
        merged.extend(part)
    return merged
