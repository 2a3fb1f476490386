"""Continuous-to-grid coupling: one mark stream drives both processes.

The continuous BRW runs normally from a single particle at the origin;
the grid process on the dyadic lattice of resolution n starts from the
grid origin, associated to it. On every birth by an associated, alive
continuous parent, one auxiliary uniform decides whether the associated
grid parent births too: the acceptance probability is the ratio of the
cell-infimum density (the grid mass rescaled by 2^(n*d)) to the actual
density at the realized displacement, which the infimum construction
keeps in [0,1]. Paired particles die simultaneously; the association
stays injective; hence |grid| <= |continuous| at every event, and the
grid marginal is exactly the BRW with the grid kernel.

Draw order per event: waiting time, death/birth split, particle pick,
kernel draws, then the acceptance uniform (births of associated parents
only).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .engine import SimulationParams
from .errors import InvariantViolation, ValidationError
from .kernels import FAM_BALL, GridKernel, sample_continuous
from .rng import replica_stream
from .stats import wilson_interval

_ST_EXTINCT = 0
_ST_HORIZON = 1
_ST_CAP = 2
_ST_RATIO = -2  # acceptance ratio above 1: infimum construction violated
_ST_DOMINATION = -3  # grid population exceeded continuous: bug


@njit(cache=True, nogil=True)
def _sim_coupled(
    gen,
    lam,
    d,
    hw,
    fam,
    p0,
    p1,
    dens_norm,
    scale,
    mass_flat,
    tab_w,
    grid_hw,
    t_max,
    n_cap,
    cpos,
    gsite,
    cpartner,
    gpartner,
):
    """Returns (status, t_end, tau_cont, tau_grid, cpop, gpop, peak_c,
    peak_g, events)."""
    cpop = 1
    for k in range(d):
        cpos[0, k] = 0.0
    gpop = 1
    for k in range(d):
        gsite[0, k] = 0
    cpartner[0] = 0
    gpartner[0] = 0
    tab_side = 2 * tab_w + 1
    t = 0.0
    tau_c = np.nan
    tau_g = np.nan
    peak_c = 1
    peak_g = 1
    events = 0
    inv_rate = 1.0 / (1.0 + lam)
    disp = np.empty(d, dtype=np.float64)
    jx = np.empty(d, dtype=np.int64)
    jy = np.empty(d, dtype=np.int64)
    while cpop > 0:
        u = gen.random()
        dt = -math.log1p(-u) / (cpop * (1.0 + lam))
        tn = t + dt
        if tn > t_max:
            return _ST_HORIZON, t_max, tau_c, tau_g, cpop, gpop, peak_c, peak_g, events
        t = tn
        if gen.random() < inv_rate:
            i = int(gen.random() * cpop)
            if i >= cpop:
                i = cpop - 1
            gi = cpartner[i]
            if gi >= 0:  # associated particles die simultaneously
                gpop -= 1
                if gi != gpop:
                    for k in range(d):
                        gsite[gi, k] = gsite[gpop, k]
                    gpartner[gi] = gpartner[gpop]
                    cpartner[gpartner[gi]] = gi
                if gpop == 0 and math.isnan(tau_g):
                    tau_g = t
            cpop -= 1
            if i != cpop:
                for k in range(d):
                    cpos[i, k] = cpos[cpop, k]
                cpartner[i] = cpartner[cpop]
                if cpartner[i] >= 0:
                    gpartner[cpartner[i]] = i
            events += 1
            if cpop == 0:
                tau_c = t
                if gpop != 0:
                    return _ST_DOMINATION, t, tau_c, tau_g, cpop, gpop, peak_c, peak_g, events
                return _ST_EXTINCT, t, tau_c, tau_g, cpop, gpop, peak_c, peak_g, events
        else:
            i = int(gen.random() * cpop)
            if i >= cpop:
                i = cpop - 1
            sample_continuous(fam, p0, p1, d, gen, disp)
            inside = True
            for k in range(d):
                if abs(cpos[i, k] + disp[k]) > hw:
                    inside = False
            associated = cpartner[i] >= 0
            u_acc = gen.random() if associated else 0.0
            if inside:
                nc = cpop
                for k in range(d):
                    cpos[nc, k] = cpos[i, k] + disp[k]
                cpartner[nc] = -1
                cpop += 1
                if cpop > peak_c:
                    peak_c = cpop
                if associated:
                    rsq = 0.0
                    in_table = True
                    flat = 0
                    for k in range(d):
                        rsq += disp[k] * disp[k]
                        jx[k] = int(math.floor(cpos[i, k] * scale + 0.5))
                        jy[k] = int(math.floor(cpos[nc, k] * scale + 0.5))
                        delta = jy[k] - jx[k]
                        if delta > tab_w or delta < -tab_w:
                            in_table = False
                        else:
                            flat = flat * tab_side + (delta + tab_w)
                    mass = mass_flat[flat] if in_table else 0.0
                    if mass > 0.0:
                        if fam == FAM_BALL:
                            dens = dens_norm if rsq <= p0 * p0 else 0.0
                        else:
                            dens = (
                                dens_norm * math.exp(-rsq / (2.0 * p0 * p0))
                                if rsq <= p1 * p1
                                else 0.0
                            )
                        ratio = mass * scale**d / dens if dens > 0.0 else 2.0
                        if ratio > 1.0 + 1e-9:
                            return (
                                _ST_RATIO,
                                t,
                                tau_c,
                                tau_g,
                                cpop,
                                gpop,
                                peak_c,
                                peak_g,
                                events,
                            )
                        if u_acc < ratio:
                            in_grid = True
                            for k in range(d):
                                if jy[k] > grid_hw or jy[k] < -grid_hw:
                                    in_grid = False
                            if in_grid:
                                ng = gpop
                                for k in range(d):
                                    gsite[ng, k] = jy[k]
                                gpartner[ng] = nc
                                cpartner[nc] = ng
                                gpop += 1
                                if gpop > peak_g:
                                    peak_g = gpop
            events += 1
            if gpop > cpop:
                return _ST_DOMINATION, t, tau_c, tau_g, cpop, gpop, peak_c, peak_g, events
            if cpop >= n_cap:
                return _ST_CAP, t, tau_c, tau_g, cpop, gpop, peak_c, peak_g, events
    return _ST_EXTINCT, t, tau_c, tau_g, 0, 0, peak_c, peak_g, events


@dataclass(frozen=True)
class CoupledPairRecord:
    replica: int
    grid_outcome: str
    cont_outcome: str
    tau_grid: float
    tau_cont: float
    max_grid_pop: int
    max_cont_pop: int
    events: int
    domination_ok: bool

    @property
    def grid_survived(self) -> bool:
        return self.grid_outcome != "extinct"

    @property
    def cont_survived(self) -> bool:
        return self.cont_outcome != "extinct"


def run_coupled_spaces(
    params: SimulationParams,
    grid: GridKernel,
    replica: int = 0,
    rng=None,
) -> CoupledPairRecord:
    """One coupled replica: continuous BRW and its dominated grid BRW."""
    if params.kernel.is_discrete:
        raise ValidationError("space coupling needs a continuous kernel")
    d = params.domain.dimension
    mass_table, tab_w = grid.dense_lookup()
    mass_flat = mass_table.ravel()
    grid_hw = grid.side_length * 2 ** (grid.resolution - 1) - 1
    gen = rng if rng is not None else replica_stream(params.seed, replica)
    cap = params.n_cap
    cpos = np.empty((cap, d), dtype=np.float64)
    gsite = np.empty((cap, d), dtype=np.int64)
    cpartner = np.empty(cap, dtype=np.int64)
    gpartner = np.empty(cap, dtype=np.int64)
    status, t_end, tau_c, tau_g, cpop, gpop, peak_c, peak_g, events = _sim_coupled(
        gen,
        params.lam,
        d,
        params.domain.halfwidth,
        params.kernel.fam_code,
        params.kernel.p0,
        params.kernel.p1,
        params.kernel.radial_density(0.0),
        float(1 << grid.resolution),
        mass_flat,
        tab_w,
        grid_hw,
        params.t_max,
        cap,
        cpos,
        gsite,
        cpartner,
        gpartner,
    )
    if status == _ST_RATIO:
        raise InvariantViolation(
            "acceptance ratio exceeded 1: grid mass fails to underestimate the density"
        )
    if status == _ST_DOMINATION:
        raise InvariantViolation("grid population exceeded the continuous population")
    cont_outcome = {_ST_EXTINCT: "extinct", _ST_HORIZON: "censored_horizon", _ST_CAP: "censored_cap"}[
        status
    ]
    if gpop > 0 and cont_outcome == "extinct":  # unreachable given domination
        raise InvariantViolation("grid survived a continuous extinction")
    grid_outcome = "extinct" if gpop == 0 else cont_outcome
    return CoupledPairRecord(
        replica,
        grid_outcome,
        cont_outcome,
        tau_g,
        tau_c,
        peak_g,
        peak_c,
        events,
        True,
    )


def couple_batch(
    params: SimulationParams,
    grid: GridKernel,
    replicas: int,
    threads: int = 1,
) -> list[CoupledPairRecord]:
    """Replica-indexed batch of coupled runs (deterministic merge order)."""
    if replicas < 0:
        raise ValidationError("replicas must be >= 0")

    def run_range(lo, hi):
        return [run_coupled_spaces(params, grid, rep) for rep in range(lo, hi)]

    if threads <= 1 or replicas < 4:
        return run_range(0, replicas)
    from concurrent.futures import ThreadPoolExecutor

    chunk = (replicas + threads - 1) // threads
    ranges = [(lo, min(lo + chunk, replicas)) for lo in range(0, replicas, chunk)]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        parts = list(ex.map(lambda r: run_range(*r), ranges))
    out: list[CoupledPairRecord] = []
    for part in parts:
        out.extend(part)
    return out


@dataclass
class TransferReport:
    replicas: int
    grid_freq: float
    grid_lo: float
    grid_hi: float
    cont_freq: float
    cont_lo: float
    cont_hi: float
    subcritical_grid: bool

    def asdict(self):
        return self.__dict__.copy()


def survival_transfer_report(
    params: SimulationParams,
    grid: GridKernel,
    replicas: int,
    threads: int = 1,
) -> tuple[TransferReport, list[CoupledPairRecord]]:
    """Monte Carlo survival frequencies with Wilson intervals for both
    processes; grid survival can only transfer survival upward."""
    subcritical = params.lam * grid.total_mass <= 1.0
    if subcritical:
        import warnings

        warnings.warn(
            f"grid BRW is subcritical (lambda*mass = {params.lam * grid.total_mass:.4f} <= 1)"
        )
    records = couple_batch(params, grid, replicas, threads)
    if replicas == 0:
        return (
            TransferReport(0, math.nan, 0.0, 1.0, math.nan, 0.0, 1.0, subcritical),
            records,
        )
    kg = sum(r.grid_survived for r in records)
    kc = sum(r.cont_survived for r in records)
    glo, ghi = wilson_interval(kg, replicas)
    clo, chi = wilson_interval(kc, replicas)
    rep = TransferReport(
        replicas, kg / replicas, glo, ghi, kc / replicas, clo, chi, subcritical
    )
    ci = (ghi - glo) + (chi - clo)
    if rep.grid_freq > rep.cont_freq + 2 * ci:
        raise InvariantViolation("grid survival frequency exceeds continuous beyond noise")
    return rep, records


def standalone_grid_batch(
    params: SimulationParams,
    grid: GridKernel,
    replicas: int,
    threads: int = 1,
    seed_offset: int = 1_000_000,
) -> list[bool]:
    """Marginal-law control: the grid BRW run standalone with kernel a_n.

    Births materialize with probability total_mass and land by the grid
    law; outside-grid landings are suppressed. Returns per-replica
    survival flags, stream-indexed after ``seed_offset`` so they are
    independent of the coupled runs.
    """
    from . import _engine_nb as nb

    cum, sites = grid.sampling_tables()
    d = grid.dimension
    grid_hw = grid.side_length * 2 ** (grid.resolution - 1) - 1
    init = np.zeros((1, d), dtype=np.int64)

    def run_range(lo, hi):
        out = []
        pos = np.empty((params.n_cap, d), dtype=np.int64)
        for rep in range(lo, hi):
            gen = replica_stream(params.seed, seed_offset + rep)
            status, *_ = nb.sim_lean_table(
                gen, params.lam, d, grid_hw, cum, sites, init, params.t_max,
                params.n_cap, pos,
            )
            out.append(status != nb.STATUS_EXTINCT)
        return out

    if threads <= 1 or replicas < 4:
        return run_range(0, replicas)
    from concurrent.futures import ThreadPoolExecutor

    chunk = (replicas + threads - 1) // threads
    ranges = [(lo, min(lo + chunk, replicas)) for lo in range(0, replicas, chunk)]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        parts = list(ex.map(lambda r: run_range(*r), ranges))
    out: list[bool] = []
    for part in parts:
        out.extend(part)
    return out
