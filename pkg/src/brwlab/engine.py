"""Event-driven BRW simulation on a cube.

Dynamics: while the population is n, the next event arrives after an
Exp(n(1+lambda)) wait; it is a death of a uniformly chosen particle with
probability 1/(1+lambda), otherwise a uniformly chosen parent spawns an
offspring displaced by the dispersal kernel, suppressed instantly if it
lands outside the cube. This aggregate-rate scheduling is equal in law
to per-particle exponential clocks and costs O(1) per event.

Two implementations share one stream contract (identical draw order, all
randomness via ``Generator.random()``): a jitted lean path for bulk
replica runs, and a Python reference path that records the genealogy and
an event log. ``test_engine.py`` asserts the two produce identical event
sequences from the same seed.

Censoring: a replica alive at the horizon is ``censored_horizon``; one
that reaches the population cap is ``censored_cap``. Both count as
surviving in tail estimation, so tails are biased upward only within the
last quarter of the horizon, and fit windows must end before that.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _engine_nb as nb
from .errors import InvariantViolation, ValidationError
from .geometry import CubeDomain
from .kernels import DispersalKernel
from .rng import replica_stream

OUTCOME_BY_STATUS = {
    nb.STATUS_EXTINCT: "extinct",
    nb.STATUS_HORIZON: "censored_horizon",
    nb.STATUS_CAP: "censored_cap",
}

EVENT_DEATH = "death"
EVENT_BIRTH = "birth"
EVENT_SUPPRESSED = "suppressed"

_KIND_BY_LOG = {nb.LOG_DEATH: EVENT_DEATH, nb.LOG_BIRTH: EVENT_BIRTH, nb.LOG_SUPPRESSED: EVENT_SUPPRESSED}

_EMPTY_CUM = np.zeros(1, dtype=np.float64)
_EMPTY_SITES = np.zeros((1, 1), dtype=np.int64)


@dataclass(frozen=True)
class SimulationParams:
    lam: float
    kernel: DispersalKernel
    domain: CubeDomain
    t_max: float = 100.0
    n_cap: int = 1_000_000
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValidationError("branching rate lambda must be >= 0")
        if self.t_max <= 0:
            raise ValidationError("t_max must be > 0")
        if self.n_cap < 1:
            raise ValidationError("n_cap must be >= 1")
        if self.kernel.dimension != self.domain.dimension:
            raise ValidationError("kernel and domain dimensions differ")
        if self.kernel.is_discrete != self.domain.is_discrete:
            raise ValidationError("kernel and domain must agree on discrete vs continuous space")


class ParticleConfiguration:
    """Finite particle collection inside the cube, with stable ids."""

    def __init__(self, positions, domain: CubeDomain):
        dtype = np.int64 if domain.is_discrete else np.float64
        arr = np.asarray(positions, dtype=dtype)
        if arr.size == 0:
            arr = arr.reshape(0, domain.dimension)
        if arr.ndim != 2 or arr.shape[1] != domain.dimension:
            raise ValidationError("positions must have shape (m, d)")
        for row in arr:
            if not domain.contains(row):
                raise ValidationError(f"initial position {row.tolist()} lies outside the cube")
        self.positions = arr
        self.domain = domain

    @classmethod
    def single_at_origin(cls, domain: CubeDomain) -> "ParticleConfiguration":
        z = np.zeros((1, domain.dimension))
        return cls(z, domain)

    @classmethod
    def empty(cls, domain: CubeDomain) -> "ParticleConfiguration":
        return cls(np.zeros((0, domain.dimension)), domain)

    def __len__(self) -> int:
        return len(self.positions)

    def site_counts(self) -> dict:
        """Discrete only: site tuple -> particle count."""
        out: dict = {}
        for row in self.positions:
            key = tuple(int(c) for c in row)
            out[key] = out.get(key, 0) + 1
        return out


@dataclass
class GenealogyNode:
    """One particle of the genealogical tree.

    The paper-style clock marks are materialized lazily: the displacement
    mark is ``position - parent position``, and clock values are whatever
    the recorded event times reveal (a segment ending in a birth exposes
    its birth-clock value, one ending in death exposes the death clock).
    """

    id: int
    parent: Optional[int]
    birth_time: float
    position: np.ndarray
    death_time: float = math.inf
    fate: str = "alive"  # alive | died | suppressed_at_birth

    @property
    def lifetime(self) -> float:
        return self.death_time - self.birth_time


class Genealogy:
    def __init__(self, dimension: int):
        self.dimension = dimension
        self.nodes: list[GenealogyNode] = []

    def add_root(self, position, t: float = 0.0) -> int:
        nid = len(self.nodes)
        self.nodes.append(GenealogyNode(nid, None, t, np.array(position)))
        return nid

    def add_child(self, parent: int, t: float, position, suppressed: bool) -> int:
        nid = len(self.nodes)
        node = GenealogyNode(nid, parent, t, np.array(position))
        if suppressed:
            node.death_time = t
            node.fate = "suppressed_at_birth"
        self.nodes.append(node)
        return nid

    def kill(self, nid: int, t: float):
        self.nodes[nid].death_time = t
        self.nodes[nid].fate = "died"

    def displacement(self, nid: int) -> np.ndarray:
        node = self.nodes[nid]
        if node.parent is None:
            raise ValidationError("root nodes carry no displacement mark")
        return node.position - self.nodes[node.parent].position

    def alive_at(self, t: float) -> list[int]:
        return [n.id for n in self.nodes if n.birth_time <= t < n.death_time]

    def root_of(self, nid: int) -> int:
        node = self.nodes[nid]
        while node.parent is not None:
            node = self.nodes[node.parent]
        return node.id

    def is_descendant(self, nid: int, ancestors: set) -> bool:
        """True if nid is one of ``ancestors`` or descends from one."""
        node = self.nodes[nid]
        while True:
            if node.id in ancestors:
                return True
            if node.parent is None:
                return False
            node = self.nodes[node.parent]

    def segment_marks(self, nid: int) -> list[tuple]:
        """Reconstructed clock marks: (kind, value) per segment of the particle.

        Segments are delimited by the particle's own birth events (clocks
        reset after each birth); the closing segment reveals a death-clock
        value if the particle died, nothing if censored.
        """
        node = self.nodes[nid]
        child_times = sorted(
            c.birth_time for c in self.nodes if c.parent == nid
        )
        marks = []
        t0 = node.birth_time
        for ct in child_times:
            marks.append(("birth_clock", ct - t0))
            t0 = ct
        if node.fate == "died":
            marks.append(("death_clock", node.death_time - t0))
        return marks

    def dump_jsonl(self, path):
        with open(path, "w") as fh:
            for n in self.nodes:
                rec = {
                    "id": n.id,
                    "parent": n.parent,
                    "t_birth": n.birth_time,
                    "fate": n.fate,
                    "t_death": None if math.isinf(n.death_time) else n.death_time,
                    "pos": [float(c) for c in n.position],
                }
                fh.write(json.dumps(rec) + "\n")


@dataclass(frozen=True)
class ExtinctionRecord:
    replica: int
    seed: int
    outcome: str  # extinct | censored_horizon | censored_cap
    tau: float  # nan unless extinct
    t_end: float
    final_pop: int
    peak_pop: int
    events: int
    wall_time: float = field(default=0.0, compare=False)

    @property
    def extinct(self) -> bool:
        return self.outcome == "extinct"


@dataclass
class RunResult:
    record: ExtinctionRecord
    genealogy: Optional[Genealogy] = None
    events: Optional[list] = None  # (t, kind, idx, x0) tuples
    final_positions: Optional[np.ndarray] = None


def _kernel_tables(kernel: DispersalKernel):
    return kernel.fam_code, kernel.p0, kernel.p1


def run(
    params: SimulationParams,
    initial: ParticleConfiguration,
    replica: int = 0,
    record_genealogy: bool = False,
    record_events: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> RunResult:
    """One replica. Uses the jitted path unless recording was requested."""
    if initial.domain.dimension != params.domain.dimension:
        raise ValidationError("initial configuration domain mismatch")
    gen = rng if rng is not None else replica_stream(params.seed, replica)
    if len(initial) == 0:
        rec = ExtinctionRecord(replica, params.seed, "extinct", 0.0, 0.0, 0, 0, 0)
        gene = Genealogy(params.domain.dimension) if record_genealogy else None
        return RunResult(rec, gene, [] if record_events else None,
                         initial.positions.copy())
    if record_genealogy or record_events:
        return run_reference(params, initial, replica, gen,
                             record_events=record_events)
    return _run_lean(params, initial, replica, gen)


def _run_lean(params, initial, replica, gen, log_cap: int = 0):
    d = params.domain.dimension
    fam, p0, p1 = _kernel_tables(params.kernel)
    hw = params.domain.halfwidth
    t0 = time.perf_counter()
    log_t = np.empty(log_cap, dtype=np.float64)
    log_kind = np.empty(log_cap, dtype=np.int8)
    log_idx = np.empty(log_cap, dtype=np.int64)
    log_x = np.empty(log_cap, dtype=np.float64)
    if params.domain.is_discrete:
        pos = np.empty((params.n_cap, d), dtype=np.int64)
        status, t_end, tau, pop, peak, events = nb.sim_lean_discrete(
            gen, params.lam, d, int(hw), fam, p0, _EMPTY_CUM, _EMPTY_SITES,
            initial.positions, params.t_max, params.n_cap, pos,
            log_t, log_kind, log_idx, log_x,
        )
    else:
        pos = np.empty((params.n_cap, d), dtype=np.float64)
        status, t_end, tau, pop, peak, events = nb.sim_lean_continuous(
            gen, params.lam, d, hw, fam, p0, p1,
            initial.positions, params.t_max, params.n_cap, pos,
            log_t, log_kind, log_idx, log_x,
        )
    if status == nb.STATUS_LOG_OVERFLOW:
        raise InvariantViolation("event log buffer overflow; raise log_cap")
    wall = time.perf_counter() - t0
    rec = ExtinctionRecord(
        replica, params.seed, OUTCOME_BY_STATUS[status], tau, t_end, pop, peak, events, wall
    )
    events_list = None
    if log_cap:
        events_list = [
            (float(log_t[i]), _KIND_BY_LOG[int(log_kind[i])], int(log_idx[i]), float(log_x[i]))
            for i in range(events)
        ]
    return RunResult(rec, None, events_list, pos[:pop].copy())


def run_reference(
    params: SimulationParams,
    initial: ParticleConfiguration,
    replica: int = 0,
    rng: Optional[np.random.Generator] = None,
    record_events: bool = False,
) -> RunResult:
    """Pure-Python engine with full genealogy; stream-identical to the
    jitted path."""
    gen = rng if rng is not None else replica_stream(params.seed, replica)
    d = params.domain.dimension
    hw = params.domain.halfwidth
    lam = params.lam
    kernel = params.kernel
    inv_rate = 1.0 / (1.0 + lam)
    gene = Genealogy(d)
    live: list[int] = []
    for row in initial.positions:
        live.append(gene.add_root(row))
    events_log: list = [] if record_events else None
    t = 0.0
    tau = math.nan
    peak = len(live)
    events = 0
    outcome = None
    t0 = time.perf_counter()
    while live:
        pop = len(live)
        u = gen.random()
        tn = t + (-math.log1p(-u) / (pop * (1.0 + lam)))
        if tn > params.t_max:
            outcome = "censored_horizon"
            t = params.t_max
            break
        t = tn
        if gen.random() < inv_rate:
            i = int(gen.random() * pop)
            i = min(i, pop - 1)
            nid = live[i]
            gene.kill(nid, t)
            if record_events:
                events_log.append((t, EVENT_DEATH, i, float(gene.nodes[nid].position[0])))
            live[i] = live[-1]
            live.pop()
            events += 1
            if not live:
                tau = t
                outcome = "extinct"
                break
        else:
            i = int(gen.random() * pop)
            i = min(i, pop - 1)
            parent = live[i]
            disp = kernel.sample(gen)
            child_pos = gene.nodes[parent].position + disp
            inside = bool(np.all(np.abs(child_pos) <= hw))
            nid = gene.add_child(parent, t, child_pos, suppressed=not inside)
            if inside:
                live.append(nid)
                peak = max(peak, len(live))
            if record_events:
                events_log.append(
                    (t, EVENT_BIRTH if inside else EVENT_SUPPRESSED, i, float(child_pos[0]))
                )
            events += 1
            if len(live) >= params.n_cap:
                outcome = "censored_cap"
                break
    if outcome is None:  # initial configuration was empty
        outcome = "extinct"
        tau = 0.0
    wall = time.perf_counter() - t0
    rec = ExtinctionRecord(
        replica, params.seed, outcome, tau, t if outcome != "extinct" else tau,
        len(live), peak, events, wall,
    )
    final = np.array([gene.nodes[n].position for n in live]).reshape(len(live), d)
    return RunResult(rec, gene, events_log, final)


def simulate_batch(
    params: SimulationParams,
    initial: ParticleConfiguration,
    replicas: int,
    threads: int = 1,
) -> list[ExtinctionRecord]:
    """Independent replicas, merged in replica order.

    Replica i draws from the stream keyed (params.seed, i); results do not
    depend on the thread count.
    """
    if replicas < 0:
        raise ValidationError("replicas must be >= 0")
    if replicas == 0:
        return []
    d = params.domain.dimension
    fam, p0, p1 = _kernel_tables(params.kernel)
    hw = params.domain.halfwidth
    discrete = params.domain.is_discrete
    init = initial.positions
    empty_log = (
        np.empty(0, dtype=np.float64),
        np.empty(0, dtype=np.int8),
        np.empty(0, dtype=np.int64),
        np.empty(0, dtype=np.float64),
    )

    def run_range(lo: int, hi: int) -> list[ExtinctionRecord]:
        out = []
        pos = np.empty((params.n_cap, d), dtype=np.int64 if discrete else np.float64)
        for rep in range(lo, hi):
            gen = replica_stream(params.seed, rep)
            t0 = time.perf_counter()
            if len(init) == 0:
                out.append(ExtinctionRecord(rep, params.seed, "extinct", 0.0, 0.0, 0, 0, 0))
                continue
            if discrete:
                status, t_end, tau, pop, peak, events = nb.sim_lean_discrete(
                    gen, params.lam, d, int(hw), fam, p0, _EMPTY_CUM, _EMPTY_SITES,
                    init, params.t_max, params.n_cap, pos, *empty_log,
                )
            else:
                status, t_end, tau, pop, peak, events = nb.sim_lean_continuous(
                    gen, params.lam, d, hw, fam, p0, p1,
                    init, params.t_max, params.n_cap, pos, *empty_log,
                )
            wall = time.perf_counter() - t0
            out.append(
                ExtinctionRecord(
                    rep, params.seed, OUTCOME_BY_STATUS[status], tau, t_end, pop, peak,
                    events, wall,
                )
            )
        return out

    if threads <= 1 or replicas < 4:
        return run_range(0, replicas)
    from concurrent.futures import ThreadPoolExecutor

    chunk = (replicas + threads - 1) // threads
    ranges = [(lo, min(lo + chunk, replicas)) for lo in range(0, replicas, chunk)]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        parts = list(ex.map(lambda r: run_range(*r), ranges))
    merged: list[ExtinctionRecord] = []
    for part in parts:
        merged.extend(part)
    return merged


# ---------------------------------------------------------------------------
# monotone coupling and restarts


@dataclass
class CoupledRunResult:
    record_small: ExtinctionRecord
    record_big: ExtinctionRecord
    times: list
    pop_small: list
    pop_big: list
    containment_ok: bool
    genealogy: Genealogy


def run_coupled(
    params: SimulationParams,
    initial_small: ParticleConfiguration,
    initial_big: ParticleConfiguration,
    replica: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> CoupledRunResult:
    """Monotone coupling: one mark source drives both processes.

    The big process runs normally; the small one is its restriction to
    descendants of the sub-configuration. Containment is asserted at every
    event and a violation raises (it would be a bug, not noise).
    """
    small_idx = _match_subconfiguration(initial_small, initial_big)
    res = run_reference(params, initial_big, replica, rng, record_events=True)
    gene = res.genealogy
    m0 = len(initial_big)
    # root node ids coincide with initial indices; replay the engine's
    # live-array dynamics (append on birth, swap-remove on death) so slot
    # indices in the event log resolve to node ids exactly
    live: list[int] = list(range(m0))
    is_small = [i in set(small_idx) for i in range(m0)]
    alive_big = set(range(m0))
    alive_small = {i for i in range(m0) if is_small[i]}
    times = [0.0]
    pop_small = [len(alive_small)]
    pop_big = [len(alive_big)]
    next_new = m0
    small_tau = 0.0 if not alive_small else math.nan
    for step, (t, kind, idx, _x) in enumerate(res.events):
        if kind == EVENT_DEATH:
            nid = live[idx]
            live[idx] = live[-1]
            live.pop()
            alive_big.discard(nid)
            alive_small.discard(nid)
        elif kind == EVENT_BIRTH:
            nid = next_new
            next_new += 1
            parent = gene.nodes[nid].parent
            sm = is_small[parent]
            is_small.append(sm)
            live.append(nid)
            alive_big.add(nid)
            if sm:
                alive_small.add(nid)
        else:  # suppressed birth consumes a node id but never lives
            is_small.append(is_small[gene.nodes[next_new].parent])
            next_new += 1
        if len(alive_small) > len(alive_big) or (
            step % 64 == 0 and not alive_small.issubset(alive_big)
        ):
            raise InvariantViolation("coupling containment violated")
        times.append(t)
        pop_small.append(len(alive_small))
        pop_big.append(len(alive_big))
        if not alive_small and math.isnan(small_tau):
            small_tau = t
    if not alive_small.issubset(alive_big):
        raise InvariantViolation("coupling containment violated")
    if alive_small:
        small_outcome = res.record.outcome if res.record.outcome != "extinct" else "censored_horizon"
        small_tau_val = math.nan
        small_t_end = res.record.t_end
    else:
        small_outcome = "extinct"
        small_tau_val = small_tau
        small_t_end = small_tau
    rec_small = ExtinctionRecord(
        replica, params.seed, small_outcome, small_tau_val, small_t_end,
        len(alive_small), max(pop_small), res.record.events,
    )
    return CoupledRunResult(
        rec_small, res.record, times, pop_small, pop_big, True, gene
    )


def _match_subconfiguration(small: ParticleConfiguration, big: ParticleConfiguration) -> list[int]:
    """Indices in ``big`` matching each particle of ``small`` injectively."""
    used = np.zeros(len(big), dtype=bool)
    out = []
    for row in small.positions:
        found = -1
        for j in range(len(big)):
            if not used[j] and np.array_equal(big.positions[j], row):
                found = j
                break
        if found < 0:
            raise ValidationError("initial_small is not a sub-configuration of initial_big")
        used[found] = True
        out.append(found)
    return out


def run_from(
    genealogy: Genealogy,
    ids,
    at_time: float,
    params: SimulationParams,
    replica: int = 0,
    rng: Optional[np.random.Generator] = None,
    record_genealogy: bool = False,
) -> RunResult:
    """Restart from a subset of particles alive at ``at_time``, fresh marks."""
    positions = []
    for nid in ids:
        if nid < 0 or nid >= len(genealogy.nodes):
            raise ValidationError(f"unknown particle id {nid}")
        node = genealogy.nodes[nid]
        if not (node.birth_time <= at_time < node.death_time):
            raise ValidationError(f"particle {nid} is not alive at time {at_time}")
        positions.append(node.position)
    arr = np.array(positions).reshape(len(positions), params.domain.dimension)
    conf = ParticleConfiguration(arr, params.domain)
    return run(params, conf, replica, record_genealogy=record_genealogy, rng=rng)
