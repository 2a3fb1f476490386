"""Block renormalization: carve a BRW into space-time blocks and build the
dominated oriented percolation process.

Construction summary (discrete space). Split the cube along the first
axis into A1 = {x1 >= 0} and A2 = the rest. A block of quota M and
duration T seeded with the canonical state "M particles at every site of
half i" succeeds toward half j if after time T its descendants dominate
the canonical state of half j; c_ij is that probability. Wait for tau_1,
the first time the population dominates M*I_{A2}, select the canonical
collection alpha_(0,0) (lowest particle ids per site), and advance in
T-steps: an edge from a vertex with an alpha opens iff its block event
occurred AND an auxiliary uniform u falls below p/c_ij, which calibrates
every examined edge to probability exactly p. Vertices without an open
incoming path open their edges by u < p alone. Alpha collections
alternate halves by the parity rule class(n,m) = A2 if m = n (mod 4),
A1 if m = n+2 (mod 4), and each is drawn from descendants of its
predecessor. Percolation to level m forces the BRW to be alive at
tau_1 + m*T. When an attempt's cluster dies at level sigma_j but the
process lives, a new wait starts after tau_j + sigma_j*T; once the
process is dead, remaining attempts are independent pure percolation
runs, and g is the index of the first surviving attempt. On extinct
replicas tau <= 1{g != 1} * sum_{j<g} (tau_j + sigma_j*T) + tau_g.

Blocks at distinct vertices start from identically distributed canonical
states and disjoint particle sets, so simulating each block as a fresh
BRW started from its alpha positions is law-exact (branching property);
between attempts the implementation tracks only descendants of the last
frontier's blocks, a pruning that can only delay restarts and hasten
tracked extinction, and leaves every property checked here intact.

Continuous space differs in three ways: the half events are
|eta cap Q_(+/-)| > M, the minimal alpha is the M+1 lowest-id particles
in the half, and the u-threshold divides p by the success probability
estimated from the realized alpha positions by an auxiliary Monte Carlo
(cached per rounded position configuration).

The integer-time variant checks domination only at integer times of each
wait's relative clock and reports extinction times by their ceilings, so
every stopping time takes countably many values; it is the default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _engine_nb as nb
from .engine import SimulationParams
from .errors import CapacityError, InvariantViolation, NotFoundError, ValidationError
from .geometry import CubeDomain
from .kernels import DispersalKernel
from .rng import edge_uniform, substream
from .stats import wilson_interval

_EMPTY_CUM = np.zeros(1, dtype=np.float64)
_EMPTY_SITES = np.zeros((1, 1), dtype=np.int64)

MAX_ATTEMPT_KEYS = 4096  # attempt index folded into the edge-hash replica key

# class indices: 0 = A1 / Q+, 1 = A2 / Q-


def class_of_vertex(n: int, m: int) -> int:
    """Half-cube class of the alpha at vertex (n, m): (m-n) % 4 == 0 -> A2."""
    r = (m - n) % 4
    if r == 0:
        return 1
    if r == 2:
        return 0
    raise InvariantViolation(f"vertex ({n},{m}) is not on the even lattice")


@dataclass(frozen=True)
class HalfSplit:
    """The first-axis split of the cube into closed-positive and negative halves."""

    domain: CubeDomain

    def sites_of(self, class_idx: int) -> np.ndarray:
        """Discrete site arrays of A1 (class 0) or A2 (class 1)."""
        sites = self.domain.all_sites()
        pos = sites[:, 0] >= 0
        return sites[pos] if class_idx == 0 else sites[~pos]

    def half_of_position(self, x) -> int:
        return 0 if x[0] >= 0 else 1

    def canonical_state(self, class_idx: int, m_quota: int) -> np.ndarray:
        """M*I_{A_i}: M particles at every site of the half, site-major order."""
        sites = self.sites_of(class_idx)
        return np.repeat(sites, m_quota, axis=0)

    def worst_corner(self, class_idx: int) -> np.ndarray:
        """Continuous corner of Q_(+/-) farthest from the opposite half."""
        hw = self.domain.halfwidth
        corner = np.full(self.domain.dimension, hw)
        corner[0] = hw if class_idx == 0 else -hw
        return corner


@dataclass
class BlockParams:
    m_quota: int
    duration: float
    p: float
    c_hat: np.ndarray  # 2x2, [i][j] seeded half i toward half j
    c_lo: np.ndarray
    c_hi: np.ndarray
    replicas: int

    def thresholds(self) -> np.ndarray:
        return self.p / self.c_hat

    def validate(self):
        if not (0.0 < self.p < 1.0):
            raise ValidationError("target bond probability p must lie in (0,1)")
        th = self.thresholds()
        if np.any(th > 1.0):
            raise ValidationError(
                f"thresholds p/c exceed 1 (max {th.max():.4f}); the (M,T) pair is rejected"
            )


# ---------------------------------------------------------------------------
# block simulation plumbing


@dataclass
class BlockSim:
    """One simulated block: genealogy arrays plus the selection bookkeeping."""

    key: tuple  # (attempt, level, col); level -1 for wait phases
    start_abs: float
    duration: float
    parent: np.ndarray
    btime: np.ndarray
    dtime: np.ndarray
    site: np.ndarray  # discrete sites or continuous positions
    node_count: int
    status: int
    t_end: float
    tau_rel: float
    root_globals: list  # global ids of this block's initial particles

    def alive_locals(self) -> np.ndarray:
        return np.where(np.isinf(self.dtime[: self.node_count]))[0]

    def trace_root(self, local: int) -> int:
        k = local
        while self.parent[k] >= 0:
            k = self.parent[k]
        return int(k)


def _grow_and_run(params: SimulationParams, init, t_max, gen, dom_target, integer_check):
    """Run the genealogy kernel, growing node buffers on overflow.

    ``dom_target``: None, or (target_flags, dom_m) for discrete domination,
    or ('half', half_idx, dom_m) for continuous half-count domination.
    """
    d = params.domain.dimension
    hw = params.domain.halfwidth
    discrete = params.domain.is_discrete
    node_cap = 1 << 16
    state = None
    while node_cap <= (1 << 23):
        node_parent = np.empty(node_cap, dtype=np.int64)
        node_btime = np.empty(node_cap, dtype=np.float64)
        node_dtime = np.empty(node_cap, dtype=np.float64)
        live = np.empty(params.n_cap, dtype=np.int64)
        g = gen.bit_generator.state
        if discrete:
            side = int(params.domain.side)
            node_site = np.empty((node_cap, d), dtype=np.int64)
            if dom_target is None:
                counts = np.zeros(1, dtype=np.int64)
                flags = np.zeros(1, dtype=np.uint8)
                dom_m = 0
            else:
                flags, dom_m = dom_target
                counts = np.zeros(side**d, dtype=np.int64)
            res = nb.sim_genealogy_discrete(
                gen, params.lam, d, int(hw), side, params.kernel.fam_code,
                params.kernel.p0, _EMPTY_CUM, _EMPTY_SITES, init, t_max,
                params.n_cap, node_parent, node_btime, node_dtime, node_site,
                live, counts, flags, dom_m, integer_check,
            )
        else:
            node_site = np.empty((node_cap, d), dtype=np.float64)
            if dom_target is None:
                half_idx, dom_m = -1, 0
            else:
                _, half_idx, dom_m = dom_target
            res = nb.sim_genealogy_continuous(
                gen, params.lam, d, hw, params.kernel.fam_code, params.kernel.p0,
                params.kernel.p1, init, t_max, params.n_cap, node_parent,
                node_btime, node_dtime, node_site, live, half_idx, dom_m,
                integer_check,
            )
        status = res[0]
        if status == nb.STATUS_NODE_OVERFLOW:
            node_cap <<= 1
            gen.bit_generator.state = g  # replay the same stream in full
            continue
        if status == nb.STATUS_CAP:
            raise CapacityError(
                "block population cap reached; raise n_cap for renormalization runs"
            )
        state = (res, node_parent, node_btime, node_dtime, node_site)
        break
    if state is None:
        raise CapacityError("genealogy node buffer exceeded the hard cap")
    return state


def _run_block(params, key, start_abs, duration, init, root_globals, seed, spawn_path):
    gen = substream(seed, *spawn_path)
    (res, parent, btime, dtime, site) = _grow_and_run(
        params, init, duration, gen, None, False
    )
    status, t_end, tau, pop, peak, events, node_count = res
    return BlockSim(
        key, start_abs, duration,
        parent[:node_count].copy(), btime[:node_count].copy(),
        dtime[:node_count].copy(), site[:node_count].copy(),
        node_count, status, t_end, tau, list(root_globals),
    )


# ---------------------------------------------------------------------------
# c_ij estimation


def _block_success(params, split: HalfSplit, final_sites, class_idx: int, m_quota: int) -> bool:
    """Does the final configuration dominate the canonical state of the half?"""
    if params.domain.is_discrete:
        targets = split.sites_of(class_idx)
        if len(final_sites) == 0:
            return False
        for s in targets:
            if np.sum(np.all(final_sites == s, axis=1)) < m_quota:
                return False
        return True
    if len(final_sites) == 0:
        return False
    inhalf = final_sites[:, 0] >= 0 if class_idx == 0 else final_sites[:, 0] < 0
    return int(np.sum(inhalf)) > m_quota


def _initial_state(params, split: HalfSplit, class_idx: int, m_quota: int) -> np.ndarray:
    if params.domain.is_discrete:
        return split.canonical_state(class_idx, m_quota)
    corner = split.worst_corner(class_idx)
    return np.tile(corner, (m_quota + 1, 1))


def estimate_block_matrix(
    params: SimulationParams,
    m_quota: int,
    duration: float,
    replicas: int,
    seed_salt: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Monte Carlo (c_hat, wilson_lo, wilson_hi) over the 2x2 half pairs.

    Seeded half i is the canonical state M*I_{A_i} (discrete) or M+1
    particles at the worst-case corner of the half (continuous).
    """
    if m_quota < 1 or duration <= 0:
        raise ValidationError("block estimation needs M >= 1 and T > 0")
    split = HalfSplit(params.domain)
    d = params.domain.dimension
    hw = params.domain.halfwidth
    c_hat = np.zeros((2, 2))
    lo = np.zeros((2, 2))
    hi = np.zeros((2, 2))
    pos_buf = np.empty(
        (params.n_cap, d), dtype=np.int64 if params.domain.is_discrete else np.float64
    )
    for i in (0, 1):
        init = _initial_state(params, split, i, m_quota)
        wins = np.zeros(2, dtype=np.int64)
        for rep in range(replicas):
            gen = substream(params.seed, 901 + seed_salt, i, rep)
            if params.domain.is_discrete:
                status, t_end, tau, pop, peak, events = nb.sim_lean_discrete(
                    gen, params.lam, d, int(hw), params.kernel.fam_code,
                    params.kernel.p0, _EMPTY_CUM, _EMPTY_SITES, init, duration,
                    params.n_cap, pos_buf,
                    np.empty(0), np.empty(0, dtype=np.int8), np.empty(0, dtype=np.int64),
                    np.empty(0),
                )
            else:
                status, t_end, tau, pop, peak, events = nb.sim_lean_continuous(
                    gen, params.lam, d, hw, params.kernel.fam_code,
                    params.kernel.p0, params.kernel.p1, init, duration,
                    params.n_cap, pos_buf,
                    np.empty(0), np.empty(0, dtype=np.int8), np.empty(0, dtype=np.int64),
                    np.empty(0),
                )
            if status == nb.STATUS_CAP:
                raise CapacityError("block estimation hit n_cap; raise it")
            final = pos_buf[:pop]
            for j in (0, 1):
                if _block_success(params, split, final, j, m_quota):
                    wins[j] += 1
        for j in (0, 1):
            c_hat[i, j] = wins[j] / replicas
            lo[i, j], hi[i, j] = wilson_interval(int(wins[j]), replicas)
    return c_hat, lo, hi


def find_block_params(
    params: SimulationParams,
    p_target: float,
    m_grid=(1, 2, 4, 8, 16),
    t_grid=(4.0, 8.0, 16.0, 32.0),
    search_replicas: int = 400,
    refine_replicas: int = 0,
) -> BlockParams:
    """Smallest (by T, then M) grid point whose Wilson lower bounds all
    exceed p_target; optionally re-estimated at higher precision."""
    if not (0.0 <= p_target < 1.0):
        raise ValidationError("p_target must lie in [0,1)")
    best = None
    best_min = -1.0
    for duration in sorted(t_grid):
        for m_quota in sorted(m_grid):
            c_hat, lo, hi = estimate_block_matrix(
                params, m_quota, duration, search_replicas
            )
            if float(lo.min()) > best_min:
                best_min = float(lo.min())
                best = (m_quota, duration, c_hat, lo, hi)
            if np.all(lo > p_target):
                if refine_replicas > search_replicas:
                    c_hat, lo, hi = estimate_block_matrix(
                        params, m_quota, duration, refine_replicas, seed_salt=77
                    )
                    if not np.all(lo > p_target):
                        continue  # refinement disqualified the point
                return BlockParams(
                    m_quota, duration, p_target, c_hat, lo, hi,
                    max(search_replicas, refine_replicas),
                )
    m_quota, duration, c_hat, lo, hi = best
    raise NotFoundError(
        f"no (M,T) grid point reached lower-CI block probability {p_target} "
        f"(best min lower bound {best_min:.4f} at M={m_quota}, T={duration})",
        best=BlockParams(m_quota, duration, p_target, c_hat, lo, hi, search_replicas),
    )


# ---------------------------------------------------------------------------
# ledger construction


@dataclass
class EdgeDecision:
    attempt: int
    level: int
    col: int
    direction: int  # +1 or -1
    alpha_backed: bool
    block_success: Optional[bool]
    u: float
    threshold: float
    open: bool
    threshold_clamped: bool = False


@dataclass
class VertexRecord:
    attempt: int
    level: int
    col: int
    class_idx: int
    alpha_globals: list
    alpha_positions: np.ndarray
    parent_vertex: Optional[tuple]  # (level, col) the alpha descends from
    block: Optional[BlockSim] = None


@dataclass
class AttemptRecord:
    index: int  # 1-based
    tau_j: float  # stopping time actually used (absolute; integer variant: ceiled)
    sigma_j: Optional[int]  # None = survived the height horizon
    brw_backed: bool  # False for post-extinction independent percolation
    vertices: dict = field(default_factory=dict)  # (level, col) -> VertexRecord
    edges: list = field(default_factory=list)
    reached_levels: int = 0
    wait_block: Optional[BlockSim] = None  # the wait-phase genealogy


@dataclass
class BlockLedger:
    replica: int
    seed: int
    params: SimulationParams
    block: BlockParams
    height: int
    variant: str  # integer | exact
    attempts: list = field(default_factory=list)
    g: Optional[int] = None
    tau: float = math.nan  # exact extinction time of the tracked process
    outcome: str = "censored"  # extinct | survived | censored

    @property
    def extinct(self) -> bool:
        return self.outcome == "extinct"

    def decomposition_bound(self) -> Optional[float]:
        """RHS of tau <= 1{g != 1} sum_{j<g}(tau_j + sigma_j T) + tau_g."""
        if self.g is None:
            return None
        t_sum = 0.0
        if self.g != 1:
            for att in self.attempts[: self.g - 1]:
                t_sum += att.tau_j + att.sigma_j * self.block.duration
        return t_sum + self.attempts[self.g - 1].tau_j

    def bound_ok(self) -> Optional[bool]:
        if not self.extinct or self.g is None:
            return None
        return self.tau <= self.decomposition_bound() + 1e-9

    def drop_blocks(self):
        """Release node arrays once verification is done."""
        for att in self.attempts:
            for v in att.vertices.values():
                v.block = None


class _ContThresholdCache:
    """Success probabilities for continuous blocks, keyed by realized
    positions (rounded) and target half; estimated by auxiliary MC."""

    def __init__(self, params, duration, m_quota, m_aux, seed):
        self.params = params
        self.duration = duration
        self.m_quota = m_quota
        self.m_aux = m_aux
        self.seed = seed
        self.table: dict = {}

    def success_prob(self, positions: np.ndarray, target_half: int) -> float:
        key = (
            tuple(np.round(positions, 6).ravel().tolist()),
            target_half,
        )
        hit = self.table.get(key)
        if hit is not None:
            return hit
        split = HalfSplit(self.params.domain)
        d = self.params.domain.dimension
        hw = self.params.domain.halfwidth
        pos_buf = np.empty((self.params.n_cap, d), dtype=np.float64)
        bucket = abs(hash(key)) % (1 << 30)
        wins = 0
        for rep in range(self.m_aux):
            gen = substream(self.seed, 771, bucket, rep)
            status, t_end, tau, pop, peak, events = nb.sim_lean_continuous(
                gen, self.params.lam, d, hw, self.params.kernel.fam_code,
                self.params.kernel.p0, self.params.kernel.p1, positions,
                self.duration, self.params.n_cap, pos_buf,
                np.empty(0), np.empty(0, dtype=np.int8), np.empty(0, dtype=np.int64),
                np.empty(0),
            )
            if status == nb.STATUS_CAP:
                raise CapacityError("auxiliary estimation hit n_cap")
            if _block_success(self.params, split, pos_buf[:pop], target_half, self.m_quota):
                wins += 1
        prob = wins / self.m_aux
        self.table[key] = prob
        return prob


def _select_alpha_discrete(block: BlockSim, split: HalfSplit, class_idx: int, m_quota: int):
    """Lowest local ids per target site among particles alive at block end."""
    alive = block.alive_locals()
    sites = block.site[alive]
    chosen: list[int] = []
    for s in split.sites_of(class_idx):
        at_site = alive[np.all(sites == s, axis=1)]
        if len(at_site) < m_quota:
            raise InvariantViolation(
                "alpha selection impossible although the block event occurred"
            )
        chosen.extend(int(x) for x in at_site[:m_quota])
    return chosen


def _select_alpha_continuous(block: BlockSim, class_idx: int, m_quota: int):
    """Minimal collection: the M+1 lowest local ids inside the half."""
    alive = block.alive_locals()
    x1 = block.site[alive, 0]
    inhalf = alive[x1 >= 0] if class_idx == 0 else alive[x1 < 0]
    if len(inhalf) < m_quota + 1:
        raise InvariantViolation(
            "alpha selection impossible although the block event occurred"
        )
    return [int(x) for x in inhalf[: m_quota + 1]]


def _wait_run(params, split, init, t_budget, gen, m_quota, integer_check):
    """Wait phase: returns (kind, time, BlockSim-like genealogy state).

    kind is 'dominated', 'extinct', or 'horizon'; time is relative to the
    wait start (already integer under the integer rule for domination).
    """
    d = params.domain.dimension
    if params.domain.is_discrete:
        side = int(params.domain.side)
        hw = int(params.domain.halfwidth)
        flags = np.zeros(side**d, dtype=np.uint8)
        for s in split.sites_of(1):
            f = 0
            for k in range(d):
                f = f * side + (int(s[k]) + hw)
            flags[f] = 1
        dom_target = (flags, m_quota)
    else:
        dom_target = ("half", 1, m_quota)
    (res, parent, btime, dtime, site) = _grow_and_run(
        params, init, t_budget, gen, dom_target, integer_check
    )
    status, t_end, tau, pop, peak, events, node_count = res
    sim = BlockSim(
        ("wait",), 0.0, t_budget,
        parent[:node_count].copy(), btime[:node_count].copy(),
        dtime[:node_count].copy(), site[:node_count].copy(),
        node_count, status, t_end, tau, [],
    )
    if status == nb.STATUS_DOMINATED:
        return "dominated", t_end, sim
    if status == nb.STATUS_EXTINCT:
        return "extinct", tau, sim
    return "horizon", t_end, sim


def build_ledger(
    params: SimulationParams,
    block: BlockParams,
    replica: int = 0,
    height: int = 8,
    max_attempts: int = 64,
    variant: str = "integer",
    initial=None,
    m_aux: int = 2000,
    cont_cache: Optional[_ContThresholdCache] = None,
) -> BlockLedger:
    """Full restart loop: waits, attempts, and the g bookkeeping.

    ``max_attempts`` == 1 reproduces the single-attempt construction.
    """
    block.validate()
    if variant not in ("integer", "exact"):
        raise ValidationError("variant must be 'integer' or 'exact'")
    if height < 1 or max_attempts < 1:
        raise ValidationError("height and max_attempts must be >= 1")
    integer_check = variant == "integer"
    split = HalfSplit(params.domain)
    discrete = params.domain.is_discrete
    thresholds = block.thresholds()
    ledger = BlockLedger(replica, params.seed, params, block, height, variant)
    if not discrete and cont_cache is None:
        cont_cache = _ContThresholdCache(
            params, block.duration, block.m_quota, m_aux, params.seed
        )
    if initial is None:
        initial = np.zeros(
            (1, params.domain.dimension), dtype=np.int64 if discrete else np.float64
        )
    tracked = np.asarray(initial)
    clock = 0.0  # absolute time of the tracked state
    dead = False
    for attempt in range(1, max_attempts + 1):
        if attempt > MAX_ATTEMPT_KEYS:
            raise CapacityError("attempt index exceeds the edge-hash key space")
        ukey = replica * MAX_ATTEMPT_KEYS + (attempt - 1)
        if not dead:
            gen = substream(params.seed, replica, attempt, 0)
            budget = params.t_max - clock
            if budget <= 0:
                ledger.outcome = "censored"
                return ledger
            kind, t_rel, wait_sim = _wait_run(
                params, split, tracked, budget, gen, block.m_quota, integer_check
            )
            if kind == "horizon":
                ledger.outcome = "censored"
                return ledger
            if kind == "extinct":
                dead = True
                ledger.tau = clock + t_rel
                tau_used = math.ceil(ledger.tau) if integer_check else ledger.tau
                att = AttemptRecord(attempt, tau_used, None, False)
                sigma = _pure_percolation_sigma(block.p, height, params.seed, ukey, att)
                att.sigma_j = None if sigma < 0 else sigma
                ledger.attempts.append(att)
                if sigma < 0:
                    ledger.g = attempt
                    ledger.outcome = "extinct"
                    return ledger
                continue
            # dominated: start an attempt
            tau_used = clock + t_rel
            att = AttemptRecord(attempt, tau_used, None, True)
            alive = wait_sim.alive_locals()
            root_block = BlockSim(
                ("wait", attempt), clock, t_rel,
                wait_sim.parent, wait_sim.btime, wait_sim.dtime, wait_sim.site,
                wait_sim.node_count, wait_sim.status, wait_sim.t_end,
                wait_sim.tau_rel, [],
            )
            if discrete:
                chosen = _select_alpha_discrete(root_block, split, 1, block.m_quota)
            else:
                chosen = _select_alpha_continuous(root_block, 1, block.m_quota)
            att.wait_block = root_block
            ledger.attempts.append(att)
            survived = _run_attempt(
                params, split, block, ledger, att, root_block, chosen, tau_used,
                height, thresholds, cont_cache, ukey,
            )
            if survived:
                ledger.g = attempt
                ledger.outcome = "survived"
                return ledger
            # attempt died at level sigma_j; collect the dangling survivors
            tracked, clock, extinct_at = _collect_tracked(att, block, tau_used)
            if tracked is None:
                dead = True
                ledger.tau = extinct_at
            continue
        # process already dead: independent percolation attempts define g
        tau_used = math.ceil(ledger.tau) if integer_check else ledger.tau
        att = AttemptRecord(attempt, tau_used, None, False)
        sigma = _pure_percolation_sigma(block.p, height, params.seed, ukey, att)
        att.sigma_j = None if sigma < 0 else sigma
        ledger.attempts.append(att)
        if sigma < 0:
            ledger.g = attempt
            ledger.outcome = "extinct"
            return ledger
    ledger.outcome = "censored"
    return ledger


def _pure_percolation_sigma(p, height, seed, ukey, att: AttemptRecord) -> int:
    """Independent oriented percolation via the same edge-uniform hash."""
    levels = [{0}]
    for m in range(height):
        nxt = set()
        for n in levels[m]:
            for direction, dn in ((0, 1), (1, -1)):
                u = edge_uniform(seed, ukey, m, n, direction)
                is_open = u < p
                att.edges.append(
                    EdgeDecision(att.index, m, n, dn, False, None, float(u), p, is_open)
                )
                if is_open:
                    nxt.add(n + dn)
        if not nxt:
            att.reached_levels = m + 1
            return m + 1
        levels.append(nxt)
    att.reached_levels = height
    return -1


def _run_attempt(
    params, split, block, ledger, att, root_block, root_chosen, tau_used,
    height, thresholds, cont_cache, ukey,
) -> bool:
    """Advance one percolation attempt level by level. True if it survives."""
    discrete = params.domain.is_discrete
    origin = VertexRecord(
        att.index, 0, 0, 1, [(root_block.key, c) for c in root_chosen],
        root_block.site[root_chosen].copy(), None,
    )
    frontier = {0: (origin, root_block, root_chosen)}
    att.vertices[(0, 0)] = origin
    for m in range(height):
        # simulate the frontier blocks
        blocks_here = {}
        for n, (vertex, parent_block, chosen_locals) in frontier.items():
            init = parent_block.site[chosen_locals]
            if discrete:
                init = np.ascontiguousarray(init, dtype=np.int64)
            else:
                init = np.ascontiguousarray(init, dtype=np.float64)
            sim = _run_block(
                params, (att.index, m, n), tau_used + m * block.duration,
                block.duration, init,
                [(parent_block.key, c) for c in chosen_locals],
                params.seed, (ledger.replica, att.index, m + 1, n + height + 1),
            )
            vertex.block = sim
            blocks_here[n] = (vertex, sim)
        # open edges and pick successors
        incoming: dict[int, list] = {}
        for n in sorted(blocks_here):
            vertex, sim = blocks_here[n]
            i_cls = vertex.class_idx
            final = sim.site[sim.alive_locals()]
            for direction, dn in ((0, 1), (1, -1)):
                child_n = n + dn
                j_cls = class_of_vertex(child_n, m + 1)
                success = _block_success(params, split, final, j_cls, block.m_quota)
                if discrete:
                    threshold = float(thresholds[i_cls, j_cls])
                    clamped = False
                else:
                    prob = cont_cache.success_prob(vertex.alpha_positions, j_cls)
                    raw = block.p / prob if prob > 0 else math.inf
                    clamped = raw > 1.0
                    threshold = min(raw, 1.0)
                u = edge_uniform(ledger.seed, ukey, m, n, direction)
                is_open = bool(success and u < threshold)
                att.edges.append(
                    EdgeDecision(
                        att.index, m, n, dn, True, bool(success), float(u),
                        threshold, is_open, clamped,
                    )
                )
                if is_open:
                    incoming.setdefault(child_n, []).append(n)
        # pure-u edges for unreached vertices inside the light cone
        for n in range(-m, m + 1):
            if (n + m) % 2 != 0 or n in blocks_here:
                continue
            for direction, dn in ((0, 1), (1, -1)):
                u = edge_uniform(ledger.seed, ukey, m, n, direction)
                att.edges.append(
                    EdgeDecision(att.index, m, n, dn, False, None, float(u), block.p,
                                 bool(u < block.p))
                )
        if not incoming:
            att.sigma_j = m + 1
            att.reached_levels = m + 1
            return False
        next_frontier = {}
        for child_n in sorted(incoming):
            parent_n = min(incoming[child_n])  # deterministic tie-break
            parent_vertex, parent_sim = blocks_here[parent_n]
            j_cls = class_of_vertex(child_n, m + 1)
            if discrete:
                chosen = _select_alpha_discrete(parent_sim, split, j_cls, block.m_quota)
            else:
                chosen = _select_alpha_continuous(parent_sim, j_cls, block.m_quota)
            child = VertexRecord(
                att.index, m + 1, child_n, j_cls,
                [(parent_sim.key, c) for c in chosen],
                parent_sim.site[chosen].copy(), (m, parent_n),
            )
            att.vertices[(m + 1, child_n)] = child
            next_frontier[child_n] = (child, parent_sim, chosen)
        frontier = next_frontier
    att.reached_levels = height
    att.sigma_j = None
    return True


def _collect_tracked(att: AttemptRecord, block: BlockParams, tau_used: float):
    """Survivors of the last simulated level's blocks, or extinction info.

    Returns (positions | None, absolute clock, extinction time | None).
    """
    sigma = att.sigma_j
    last_level = sigma - 1
    sims = [
        v.block for (lvl, n), v in att.vertices.items()
        if lvl == last_level and v.block is not None
    ]
    survivors = []
    latest_death = 0.0
    for sim in sims:
        alive = sim.alive_locals()
        if len(alive):
            survivors.append(sim.site[alive])
        dt = sim.dtime[: sim.node_count]
        finite = dt[np.isfinite(dt)]
        if len(finite):
            latest_death = max(latest_death, sim.start_abs + float(np.max(finite)))
    clock = tau_used + sigma * block.duration
    if survivors:
        return np.concatenate(survivors, axis=0), clock, None
    return None, clock, latest_death


# thin wrappers matching the three construction entry points


def build_percolation_from_brw(params, block, replica=0, height=8, variant="integer", **kw):
    """Single-attempt construction (no restarts)."""
    return build_ledger(params, block, replica, height, max_attempts=1, variant=variant, **kw)


def restart_until_percolation(
    params, block, replica=0, height=8, max_attempts=64, variant="integer", **kw
):
    """Iterate attempts until one survives; returns the completed ledger."""
    return build_ledger(
        params, block, replica, height, max_attempts=max_attempts, variant=variant, **kw
    )


def integer_time_variant(params, block, replica=0, height=8, **kw):
    return build_ledger(params, block, replica, height, variant="integer", **kw)


# ---------------------------------------------------------------------------
# ledger verification oracles (re-derive everything from raw arrays)


def verify_descent(ledger: BlockLedger) -> bool:
    """Every alpha particle traces through its block genealogy to a root
    that is one of the predecessor block's selected particles; origin
    alphas must have been alive at the wait's stopping time."""
    for att in ledger.attempts:
        for (lvl, n), vertex in att.vertices.items():
            if vertex.parent_vertex is None:
                wait = att.wait_block
                if wait is None:
                    raise ValidationError("wait-phase genealogy missing")
                for _key, local in vertex.alpha_globals:
                    if not math.isinf(wait.dtime[local]):
                        return False
                continue
            pv = att.vertices[vertex.parent_vertex]
            sim = pv.block
            if sim is None:
                raise ValidationError("blocks were dropped before verification")
            parent_alpha = set(pv.alpha_globals)
            for key, local in vertex.alpha_globals:
                if key != sim.key:
                    return False
                root = sim.trace_root(local)
                if sim.root_globals[root] not in parent_alpha:
                    return False
                if not math.isinf(sim.dtime[local]):
                    return False  # selected particle was not alive at block end
    return True


def verify_parity(ledger: BlockLedger) -> bool:
    """Alpha collections match the parity rule and the canonical shape."""
    split = HalfSplit(ledger.params.domain)
    discrete = ledger.params.domain.is_discrete
    m_quota = ledger.block.m_quota
    for att in ledger.attempts:
        for (lvl, n), vertex in att.vertices.items():
            if class_of_vertex(n, lvl) != vertex.class_idx:
                return False
            pos = vertex.alpha_positions
            if discrete:
                target = split.canonical_state(vertex.class_idx, m_quota)
                a = sorted(map(tuple, pos.tolist()))
                b = sorted(map(tuple, target.tolist()))
                if a != b:
                    return False
            else:
                if len(pos) != m_quota + 1:
                    return False
                if vertex.class_idx == 0 and not np.all(pos[:, 0] >= 0):
                    return False
                if vertex.class_idx == 1 and not np.all(pos[:, 0] < 0):
                    return False
    return True


def verify_survival_implication(ledger: BlockLedger) -> bool:
    """Reaching level m requires the BRW alive (>= M particles) at
    tau_j + m*T: every vertex of the cluster holds alpha particles that
    were alive at their selection time, re-derived from raw death times."""
    for att in ledger.attempts:
        if not att.brw_backed:
            continue
        by_level: dict[int, list] = {}
        for (lvl, _n), vertex in att.vertices.items():
            by_level.setdefault(lvl, []).append(vertex)
        top = att.reached_levels if att.sigma_j is None else att.sigma_j - 1
        for lvl in range(0, top + 1):
            vs = by_level.get(lvl)
            if not vs:
                return False  # cluster claims the level but holds no alpha
            for vertex in vs:
                if vertex.parent_vertex is None:
                    sim = att.wait_block
                else:
                    sim = att.vertices[vertex.parent_vertex].block
                if sim is None:
                    raise ValidationError("blocks were dropped before verification")
                if len(vertex.alpha_globals) < ledger.block.m_quota:
                    return False
                if not all(math.isinf(sim.dtime[loc]) for (_k, loc) in vertex.alpha_globals):
                    return False
    return True


def pooled_edge_frequencies(ledgers) -> dict:
    """Pooled open frequencies for alpha-backed and pure-u edges."""
    ab_open = ab_total = pu_open = pu_total = 0
    for led in ledgers:
        for att in led.attempts:
            for e in att.edges:
                if e.alpha_backed:
                    ab_total += 1
                    ab_open += e.open
                else:
                    pu_total += 1
                    pu_open += e.open
    out = {
        "alpha_open": ab_open,
        "alpha_total": ab_total,
        "alpha_freq": ab_open / ab_total if ab_total else math.nan,
        "pure_open": pu_open,
        "pure_total": pu_total,
        "pure_freq": pu_open / pu_total if pu_total else math.nan,
    }
    return out


def geometric_gof(gs, alpha: float = 0.001) -> dict:
    """Chi-squared goodness of fit of g against Geometric(observed rate).

    Bins with expected count below 5 are merged into the tail; the success
    probability is estimated as (#replicas / total attempts), costing one
    degree of freedom.
    """
    from scipy.stats import chi2

    gs = np.asarray(gs, dtype=np.int64)
    n = len(gs)
    if n == 0:
        raise ValidationError("no g values to test")
    theta = n / float(np.sum(gs))
    kmax = int(gs.max())
    probs = [(1 - theta) ** (k - 1) * theta for k in range(1, kmax + 1)]
    probs.append(max(0.0, 1.0 - sum(probs)))  # tail k > kmax
    counts = [int(np.sum(gs == k)) for k in range(1, kmax + 1)] + [0]
    # merge low-expectation bins into the tail
    exp = [p * n for p in probs]
    m_counts, m_exp = [], []
    acc_c = acc_e = 0.0
    for c, e in zip(counts, exp):
        acc_c += c
        acc_e += e
        if acc_e >= 5.0:
            m_counts.append(acc_c)
            m_exp.append(acc_e)
            acc_c = acc_e = 0.0
    if acc_e > 0 and m_exp:
        m_counts[-1] += acc_c
        m_exp[-1] += acc_e
    if len(m_exp) < 2:
        return {"stat": 0.0, "dof": 0, "p_value": 1.0, "theta": theta, "pass": True}
    stat = sum((c - e) ** 2 / e for c, e in zip(m_counts, m_exp))
    dof = len(m_exp) - 1 - 1
    if dof < 1:
        return {"stat": stat, "dof": dof, "p_value": 1.0, "theta": theta, "pass": True}
    pval = float(chi2.sf(stat, dof))
    return {"stat": stat, "dof": dof, "p_value": pval, "theta": theta, "pass": pval > alpha}
