"""Jitted event loops.

All loops implement the same dynamics with the same draw order, so they
are stream-compatible with the Python reference engine in ``engine.py``:

    per event: u for the waiting time, u for the death/birth split,
    u for the uniform particle pick, then the kernel's own draws
    (births only).

The uniform particle pick indexes the live array directly (single draw);
the live array is insertion-ordered with swap-remove on deaths. That
ordering is part of the determinism contract.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .kernels import sample_continuous, sample_discrete

STATUS_EXTINCT = 0
STATUS_HORIZON = 1
STATUS_CAP = 2
STATUS_NODE_OVERFLOW = 3
STATUS_DOMINATED = 4
STATUS_LOG_OVERFLOW = 5

LOG_DEATH = 0
LOG_BIRTH = 1
LOG_SUPPRESSED = 2


@njit(cache=True, nogil=True)
def sim_lean_discrete(
    gen,
    lam,
    d,
    hw,
    fam,
    p0,
    tab_cum,
    tab_sites,
    init,
    t_max,
    n_cap,
    pos,
    log_t,
    log_kind,
    log_idx,
    log_x,
):
    """Discrete-space run without genealogy. ``pos`` is an (n_cap, d) buffer.

    Returns (status, t_end, tau, pop, peak, events).
    """
    pop = init.shape[0]
    for i in range(pop):
        for k in range(d):
            pos[i, k] = init[i, k]
    log_cap = log_t.shape[0]
    disp = np.empty(d, dtype=np.int64)
    t = 0.0
    tau = np.nan
    peak = pop
    events = 0
    inv_rate = 1.0 / (1.0 + lam)
    while pop > 0:
        u = gen.random()
        dt = -math.log1p(-u) / (pop * (1.0 + lam))
        tn = t + dt
        if tn > t_max:
            return STATUS_HORIZON, t_max, tau, pop, peak, events
        t = tn
        if log_cap > 0 and events >= log_cap:
            return STATUS_LOG_OVERFLOW, t, tau, pop, peak, events
        if gen.random() < inv_rate:
            i = int(gen.random() * pop)
            if i >= pop:
                i = pop - 1
            if log_cap > 0:
                log_t[events] = t
                log_kind[events] = LOG_DEATH
                log_idx[events] = i
                log_x[events] = pos[i, 0]
            pop -= 1
            for k in range(d):
                pos[i, k] = pos[pop, k]
            events += 1
            if pop == 0:
                tau = t
                return STATUS_EXTINCT, t, tau, pop, peak, events
        else:
            i = int(gen.random() * pop)
            if i >= pop:
                i = pop - 1
            sample_discrete(fam, p0, d, gen, tab_cum, tab_sites, disp)
            inside = True
            for k in range(d):
                disp[k] += pos[i, k]
                if disp[k] > hw or disp[k] < -hw:
                    inside = False
            if inside:
                for k in range(d):
                    pos[pop, k] = disp[k]
                pop += 1
                if pop > peak:
                    peak = pop
            if log_cap > 0:
                log_t[events] = t
                log_kind[events] = LOG_BIRTH if inside else LOG_SUPPRESSED
                log_idx[events] = i
                log_x[events] = disp[0]
            events += 1
            if pop >= n_cap:
                return STATUS_CAP, t, tau, pop, peak, events
    tau = 0.0
    return STATUS_EXTINCT, 0.0, tau, 0, peak, 0


@njit(cache=True, nogil=True)
def sim_lean_table(
    gen,
    lam,
    d,
    hw,
    tab_cum,
    tab_sites,
    init,
    t_max,
    n_cap,
    pos,
):
    """Discrete run with a table kernel of total mass <= 1 (thinned births)."""
    pop = init.shape[0]
    for i in range(pop):
        for k in range(d):
            pos[i, k] = init[i, k]
    disp = np.empty(d, dtype=np.int64)
    t = 0.0
    tau = np.nan
    peak = pop
    events = 0
    inv_rate = 1.0 / (1.0 + lam)
    while pop > 0:
        u = gen.random()
        dt = -math.log1p(-u) / (pop * (1.0 + lam))
        tn = t + dt
        if tn > t_max:
            return STATUS_HORIZON, t_max, tau, pop, peak, events
        t = tn
        if gen.random() < inv_rate:
            i = int(gen.random() * pop)
            if i >= pop:
                i = pop - 1
            pop -= 1
            for k in range(d):
                pos[i, k] = pos[pop, k]
            events += 1
            if pop == 0:
                tau = t
                return STATUS_EXTINCT, t, tau, pop, peak, events
        else:
            i = int(gen.random() * pop)
            if i >= pop:
                i = pop - 1
            got = sample_discrete(5, 0.0, d, gen, tab_cum, tab_sites, disp)
            if got == 1:
                inside = True
                for k in range(d):
                    disp[k] += pos[i, k]
                    if disp[k] > hw or disp[k] < -hw:
                        inside = False
                if inside:
                    for k in range(d):
                        pos[pop, k] = disp[k]
                    pop += 1
                    if pop > peak:
                        peak = pop
            events += 1
            if pop >= n_cap:
                return STATUS_CAP, t, tau, pop, peak, events
    tau = 0.0
    return STATUS_EXTINCT, 0.0, tau, 0, peak, 0


@njit(cache=True, nogil=True)
def sim_lean_continuous(
    gen,
    lam,
    d,
    hw,
    fam,
    p0,
    p1,
    init,
    t_max,
    n_cap,
    pos,
    log_t,
    log_kind,
    log_idx,
    log_x,
):
    """Continuous-space run without genealogy. ``pos`` is (n_cap, d) float64."""
    pop = init.shape[0]
    for i in range(pop):
        for k in range(d):
            pos[i, k] = init[i, k]
    log_cap = log_t.shape[0]
    disp = np.empty(d, dtype=np.float64)
    t = 0.0
    tau = np.nan
    peak = pop
    events = 0
    inv_rate = 1.0 / (1.0 + lam)
    while pop > 0:
        u = gen.random()
        dt = -math.log1p(-u) / (pop * (1.0 + lam))
        tn = t + dt
        if tn > t_max:
            return STATUS_HORIZON, t_max, tau, pop, peak, events
        t = tn
        if log_cap > 0 and events >= log_cap:
            return STATUS_LOG_OVERFLOW, t, tau, pop, peak, events
        if gen.random() < inv_rate:
            i = int(gen.random() * pop)
            if i >= pop:
                i = pop - 1
            if log_cap > 0:
                log_t[events] = t
                log_kind[events] = LOG_DEATH
                log_idx[events] = i
                log_x[events] = pos[i, 0]
            pop -= 1
            for k in range(d):
                pos[i, k] = pos[pop, k]
            events += 1
            if pop == 0:
                tau = t
                return STATUS_EXTINCT, t, tau, pop, peak, events
        else:
            i = int(gen.random() * pop)
            if i >= pop:
                i = pop - 1
            sample_continuous(fam, p0, p1, d, gen, disp)
            inside = True
            for k in range(d):
                disp[k] += pos[i, k]
                if disp[k] > hw or disp[k] < -hw:
                    inside = False
            if inside:
                for k in range(d):
                    pos[pop, k] = disp[k]
                pop += 1
                if pop > peak:
                    peak = pop
            if log_cap > 0:
                log_t[events] = t
                log_kind[events] = LOG_BIRTH if inside else LOG_SUPPRESSED
                log_idx[events] = i
                log_x[events] = disp[0]
            events += 1
            if pop >= n_cap:
                return STATUS_CAP, t, tau, pop, peak, events
    tau = 0.0
    return STATUS_EXTINCT, 0.0, tau, 0, peak, 0


@njit(cache=True, nogil=True)
def sim_genealogy_discrete(
    gen,
    lam,
    d,
    hw,
    side,
    fam,
    p0,
    tab_cum,
    tab_sites,
    init,
    t_max,
    n_cap,
    node_parent,
    node_btime,
    node_dtime,
    node_site,
    live,
    counts,
    target_flags,
    dom_m,
    integer_check,
):
    """Discrete run with genealogy and optional stop-on-domination.

    Node arrays record every particle ever created (suppressed births
    included, with death time equal to birth time). ``live`` holds node
    indices of currently alive particles. If ``dom_m`` > 0 the run stops
    with STATUS_DOMINATED as soon as every flagged site holds at least
    ``dom_m`` particles -- at event times, or only at integer times when
    ``integer_check`` is set (the countable-stopping-time rule; extinction
    is then reported at its exact event time and callers apply the
    ceiling). Returns (status, t_end, tau, pop, peak, events, node_count).
    """
    node_cap = node_parent.shape[0]
    pop = init.shape[0]
    if pop > node_cap:
        return STATUS_NODE_OVERFLOW, 0.0, np.nan, 0, 0, 0, 0
    use_dom = dom_m > 0
    deficient = 0
    if use_dom:
        for s in range(counts.shape[0]):
            counts[s] = 0
            if target_flags[s] != 0:
                deficient += 1
    node_count = 0
    for i in range(pop):
        node_parent[node_count] = -1
        node_btime[node_count] = 0.0
        node_dtime[node_count] = np.inf
        for k in range(d):
            node_site[node_count, k] = init[i, k]
        live[i] = node_count
        if use_dom:
            f = 0
            for k in range(d):
                f = f * side + (init[i, k] + hw)
            counts[f] += 1
            if target_flags[f] != 0 and counts[f] == dom_m:
                deficient -= 1
        node_count += 1
    t = 0.0
    tau = np.nan
    peak = pop
    events = 0
    inv_rate = 1.0 / (1.0 + lam)
    disp = np.empty(d, dtype=np.int64)
    if use_dom and deficient == 0 and not integer_check:
        return STATUS_DOMINATED, 0.0, tau, pop, peak, 0, node_count
    while pop > 0:
        u = gen.random()
        dt = -math.log1p(-u) / (pop * (1.0 + lam))
        tn = t + dt
        if use_dom and integer_check and deficient == 0:
            # state is constant on [t, tn); stop at the first integer inside
            next_int = math.floor(t) + 1.0
            if next_int <= t_max and next_int < tn:
                return STATUS_DOMINATED, next_int, tau, pop, peak, events, node_count
        if use_dom and not integer_check and deficient == 0:
            return STATUS_DOMINATED, t, tau, pop, peak, events, node_count
        if tn > t_max:
            return STATUS_HORIZON, t_max, tau, pop, peak, events, node_count
        t = tn
        if gen.random() < inv_rate:
            i = int(gen.random() * pop)
            if i >= pop:
                i = pop - 1
            nd = live[i]
            node_dtime[nd] = t
            if use_dom:
                f = 0
                for k in range(d):
                    f = f * side + (node_site[nd, k] + hw)
                counts[f] -= 1
                if target_flags[f] != 0 and counts[f] == dom_m - 1:
                    deficient += 1
            pop -= 1
            live[i] = live[pop]
            events += 1
            if pop == 0:
                tau = t
                return STATUS_EXTINCT, t, tau, pop, peak, events, node_count
        else:
            i = int(gen.random() * pop)
            if i >= pop:
                i = pop - 1
            parent = live[i]
            sample_discrete(fam, p0, d, gen, tab_cum, tab_sites, disp)
            if node_count >= node_cap:
                return STATUS_NODE_OVERFLOW, t, tau, pop, peak, events, node_count
            inside = True
            for k in range(d):
                disp[k] += node_site[parent, k]
                if disp[k] > hw or disp[k] < -hw:
                    inside = False
            node_parent[node_count] = parent
            node_btime[node_count] = t
            for k in range(d):
                node_site[node_count, k] = disp[k]
            if inside:
                node_dtime[node_count] = np.inf
                live[pop] = node_count
                pop += 1
                if pop > peak:
                    peak = pop
                if use_dom:
                    f = 0
                    for k in range(d):
                        f = f * side + (disp[k] + hw)
                    counts[f] += 1
                    if target_flags[f] != 0 and counts[f] == dom_m:
                        deficient -= 1
            else:
                node_dtime[node_count] = t  # suppressed: lifetime zero
            node_count += 1
            events += 1
            if pop >= n_cap:
                return STATUS_CAP, t, tau, pop, peak, events, node_count
    tau = 0.0
    return STATUS_EXTINCT, 0.0, tau, 0, peak, 0, node_count


@njit(cache=True, nogil=True)
def sim_genealogy_continuous(
    gen,
    lam,
    d,
    hw,
    fam,
    p0,
    p1,
    init,
    t_max,
    n_cap,
    node_parent,
    node_btime,
    node_dtime,
    node_pos,
    live,
    dom_half,
    dom_m,
    integer_check,
):
    """Continuous-space analog of ``sim_genealogy_discrete``.

    Domination here means strictly more than ``dom_m`` particles in the
    half-cube selected by ``dom_half`` (0: x1 >= 0, 1: x1 < 0; -1 off).
    """
    node_cap = node_parent.shape[0]
    pop = init.shape[0]
    if pop > node_cap:
        return STATUS_NODE_OVERFLOW, 0.0, np.nan, 0, 0, 0, 0
    use_dom = dom_half >= 0
    in_half = 0
    node_count = 0
    for i in range(pop):
        node_parent[node_count] = -1
        node_btime[node_count] = 0.0
        node_dtime[node_count] = np.inf
        for k in range(d):
            node_pos[node_count, k] = init[i, k]
        live[i] = node_count
        if use_dom:
            if (dom_half == 0 and init[i, 0] >= 0.0) or (dom_half == 1 and init[i, 0] < 0.0):
                in_half += 1
        node_count += 1
    t = 0.0
    tau = np.nan
    peak = pop
    events = 0
    inv_rate = 1.0 / (1.0 + lam)
    disp = np.empty(d, dtype=np.float64)
    if use_dom and in_half > dom_m and not integer_check:
        return STATUS_DOMINATED, 0.0, tau, pop, peak, 0, node_count
    while pop > 0:
        u = gen.random()
        dt = -math.log1p(-u) / (pop * (1.0 + lam))
        tn = t + dt
        if use_dom and integer_check and in_half > dom_m:
            next_int = math.floor(t) + 1.0
            if next_int <= t_max and next_int < tn:
                return STATUS_DOMINATED, next_int, tau, pop, peak, events, node_count
        if use_dom and not integer_check and in_half > dom_m:
            return STATUS_DOMINATED, t, tau, pop, peak, events, node_count
        if tn > t_max:
            return STATUS_HORIZON, t_max, tau, pop, peak, events, node_count
        t = tn
        if gen.random() < inv_rate:
            i = int(gen.random() * pop)
            if i >= pop:
                i = pop - 1
            nd = live[i]
            node_dtime[nd] = t
            if use_dom:
                if (dom_half == 0 and node_pos[nd, 0] >= 0.0) or (
                    dom_half == 1 and node_pos[nd, 0] < 0.0
                ):
                    in_half -= 1
            pop -= 1
            live[i] = live[pop]
            events += 1
            if pop == 0:
                tau = t
                return STATUS_EXTINCT, t, tau, pop, peak, events, node_count
        else:
            i = int(gen.random() * pop)
            if i >= pop:
                i = pop - 1
            parent = live[i]
            sample_continuous(fam, p0, p1, d, gen, disp)
            if node_count >= node_cap:
                return STATUS_NODE_OVERFLOW, t, tau, pop, peak, events, node_count
            inside = True
            for k in range(d):
                disp[k] += node_pos[parent, k]
                if disp[k] > hw or disp[k] < -hw:
                    inside = False
            node_parent[node_count] = parent
            node_btime[node_count] = t
            for k in range(d):
                node_pos[node_count, k] = disp[k]
            if inside:
                node_dtime[node_count] = np.inf
                live[pop] = node_count
                pop += 1
                if pop > peak:
                    peak = pop
                if use_dom:
                    if (dom_half == 0 and disp[0] >= 0.0) or (dom_half == 1 and disp[0] < 0.0):
                        in_half += 1
            else:
                node_dtime[node_count] = t
            node_count += 1
            events += 1
            if pop >= n_cap:
                return STATUS_CAP, t, tau, pop, peak, events, node_count
    tau = 0.0
    return STATUS_EXTINCT, 0.0, tau, 0, peak, 0, node_count
