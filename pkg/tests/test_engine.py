import math

import numpy as np
import pytest
from scipy import stats as sps

from brwlab.engine import (
    EVENT_BIRTH,
    EVENT_DEATH,
    EVENT_SUPPRESSED,
    ParticleConfiguration,
    SimulationParams,
    _run_lean,
    run,
    run_coupled,
    run_from,
    run_reference,
    simulate_batch,
)
from brwlab.errors import ValidationError
from brwlab.geometry import CubeDomain
from brwlab.kernels import DispersalKernel
from brwlab.rng import replica_stream
from brwlab.stats import extinction_probability, wilson_interval

SMALL_DOM = CubeDomain("discrete", 1, 11)
LAZY = DispersalKernel.lazy_nearest_neighbor(1, 0.2)
HUGE_DOM = CubeDomain("discrete", 1, 2_000_000_001)


def small_params(lam=3.0, seed=0, t_max=50.0, n_cap=300):
    return SimulationParams(lam=lam, kernel=LAZY, domain=SMALL_DOM, t_max=t_max,
                            n_cap=n_cap, seed=seed)


class TestBasics:
    def test_empty_initial_extinct_at_zero(self):
        p = small_params()
        res = run(p, ParticleConfiguration.empty(SMALL_DOM))
        assert res.record.outcome == "extinct"
        assert res.record.tau == 0.0
        assert res.record.events == 0

    def test_invalid_initial_position(self):
        with pytest.raises(ValidationError):
            ParticleConfiguration(np.array([[6]]), SMALL_DOM)

    def test_param_validation(self):
        with pytest.raises(ValidationError):
            SimulationParams(lam=-1.0, kernel=LAZY, domain=SMALL_DOM)
        with pytest.raises(ValidationError):
            SimulationParams(lam=1.0, kernel=LAZY, domain=SMALL_DOM, t_max=0)
        cont = DispersalKernel.uniform_ball(1, 1.0)
        with pytest.raises(ValidationError):
            SimulationParams(lam=1.0, kernel=cont, domain=SMALL_DOM)

    def test_pure_death_mean_extinction_time(self):
        # lambda = 0: tau ~ Exp(1) from a single particle
        p = SimulationParams(lam=0.0, kernel=LAZY, domain=SMALL_DOM, t_max=100.0,
                             n_cap=10, seed=5)
        recs = simulate_batch(p, ParticleConfiguration.single_at_origin(SMALL_DOM), 100_000)
        taus = np.array([r.tau for r in recs])
        assert all(r.extinct for r in recs)
        assert abs(taus.mean() - 1.0) <= 0.02

    def test_remark2_reduction_huge_cube(self):
        # no suppression -> linear birth-death; extinction prob 1/lambda
        p = SimulationParams(lam=2.0, kernel=LAZY, domain=HUGE_DOM, t_max=30.0,
                             n_cap=1500, seed=9)
        recs = simulate_batch(p, ParticleConfiguration.single_at_origin(HUGE_DOM), 100_000)
        freq = np.mean([r.extinct for r in recs])
        assert abs(freq - extinction_probability(2.0)) <= 0.01


class TestDeterminism:
    def test_identical_seed_identical_event_log(self):
        p = small_params(seed=21)
        init = ParticleConfiguration.single_at_origin(SMALL_DOM)
        a = run(p, init, replica=4, record_events=True)
        b = run(p, init, replica=4, record_events=True)
        assert a.events == b.events
        for fld in ("outcome", "t_end", "final_pop", "peak_pop", "events"):
            assert getattr(a.record, fld) == getattr(b.record, fld)
        assert (a.record.tau == b.record.tau) or (
            math.isnan(a.record.tau) and math.isnan(b.record.tau)
        )

    def test_fast_and_reference_paths_agree_event_by_event(self):
        init = ParticleConfiguration.single_at_origin(SMALL_DOM)
        for rep in range(25):
            p = small_params(seed=1000 + rep)
            ref = run_reference(p, init, rng=replica_stream(p.seed, rep),
                                record_events=True)
            lean = _run_lean(p, init, rep, replica_stream(p.seed, rep),
                             log_cap=400_000)
            assert ref.events == lean.events
            assert ref.record.outcome == lean.record.outcome
            assert ref.record.peak_pop == lean.record.peak_pop
            assert ref.record.events == lean.record.events
            if ref.record.extinct:
                assert ref.record.tau == lean.record.tau

    def test_continuous_paths_agree(self):
        dom = CubeDomain("continuous", 1, 8)
        ker = DispersalKernel.uniform_ball(1, 1.0)
        init = ParticleConfiguration.single_at_origin(dom)
        for rep in range(10):
            p = SimulationParams(lam=3.0, kernel=ker, domain=dom, t_max=30.0,
                                 n_cap=200, seed=50 + rep)
            ref = run_reference(p, init, rng=replica_stream(p.seed, 0), record_events=True)
            lean = _run_lean(p, init, 0, replica_stream(p.seed, 0), log_cap=200_000)
            assert ref.events == lean.events

    def test_batch_thread_count_does_not_change_results(self):
        p = small_params(seed=77)
        init = ParticleConfiguration.single_at_origin(SMALL_DOM)
        a = simulate_batch(p, init, 64, threads=1)
        b = simulate_batch(p, init, 64, threads=4)
        assert [(r.replica, r.outcome, repr(r.tau), r.events) for r in a] == [
            (r.replica, r.outcome, repr(r.tau), r.events) for r in b
        ]


class TestBookkeeping:
    def replayed_population(self, events, start_pop):
        pops = [start_pop]
        for (_t, kind, _idx, _x) in events:
            if kind == EVENT_DEATH:
                pops.append(pops[-1] - 1)
            elif kind == EVENT_BIRTH:
                pops.append(pops[-1] + 1)
            else:
                pops.append(pops[-1])
        return pops

    def test_population_matches_genealogy(self):
        p = small_params(seed=3)
        init = ParticleConfiguration.single_at_origin(SMALL_DOM)
        res = run(p, init, record_genealogy=True, record_events=True)
        gene = res.genealogy
        pops = self.replayed_population(res.events, 1)
        assert pops[-1] == res.record.final_pop
        # alive nodes at a time between events must match the replayed count
        for i, (t, _k, _i2, _x) in enumerate(res.events[:-1]):
            mid = 0.5 * (t + res.events[i + 1][0])
            assert len(gene.alive_at(mid)) == pops[i + 1]

    def test_positions_respect_cube(self):
        p = small_params(seed=13)
        res = run(p, ParticleConfiguration.single_at_origin(SMALL_DOM),
                  record_genealogy=True)
        for node in res.genealogy.nodes:
            inside = bool(np.all(np.abs(node.position) <= SMALL_DOM.halfwidth))
            if node.fate == "suppressed_at_birth":
                assert not inside
                assert node.lifetime == 0.0
            else:
                assert inside

    def test_child_birth_after_parent(self):
        p = small_params(seed=4)
        res = run(p, ParticleConfiguration.single_at_origin(SMALL_DOM),
                  record_genealogy=True)
        for node in res.genealogy.nodes:
            if node.parent is not None:
                assert node.birth_time >= res.genealogy.nodes[node.parent].birth_time

    def test_event_times_strictly_increasing(self):
        p = small_params(seed=6)
        res = run(p, ParticleConfiguration.single_at_origin(SMALL_DOM),
                  record_events=True)
        times = [e[0] for e in res.events]
        assert all(a < b for a, b in zip(times, times[1:]))

    def test_displacement_marks(self):
        p = small_params(seed=8)
        res = run(p, ParticleConfiguration.single_at_origin(SMALL_DOM),
                  record_genealogy=True)
        gene = res.genealogy
        for node in gene.nodes:
            if node.parent is not None:
                disp = gene.displacement(node.id)
                assert np.abs(disp).max() <= 1  # nearest-neighbor kernel


class TestEventLaw:
    def collect_gaps_at(self, n_target, needed, lam):
        gaps = []
        rep = 0
        init = ParticleConfiguration(np.zeros((3, 1), dtype=np.int64), HUGE_DOM)
        while len(gaps) < needed and rep < 4000:
            p = SimulationParams(lam=lam, kernel=LAZY, domain=HUGE_DOM, t_max=20.0,
                                 n_cap=200, seed=600)
            res = run(p, init, replica=rep, record_events=True)
            pop = 3
            t_prev = 0.0
            for (t, kind, _i, _x) in res.events:
                if pop == n_target:
                    gaps.append(t - t_prev)
                t_prev = t
                pop += 1 if kind == EVENT_BIRTH else (-1 if kind == EVENT_DEATH else 0)
            rep += 1
        return np.array(gaps[:needed])

    def test_interevent_gap_distribution(self):
        # at population n the gap is Exp(n (1 + lambda))
        lam = 2.0
        gaps = self.collect_gaps_at(3, 10_000, lam)
        assert len(gaps) == 10_000
        res = sps.kstest(gaps, "expon", args=(0, 1.0 / (3 * (1 + lam))))
        assert res.pvalue > 0.001

    def test_death_fraction(self):
        lam = 2.0
        p = SimulationParams(lam=lam, kernel=LAZY, domain=HUGE_DOM, t_max=1e9,
                             n_cap=100_000, seed=61)
        init = ParticleConfiguration(np.zeros((50, 1), dtype=np.int64), HUGE_DOM)
        deaths = total = 0
        rep = 0
        while total < 100_000:
            res = run(p, init, replica=rep, record_events=True)
            kinds = [e[1] for e in res.events]
            deaths += sum(1 for k in kinds if k == EVENT_DEATH)
            total += len(kinds)
            rep += 1
        assert abs(deaths / total - 1.0 / (1.0 + lam)) <= 0.005


class TestMonotoneCoupling:
    def test_equal_initials_identical_trajectories(self):
        p = small_params(seed=31)
        init = ParticleConfiguration(np.array([[0], [2]]), SMALL_DOM)
        res = run_coupled(p, init, init)
        assert res.pop_small == res.pop_big
        assert res.record_small.outcome == res.record_big.outcome

    def test_empty_small_extinct_at_zero(self):
        p = small_params(seed=32)
        big = ParticleConfiguration(np.array([[0], [2]]), SMALL_DOM)
        res = run_coupled(p, ParticleConfiguration.empty(SMALL_DOM), big)
        assert res.record_small.outcome == "extinct"
        assert res.record_small.tau == 0.0
        assert res.record_big.events > 0

    def test_not_a_subconfiguration(self):
        p = small_params()
        big = ParticleConfiguration(np.array([[0]]), SMALL_DOM)
        small = ParticleConfiguration(np.array([[1]]), SMALL_DOM)
        with pytest.raises(ValidationError):
            run_coupled(p, small, big)

    def test_containment_over_replicas(self):
        # containment is asserted inside run_coupled at every event
        big = ParticleConfiguration(np.array([[-2], [0], [3]]), SMALL_DOM)
        small = ParticleConfiguration(np.array([[0], [3]]), SMALL_DOM)
        for rep in range(300):
            p = small_params(seed=40, n_cap=200)
            res = run_coupled(p, small, big, replica=rep)
            assert res.containment_ok
            assert all(s <= b for s, b in zip(res.pop_small, res.pop_big))


class TestRestart:
    def test_restart_from_all_alive_continues(self):
        p = small_params(seed=51)
        res = run(p, ParticleConfiguration.single_at_origin(SMALL_DOM),
                  record_genealogy=True)
        gene = res.genealogy
        t_mid = res.record.t_end / 2
        alive = gene.alive_at(t_mid)
        if alive:
            res2 = run_from(gene, alive, t_mid, p, rng=replica_stream(777, 0))
            assert res2.record.outcome in ("extinct", "censored_horizon", "censored_cap")

    def test_restart_empty_is_extinct(self):
        p = small_params(seed=52)
        res = run(p, ParticleConfiguration.single_at_origin(SMALL_DOM),
                  record_genealogy=True)
        res2 = run_from(res.genealogy, [], 0.0, p)
        assert res2.record.outcome == "extinct"
        assert res2.record.tau == 0.0

    def test_restart_dead_id_rejected(self):
        p = small_params(seed=53)
        res = run(p, ParticleConfiguration.single_at_origin(SMALL_DOM),
                  record_genealogy=True)
        with pytest.raises(ValidationError):
            run_from(res.genealogy, [10_000], 0.0, p)
        if res.record.extinct:
            with pytest.raises(ValidationError):
                run_from(res.genealogy, [0], res.record.tau + 1.0, p)

    def test_restart_matches_fresh_start_law(self):
        # survival frequency from a restarted particle at x equals the
        # fresh-start frequency within two CI widths
        x = 2
        lam = 2.0
        dom = CubeDomain("discrete", 1, 7)
        ker = DispersalKernel.lazy_nearest_neighbor(1, 0.2)
        base = SimulationParams(lam=lam, kernel=ker, domain=dom, t_max=40.0,
                                n_cap=400, seed=88)
        init_x = ParticleConfiguration(np.array([[x]]), dom)
        fresh = simulate_batch(base, init_x, 10_000)
        k_fresh = sum(1 for r in fresh if not r.extinct)

        gene_src = run(base, init_x, record_genealogy=True)
        nid = 0  # the root is alive at time 0
        k_restart = 0
        n_restart = 10_000
        for rep in range(n_restart):
            res = run_from(gene_src.genealogy, [nid], 0.0, base, replica=rep,
                           rng=replica_stream(999, rep))
            k_restart += 0 if res.record.extinct else 1
        lo1, hi1 = wilson_interval(k_fresh, len(fresh))
        lo2, hi2 = wilson_interval(k_restart, n_restart)
        w = (hi1 - lo1) + (hi2 - lo2)
        assert abs(k_fresh / len(fresh) - k_restart / n_restart) <= 2 * w


class TestGenealogyDump:
    def test_jsonl_roundtrip(self, tmp_path):
        import json

        p = small_params(seed=71)
        res = run(p, ParticleConfiguration.single_at_origin(SMALL_DOM),
                  record_genealogy=True)
        path = tmp_path / "gene.jsonl"
        res.genealogy.dump_jsonl(path)
        lines = path.read_text().splitlines()
        assert len(lines) == len(res.genealogy.nodes)
        first = json.loads(lines[0])
        assert set(first) == {"id", "parent", "t_birth", "fate", "t_death", "pos"}
        assert first["parent"] is None
