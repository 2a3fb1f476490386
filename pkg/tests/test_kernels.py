import math

import numpy as np
import pytest
from scipy import integrate

from brwlab.errors import CapacityError, NotFoundError, ValidationError
from brwlab.geometry import CubeDomain, cell_of
from brwlab.kernels import (
    CemeteryKernel,
    DispersalKernel,
    discretize,
    ellipticity_probe,
    min_resolution_supercritical,
    radial_symmetry_defect,
)
from brwlab.rng import replica_stream

ALL_KERNELS = [
    DispersalKernel.lazy_nearest_neighbor(1, 0.2),
    DispersalKernel.lazy_nearest_neighbor(2, 0.5),
    DispersalKernel.uniform_range(1, 2),
    DispersalKernel.point_symmetric_pair(1, 4),
    DispersalKernel.point_symmetric_pair(2, 3),
    DispersalKernel.uniform_ball(1, 1.0),
    DispersalKernel.uniform_ball(2, 1.0),
    DispersalKernel.gaussian(1, 1.0, 4.0),
    DispersalKernel.gaussian(2, 1.0, 3.0),
]


def draw_many(kernel, n, seed=0):
    gen = replica_stream(seed, 0)
    return kernel.sample_batch(gen, n)


class TestSampling:
    def test_degenerate_laziness_always_zero(self):
        k = DispersalKernel.lazy_nearest_neighbor(1, 1.0)
        s = draw_many(k, 1000)
        assert np.all(s == 0)

    def test_pair_kernel_is_fair_bernoulli(self):
        # exact Bernoulli(1/2) law by construction
        k = DispersalKernel.point_symmetric_pair(1, 4)
        s = draw_many(k, 1_000_000)
        assert set(np.unique(s)) == {-4, 4}
        freq_plus = np.mean(s == 4)
        assert abs(freq_plus - 0.5) <= 0.002

    def test_uniform_ball_radial_mass_split(self):
        # area ratio (1/sqrt(2))^2 / 1^2 = 1/2 exactly
        k = DispersalKernel.uniform_ball(2, 1.0)
        s = draw_many(k, 1_000_000)
        inner = np.mean(np.linalg.norm(s, axis=1) <= 1.0 / math.sqrt(2.0))
        assert abs(inner - 0.5) <= 0.002

    @pytest.mark.parametrize("kernel", ALL_KERNELS, ids=lambda k: f"{k.family}-d{k.dimension}")
    def test_mean_displacement_vanishes(self, kernel):
        n = 1_000_000
        s = draw_many(kernel, n, seed=3)
        mean = np.abs(s.mean(axis=0)).max()
        assert mean <= 4.0 * kernel.axis_std() / 1e3

    @pytest.mark.parametrize("kernel", ALL_KERNELS, ids=lambda k: f"{k.family}-d{k.dimension}")
    def test_sampling_reproducible(self, kernel):
        a = draw_many(kernel, 500, seed=11)
        b = draw_many(kernel, 500, seed=11)
        assert np.array_equal(a, b)

    def test_batch_matches_single_draws(self):
        for kernel in ALL_KERNELS:
            gen_a = replica_stream(13, 1)
            gen_b = replica_stream(13, 1)
            batch = kernel.sample_batch(gen_a, 200)
            singles = np.array([kernel.sample(gen_b) for _ in range(200)])
            assert np.array_equal(batch, singles)

    @pytest.mark.parametrize("kernel", ALL_KERNELS, ids=lambda k: f"{k.family}-d{k.dimension}")
    def test_radial_symmetry(self, kernel):
        gen = replica_stream(7, 0)
        assert radial_symmetry_defect(kernel, gen) <= 1e-12

    @pytest.mark.parametrize("kernel", ALL_KERNELS, ids=lambda k: f"{k.family}-d{k.dimension}")
    def test_total_mass_one(self, kernel):
        assert abs(kernel.quadrature_mass() - 1.0) <= 1e-9

    def test_samples_inside_support(self):
        k = DispersalKernel.gaussian(2, 1.0, 3.0)
        s = draw_many(k, 20000, seed=5)
        assert np.all(np.linalg.norm(s, axis=1) <= 3.0)


class TestValidation:
    def test_bad_family(self):
        with pytest.raises(ValidationError):
            DispersalKernel("levy_flight", 1, {})

    def test_bad_params(self):
        with pytest.raises(ValidationError):
            DispersalKernel.lazy_nearest_neighbor(1, 1.5)
        with pytest.raises(ValidationError):
            DispersalKernel.gaussian(1, -1.0, 4.0)

    def test_domain_validation(self):
        with pytest.raises(ValidationError):
            CubeDomain("discrete", 1, 10)  # even site count
        with pytest.raises(ValidationError):
            CubeDomain("continuous", 0, 4.0)


class TestDiscretize:
    def test_frozen_ball_mass_side4_n3(self):
        # sites |j| <= 7/8 carry mass 2^-3 * 1/2 each: 15 sites, total 15/16
        dom = CubeDomain("continuous", 1, 4)
        k = DispersalKernel.uniform_ball(1, 1.0)
        g = discretize(k, dom, 3)
        assert abs(g.total_mass - 15.0 / 16.0) < 1e-12
        assert 0.9 < g.total_mass <= 1.0

    @pytest.mark.parametrize(
        "kernel",
        [DispersalKernel.uniform_ball(1, 1.0), DispersalKernel.gaussian(1, 1.0, 4.0)],
        ids=["ball", "gauss"],
    )
    def test_mass_below_cell_integral(self, kernel):
        # the infimum underestimates the cell average
        dom = CubeDomain("continuous", 1, 4)
        g = discretize(kernel, dom, 3)
        h = g.spacing / 2.0
        for site, mass in zip(g.positions(), g.masses):
            cell_int, _ = integrate.quad(
                lambda z: kernel.radial_density(abs(z)), site[0] - h, site[0] + h,
                limit=100,
            )
            assert mass <= cell_int + 1e-10

    @pytest.mark.parametrize(
        "kernel",
        [DispersalKernel.uniform_ball(1, 1.0), DispersalKernel.gaussian(1, 1.0, 4.0)],
        ids=["ball", "gauss"],
    )
    def test_monotone_under_refinement(self, kernel):
        dom = CubeDomain("continuous", 1, 4)
        masses = [discretize(kernel, dom, n).total_mass for n in range(1, 7)]
        for a, b in zip(masses, masses[1:]):
            assert b >= a - 1e-12
        assert masses[-1] <= 1.0 + 1e-12

    def test_gaussian_mass_n6_exceeds_n3(self):
        dom = CubeDomain("continuous", 1, 4)
        k = DispersalKernel.gaussian(1, 1.0, 4.0)
        assert (
            discretize(k, dom, 6).total_mass >= discretize(k, dom, 3).total_mass
        )

    def test_site_cap(self):
        dom = CubeDomain("continuous", 1, 4)
        k = DispersalKernel.uniform_ball(1, 1.0)
        with pytest.raises(CapacityError):
            discretize(k, dom, 8, site_cap=100)

    def test_discrete_kernel_rejected(self):
        dom = CubeDomain("continuous", 1, 4)
        with pytest.raises(ValidationError):
            discretize(DispersalKernel.lazy_nearest_neighbor(1, 0.2), dom, 2)

    def test_csv_dump(self, tmp_path):
        dom = CubeDomain("continuous", 1, 4)
        g = discretize(DispersalKernel.uniform_ball(1, 1.0), dom, 2)
        path = tmp_path / "an.csv"
        g.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "j_1,mass"
        assert len(lines) == 1 + len(g.sites)

    def test_cell_mapping_half_open(self):
        # cell convention [j - 2^-(n+1), j + 2^-(n+1))
        n = 2
        assert cell_of(np.array([0.124999]), n)[0] == 0
        assert cell_of(np.array([0.125]), n)[0] == 1
        assert cell_of(np.array([-0.125]), n)[0] == 0
        assert cell_of(np.array([-0.1250001]), n)[0] == -1


class TestResolutionSearch:
    def test_finds_small_n_for_ball(self):
        dom = CubeDomain("continuous", 1, 6)
        k = DispersalKernel.uniform_ball(1, 1.0)
        n = min_resolution_supercritical(k, dom, 2.0)
        grid = discretize(k, dom, n)
        assert 2.0 * grid.total_mass > 1.0
        if n > 1:
            assert 2.0 * discretize(k, dom, n - 1).total_mass <= 1.0

    def test_subcritical_lambda_rejected(self):
        dom = CubeDomain("continuous", 1, 6)
        k = DispersalKernel.uniform_ball(1, 1.0)
        with pytest.raises(ValidationError):
            min_resolution_supercritical(k, dom, 1.0)

    def test_huge_lambda_needs_n1(self):
        dom = CubeDomain("continuous", 1, 6)
        for k in (DispersalKernel.uniform_ball(1, 1.0), DispersalKernel.gaussian(1, 1.0, 4.0)):
            assert min_resolution_supercritical(k, dom, 1e6) == 1

    def test_not_found_carries_best(self):
        # ball of radius 3 inside a cube of side 2: most mass escapes
        dom = CubeDomain("continuous", 1, 2)
        k = DispersalKernel.uniform_ball(1, 3.0)
        with pytest.raises(NotFoundError) as exc:
            min_resolution_supercritical(k, dom, 1.01, n_max=4)
        assert exc.value.best["mass"] < 1.0


class TestCemetery:
    def test_discrete_masses_sum_to_one(self):
        dom = CubeDomain("discrete", 2, 5)
        ck = CemeteryKernel(DispersalKernel.lazy_nearest_neighbor(2, 0.3), dom)
        for x in dom.all_sites():
            assert abs(ck.interior_mass(x) + ck.cemetery_mass(x) - 1.0) < 1e-12

    @pytest.mark.parametrize(
        "kernel",
        [DispersalKernel.uniform_ball(1, 1.0), DispersalKernel.gaussian(1, 1.0, 4.0)],
        ids=["ball", "gauss"],
    )
    def test_continuous_interior_matches_quadrature(self, kernel):
        # closed forms vs direct quadrature on a 100-point probe grid
        dom = CubeDomain("continuous", 1, 5)
        ck = CemeteryKernel(kernel, dom)
        hw = dom.halfwidth
        for x in np.linspace(-hw, hw, 100):
            direct, _ = integrate.quad(
                lambda y: kernel.radial_density(abs(y - x)), -hw, hw, limit=200,
                points=[x - kernel.support_radius, x + kernel.support_radius],
            )
            total = ck.interior_mass([x]) + ck.cemetery_mass([x])
            assert abs(total - 1.0) < 1e-10
            assert abs(ck.interior_mass([x]) - direct) < 1e-8

    def test_cemetery_positive_near_boundary(self):
        dom = CubeDomain("continuous", 1, 5)
        ck = CemeteryKernel(DispersalKernel.uniform_ball(1, 1.0), dom)
        assert ck.cemetery_mass([2.4]) > 0.4
        assert ck.cemetery_mass([0.0]) == 0.0


class TestEllipticity:
    def test_lazy_kernel_reaches_origin_in_two_steps(self):
        dom = CubeDomain("discrete", 1, 5)
        k = DispersalKernel.lazy_nearest_neighbor(1, 0.5)
        res = ellipticity_probe(k, dom, r=0.5, n_max=10)
        assert res.n_steps == 2
        assert res.delta > 0
        # independent oracle: explicit 5x5 transition-matrix powering
        sites = dom.axis_sites()
        p = np.zeros((5, 5))
        for i, x in enumerate(sites):
            p[i, i] += 0.5
            for step in (-1, 1):
                if abs(x + step) <= 2:
                    p[i, list(sites).index(x + step)] += 0.25
        target = (np.abs(sites) == 0).astype(float)
        acc = p @ target + (p @ p) @ target
        assert abs(res.delta - acc.min()) < 1e-12

    def test_reducible_pair_kernel_not_found(self):
        dom = CubeDomain("discrete", 1, 5)
        k = DispersalKernel.point_symmetric_pair(1, 4)
        with pytest.raises(NotFoundError):
            ellipticity_probe(k, dom, r=0.5, n_max=30)

    def test_huge_ball_gives_n1_min_row_mass(self):
        dom = CubeDomain("discrete", 1, 5)
        k = DispersalKernel.lazy_nearest_neighbor(1, 0.5)
        res = ellipticity_probe(k, dom, r=100.0, n_max=5)
        assert res.n_steps == 1
        ck = CemeteryKernel(k, dom)
        expected = min(ck.interior_mass(x) for x in dom.all_sites())
        assert abs(res.delta - expected) < 1e-12

    def test_continuous_probe_runs(self):
        dom = CubeDomain("continuous", 1, 4)
        k = DispersalKernel.uniform_ball(1, 1.0)
        res = ellipticity_probe(k, dom, r=0.5, n_max=10, cells_per_axis=10)
        assert res.n_steps >= 1
        assert res.delta > 0

    def test_bad_radius(self):
        dom = CubeDomain("discrete", 1, 5)
        with pytest.raises(ValidationError):
            ellipticity_probe(DispersalKernel.lazy_nearest_neighbor(1, 0.5), dom, r=0.0)
