"""Dispersal kernels: sampling, grid discretization, cemetery transitions.

Five radially symmetric families are implemented, three discrete and two
continuous. Continuous families have bounded support (the Gaussian is
truncated at a finite radius and renormalized; the truncation radius is
part of the kernel's identity), which keeps sampling exact and makes the
suppressed-mass bookkeeping finite.

The dyadic grid kernel assigns to each grid site j of resolution n the
mass 2^(-n*d) * inf a over the closed displacement box j +- 2^-n (the
Minkowski difference of the origin cell and the cell of j). The infimum
is exact for the piecewise-constant family and evaluated on a probe grid
that includes the box corners otherwise; corners are where a radially
decreasing density attains its box minimum, so the probe is exact for
the Gaussian too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import integrate
from scipy.special import gammainc, gammaincc, ndtr

from .errors import CapacityError, NotFoundError, ValidationError
from .geometry import CONTINUOUS, DISCRETE, CubeDomain

FAM_LAZY = 0
FAM_RANGE = 1
FAM_PAIR = 2
FAM_BALL = 3
FAM_GAUSS = 4
FAM_TABLE = 5

_FAMILY_CODES = {
    "lazy_nearest_neighbor": FAM_LAZY,
    "uniform_range": FAM_RANGE,
    "point_symmetric_pair": FAM_PAIR,
    "uniform_ball": FAM_BALL,
    "gaussian": FAM_GAUSS,
}

_EMPTY_CUM = np.zeros(1, dtype=np.float64)
_EMPTY_SITES = np.zeros((1, 1), dtype=np.int64)


# ---------------------------------------------------------------------------
# numba samplers. Both the Python reference engine and the jitted engines
# call these, so every code path consumes the identical uniform stream.
# Draw order per family is fixed and documented by the code itself.


@njit(cache=True)
def sample_discrete(fam, p0, d, gen, tab_cum, tab_sites, out):
    """Draw one discrete displacement into ``out``. Returns 0 if the draw
    represents a thinned-away birth (table kernels with total mass < 1)."""
    if fam == FAM_LAZY:
        for k in range(d):
            out[k] = 0
        if gen.random() < p0:
            return 1
        idx = int(gen.random() * 2 * d)
        if idx >= 2 * d:
            idx = 2 * d - 1
        out[idx // 2] = 1 if idx % 2 == 0 else -1
        return 1
    elif fam == FAM_RANGE:
        r = int(p0)
        w = 2 * r + 1
        while True:
            nonzero = False
            for k in range(d):
                c = int(gen.random() * w) - r
                if c > r:
                    c = r
                out[k] = c
                if c != 0:
                    nonzero = True
            if nonzero:
                return 1
    elif fam == FAM_PAIR:
        for k in range(d):
            out[k] = 0
        idx = int(gen.random() * 2 * d)
        if idx >= 2 * d:
            idx = 2 * d - 1
        out[idx // 2] = int(p0) if idx % 2 == 0 else -int(p0)
        return 1
    else:  # FAM_TABLE
        u = gen.random()
        total = tab_cum[tab_cum.shape[0] - 1]
        if u >= total:
            return 0
        i = np.searchsorted(tab_cum, u, side="right")
        for k in range(d):
            out[k] = tab_sites[i, k]
        return 1


@njit(cache=True)
def sample_continuous(fam, p0, p1, d, gen, out):
    """Draw one continuous displacement into ``out``. Always returns 1."""
    if fam == FAM_BALL:
        r = p0
        while True:
            s = 0.0
            for k in range(d):
                x = (2.0 * gen.random() - 1.0) * r
                out[k] = x
                s += x * x
            if s <= r * r:
                return 1
    else:  # FAM_GAUSS, Box-Muller pairs truncated at radius p1
        sig = p0
        rt = p1
        while True:
            k = 0
            while k < d:
                u1 = 1.0 - gen.random()  # (0, 1], keeps the log finite
                u2 = gen.random()
                rad = math.sqrt(-2.0 * math.log(u1))
                out[k] = sig * rad * math.cos(2.0 * math.pi * u2)
                k += 1
                if k < d:
                    out[k] = sig * rad * math.sin(2.0 * math.pi * u2)
                    k += 1
            s = 0.0
            for k in range(d):
                s += out[k] * out[k]
            if s <= rt * rt:
                return 1


@njit(cache=True, nogil=True)
def _batch_discrete(fam, p0, d, gen, tab_cum, tab_sites, out):
    tmp = np.empty(d, dtype=np.int64)
    for i in range(out.shape[0]):
        sample_discrete(fam, p0, d, gen, tab_cum, tab_sites, tmp)
        for k in range(d):
            out[i, k] = tmp[k]


@njit(cache=True, nogil=True)
def _batch_continuous(fam, p0, p1, d, gen, out):
    tmp = np.empty(d, dtype=np.float64)
    for i in range(out.shape[0]):
        sample_continuous(fam, p0, p1, d, gen, tmp)
        for k in range(d):
            out[i, k] = tmp[k]


def _ball_volume(d: int, r: float) -> float:
    return math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0) * r**d


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DispersalKernel:
    """Radially symmetric displacement law on Z^d or R^d."""

    family: str
    dimension: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in _FAMILY_CODES:
            raise ValidationError(f"unknown kernel family {self.family!r}")
        if self.dimension < 1:
            raise ValidationError("kernel dimension must be >= 1")
        p = self.params
        if self.family == "lazy_nearest_neighbor":
            q0 = p.get("q0")
            if q0 is None or not (0.0 <= q0 <= 1.0):
                raise ValidationError("lazy_nearest_neighbor needs q0 in [0,1]")
        elif self.family == "uniform_range":
            r = p.get("radius")
            if r is None or int(r) != r or r < 1:
                raise ValidationError("uniform_range needs integer radius >= 1")
        elif self.family == "point_symmetric_pair":
            k = p.get("distance")
            if k is None or int(k) != k or k < 1:
                raise ValidationError("point_symmetric_pair needs integer distance >= 1")
        elif self.family == "uniform_ball":
            r = p.get("radius")
            if r is None or r <= 0:
                raise ValidationError("uniform_ball needs radius > 0")
        elif self.family == "gaussian":
            s, rt = p.get("sigma"), p.get("truncation")
            if s is None or s <= 0 or rt is None or rt <= 0:
                raise ValidationError("gaussian needs sigma > 0 and truncation > 0")

    # -- constructors ------------------------------------------------------

    @classmethod
    def lazy_nearest_neighbor(cls, dimension: int, q0: float) -> "DispersalKernel":
        return cls("lazy_nearest_neighbor", dimension, {"q0": float(q0)})

    @classmethod
    def uniform_range(cls, dimension: int, radius: int) -> "DispersalKernel":
        return cls("uniform_range", dimension, {"radius": int(radius)})

    @classmethod
    def point_symmetric_pair(cls, dimension: int, distance: int) -> "DispersalKernel":
        return cls("point_symmetric_pair", dimension, {"distance": int(distance)})

    @classmethod
    def uniform_ball(cls, dimension: int, radius: float) -> "DispersalKernel":
        return cls("uniform_ball", dimension, {"radius": float(radius)})

    @classmethod
    def gaussian(cls, dimension: int, sigma: float, truncation: float) -> "DispersalKernel":
        return cls("gaussian", dimension, {"sigma": float(sigma), "truncation": float(truncation)})

    # -- basic structure ---------------------------------------------------

    @property
    def space(self) -> str:
        return DISCRETE if self.family in (
            "lazy_nearest_neighbor",
            "uniform_range",
            "point_symmetric_pair",
        ) else CONTINUOUS

    @property
    def is_discrete(self) -> bool:
        return self.space == DISCRETE

    @property
    def fam_code(self) -> int:
        return _FAMILY_CODES[self.family]

    @property
    def p0(self) -> float:
        p = self.params
        return {
            "lazy_nearest_neighbor": p.get("q0", 0.0),
            "uniform_range": p.get("radius", 0.0),
            "point_symmetric_pair": p.get("distance", 0.0),
            "uniform_ball": p.get("radius", 0.0),
            "gaussian": p.get("sigma", 0.0),
        }[self.family]

    @property
    def p1(self) -> float:
        return self.params.get("truncation", 0.0)

    @property
    def support_radius(self) -> float:
        """Largest possible |displacement| (Euclidean)."""
        if self.family == "lazy_nearest_neighbor":
            return 1.0
        if self.family == "uniform_range":
            return self.params["radius"] * math.sqrt(self.dimension)
        if self.family == "point_symmetric_pair":
            return float(self.params["distance"])
        if self.family == "uniform_ball":
            return self.params["radius"]
        return self.params["truncation"]

    def axis_std(self) -> float:
        """Per-axis displacement standard deviation."""
        d = self.dimension
        if self.family == "lazy_nearest_neighbor":
            return math.sqrt((1.0 - self.params["q0"]) / d)
        if self.family == "uniform_range":
            sites, masses = self.support()
            return float(np.sqrt(np.sum(masses * sites[:, 0].astype(np.float64) ** 2)))
        if self.family == "point_symmetric_pair":
            return math.sqrt(self.params["distance"] ** 2 / d)
        if self.family == "uniform_ball":
            return math.sqrt(self.params["radius"] ** 2 / (d + 2))
        sig, rt = self.params["sigma"], self.params["truncation"]
        t = rt * rt / (2.0 * sig * sig)
        # E[x_k^2] under the radially truncated normal
        return sig * math.sqrt(gammainc(d / 2.0 + 1.0, t) / gammainc(d / 2.0, t))

    # -- sampling ----------------------------------------------------------

    def sample(self, gen: np.random.Generator) -> np.ndarray:
        """One displacement, consuming the same draws as the jitted engines."""
        d = self.dimension
        if self.is_discrete:
            out = np.empty(d, dtype=np.int64)
            sample_discrete(self.fam_code, self.p0, d, gen, _EMPTY_CUM, _EMPTY_SITES, out)
            return out
        out = np.empty(d, dtype=np.float64)
        sample_continuous(self.fam_code, self.p0, self.p1, d, gen, out)
        return out

    def sample_batch(self, gen: np.random.Generator, n: int) -> np.ndarray:
        """n displacements, shape (n, d); same stream consumption as n
        single draws."""
        d = self.dimension
        if self.is_discrete:
            out = np.empty((n, d), dtype=np.int64)
            _batch_discrete(self.fam_code, self.p0, d, gen, _EMPTY_CUM, _EMPTY_SITES, out)
            return out
        out = np.empty((n, d), dtype=np.float64)
        _batch_continuous(self.fam_code, self.p0, self.p1, d, gen, out)
        return out

    # -- mass structure ----------------------------------------------------

    def support(self):
        """Discrete support: (sites (K,d) int64, masses (K,)), total mass 1."""
        if not self.is_discrete:
            raise ValidationError("support() is defined for discrete kernels only")
        d = self.dimension
        if self.family == "lazy_nearest_neighbor":
            q0 = self.params["q0"]
            sites = [np.zeros(d, dtype=np.int64)]
            masses = [q0]
            for k in range(d):
                for sgn in (1, -1):
                    v = np.zeros(d, dtype=np.int64)
                    v[k] = sgn
                    sites.append(v)
                    masses.append((1.0 - q0) / (2 * d))
            return np.array(sites), np.array(masses)
        if self.family == "uniform_range":
            r = int(self.params["radius"])
            ax = np.arange(-r, r + 1)
            grids = np.meshgrid(*([ax] * d), indexing="ij")
            sites = np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)
            keep = np.any(sites != 0, axis=1)
            sites = sites[keep]
            masses = np.full(len(sites), 1.0 / len(sites))
            return sites, masses
        k = int(self.params["distance"])
        sites = []
        for ax in range(d):
            for sgn in (1, -1):
                v = np.zeros(d, dtype=np.int64)
                v[ax] = sgn * k
                sites.append(v)
        return np.array(sites), np.full(2 * d, 1.0 / (2 * d))

    def density(self, z) -> float:
        """Continuous density at displacement z."""
        if self.is_discrete:
            raise ValidationError("density() is defined for continuous kernels only")
        z = np.asarray(z, dtype=np.float64)
        r = float(np.linalg.norm(z))
        return self.radial_density(r)

    def radial_density(self, r: float) -> float:
        if self.family == "uniform_ball":
            rad = self.params["radius"]
            if r <= rad:
                return 1.0 / _ball_volume(self.dimension, rad)
            return 0.0
        sig = self.params["sigma"]
        rt = self.params["truncation"]
        if r > rt:
            return 0.0
        d = self.dimension
        z = gammainc(d / 2.0, rt * rt / (2.0 * sig * sig))
        norm = (2.0 * math.pi * sig * sig) ** (d / 2.0)
        return math.exp(-r * r / (2.0 * sig * sig)) / (norm * z)

    def quadrature_mass(self) -> float:
        """Total mass by radial quadrature; an independent normalization check."""
        if self.is_discrete:
            _, masses = self.support()
            return float(np.sum(masses))
        d = self.dimension
        surf = d * _ball_volume(d, 1.0)  # surface area of the unit sphere
        val, _ = integrate.quad(
            lambda s: self.radial_density(s) * surf * s ** (d - 1),
            0.0,
            self.support_radius,
            limit=200,
        )
        return float(val)

    def box_infimum(self, lo: np.ndarray, hi: np.ndarray, probe_points: int = 33) -> float:
        """Infimum of the density over the closed box [lo, hi]."""
        if self.family == "uniform_ball":
            far = np.maximum(np.abs(lo), np.abs(hi))
            rad = self.params["radius"]
            if float(np.linalg.norm(far)) <= rad:
                return 1.0 / _ball_volume(self.dimension, rad)
            return 0.0
        # probe grid includes the corners, where a radially decreasing
        # density attains its minimum over the box
        axes = [np.linspace(lo[k], hi[k], probe_points) for k in range(self.dimension)]
        grids = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1)
        rr = np.linalg.norm(pts, axis=1)
        return float(min(self.radial_density(r) for r in rr))

    def mass_in_cube(self, x, domain: CubeDomain) -> float:
        """Transition mass from x into the cube (the non-cemetery part)."""
        x = np.asarray(x, dtype=np.float64)
        hw = domain.halfwidth
        if self.is_discrete:
            sites, masses = self.support()
            landed = sites + x.astype(np.int64)
            inside = np.all(np.abs(landed) <= hw, axis=1)
            return float(np.sum(masses[inside]))
        if self.dimension == 1:
            if self.family == "uniform_ball":
                r = self.params["radius"]
                overlap = min(hw, x[0] + r) - max(-hw, x[0] - r)
                return max(0.0, overlap) / (2.0 * r)
            sig = self.params["sigma"]
            rt = self.params["truncation"]
            z = ndtr(rt / sig) - ndtr(-rt / sig)
            a = max(-hw, x[0] - rt)
            b = min(hw, x[0] + rt)
            if b <= a:
                return 0.0
            return float((ndtr((b - x[0]) / sig) - ndtr((a - x[0]) / sig)) / z)
        # d >= 2: numerical quadrature over the cube
        d = self.dimension
        ranges = [(-hw, hw)] * d

        def f(*ys):
            return self.density(np.array(ys) - x)

        val, _ = integrate.nquad(f, ranges, opts={"limit": 60})
        return float(val)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CemeteryKernel:
    """Cube-restricted transition function with an absorbing cemetery state.

    From x in the cube, mass ``interior_mass(x)`` stays in the cube and the
    complement goes to the cemetery; the cemetery itself has no outgoing
    transitions.
    """

    base: DispersalKernel
    domain: CubeDomain

    def interior_mass(self, x) -> float:
        return self.base.mass_in_cube(x, self.domain)

    def cemetery_mass(self, x) -> float:
        return 1.0 - self.interior_mass(x)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridKernel:
    """Dyadic discretization of a continuous kernel inside a cube.

    ``sites`` are integer multiples of the spacing 2^-n, strictly inside the
    cube; ``masses[i]`` is the cell-infimum mass at ``sites[i]``.
    """

    resolution: int
    side_length: int
    dimension: int
    sites: np.ndarray  # (K, d) int64, units of 2^-n
    masses: np.ndarray  # (K,)

    @property
    def spacing(self) -> float:
        return 2.0 ** (-self.resolution)

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.masses))

    def positions(self) -> np.ndarray:
        return self.sites.astype(np.float64) * self.spacing

    def sampling_tables(self):
        """(cumulative masses, sites) over the positive-mass support."""
        keep = self.masses > 0
        cum = np.cumsum(self.masses[keep])
        return cum, self.sites[keep]

    def dense_lookup(self):
        """(dense mass array, axis offset) for O(1) displacement lookups."""
        w = int(np.max(np.abs(self.sites))) if len(self.sites) else 0
        shape = (2 * w + 1,) * self.dimension
        table = np.zeros(shape, dtype=np.float64)
        for s, m in zip(self.sites, self.masses):
            table[tuple(int(c) + w for c in s)] = m
        return table, w

    def to_csv(self, path):
        d = self.dimension
        header = ",".join(f"j_{k + 1}" for k in range(d)) + ",mass"
        pos = self.positions()
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for row, m in zip(pos, self.masses):
                fh.write(",".join(f"{c:.17g}" for c in row) + f",{m:.17g}\n")


def discretize(
    kernel: DispersalKernel,
    domain: CubeDomain,
    n: int,
    site_cap: int = 1 << 22,
    probe_points: int = 33,
) -> GridKernel:
    """Grid kernel of resolution n (spacing 2^-n) for a continuous kernel.

    Each site mass is 2^(-n*d) times the infimum of the density over the
    closed displacement box of side 2^(1-n) centered at the site.
    """
    if kernel.is_discrete:
        raise ValidationError("discretize applies to continuous kernels only")
    if not domain.is_discrete and domain.side != int(domain.side):
        raise ValidationError("continuous cube side must be a natural number for gridding")
    if n < 1:
        raise ValidationError("resolution n must be >= 1")
    d = kernel.dimension
    l = int(domain.side)
    half = l * 2 ** (n - 1)
    ax = np.arange(-(half - 1), half, dtype=np.int64)
    count = len(ax) ** d
    if count > site_cap:
        raise CapacityError(
            f"grid resolution {n} needs {count} sites, exceeding the cap {site_cap}"
        )
    grids = np.meshgrid(*([ax] * d), indexing="ij")
    sites = np.stack([g.ravel() for g in grids], axis=1)
    spacing = 2.0**-n
    cell_vol = spacing**d
    masses = np.empty(len(sites), dtype=np.float64)
    for i, s in enumerate(sites):
        center = s.astype(np.float64) * spacing
        lo = center - spacing
        hi = center + spacing
        masses[i] = cell_vol * kernel.box_infimum(lo, hi, probe_points=probe_points)
    return GridKernel(n, l, d, sites, masses)


def min_resolution_supercritical(
    kernel: DispersalKernel,
    domain: CubeDomain,
    lam: float,
    n_max: int = 10,
    site_cap: int = 1 << 22,
) -> int:
    """Smallest n with lam * total_mass(a_n) > 1."""
    if lam <= 1.0:
        raise ValidationError("supercritical resolution search needs lambda > 1")
    best = (0, 0.0)
    for n in range(1, n_max + 1):
        grid = discretize(kernel, domain, n, site_cap=site_cap)
        mass = grid.total_mass
        if mass > best[1]:
            best = (n, mass)
        if lam * mass > 1.0:
            return n
    raise NotFoundError(
        f"no resolution <= {n_max} makes the grid kernel supercritical "
        f"(best mass {best[1]:.6f} at n={best[0]})",
        best={"n": best[0], "mass": best[1]},
    )


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EllipticityResult:
    n_steps: int
    delta: float


def _transition_matrix(kernel: DispersalKernel, domain: CubeDomain) -> tuple:
    """Dense cube-restricted transition matrix plus the site array."""
    sites = domain.all_sites()
    index = {tuple(s): i for i, s in enumerate(sites)}
    support, masses = kernel.support()
    p = np.zeros((len(sites), len(sites)))
    for off, m in zip(support, masses):
        for i, s in enumerate(sites):
            tgt = tuple(s + off)
            j = index.get(tgt)
            if j is not None:
                p[i, j] += m
    return p, sites


def _transfer_operator(kernel: DispersalKernel, domain: CubeDomain, cells_per_axis: int):
    """Midpoint cell discretization of the continuous transition function."""
    hw = domain.halfwidth
    d = domain.dimension
    edges = np.linspace(-hw, hw, cells_per_axis + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    grids = np.meshgrid(*([centers] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    vol = (2.0 * hw / cells_per_axis) ** d
    diffs = pts[None, :, :] - pts[:, None, :]
    rr = np.linalg.norm(diffs.reshape(-1, d), axis=1).reshape(len(pts), len(pts))
    dens = np.vectorize(kernel.radial_density)(rr)
    return dens * vol, pts


def ellipticity_probe(
    kernel: DispersalKernel,
    domain: CubeDomain,
    r: float,
    n_max: int = 50,
    cells_per_axis: int = 10,
) -> EllipticityResult:
    """Numerical certificate that a few convolution powers reach B(0,r).

    Finds the smallest N <= n_max such that the partial sum over n=1..N of
    the n-step cube-restricted transition mass into the ball B(0,r) is
    positive at every probed starting point, and reports that minimum as
    delta. A certificate over a finite probe grid, not a proof.
    """
    if r <= 0:
        raise ValidationError("ellipticity probe needs r > 0")
    if kernel.is_discrete:
        p, pts = _transition_matrix(kernel, domain)
    else:
        p, pts = _transfer_operator(kernel, domain, cells_per_axis)
    target = (np.linalg.norm(pts.astype(np.float64), axis=1) <= r).astype(np.float64)
    if not np.any(target):
        raise ValidationError("probe ball B(0,r) contains no probe points; increase r")
    vec = target.copy()
    acc = np.zeros(len(pts))
    best = 0.0
    for n in range(1, n_max + 1):
        vec = p @ vec  # vec[x] = n-step mass from x into the target ball
        acc += vec
        delta = float(np.min(acc))
        best = max(best, delta)
        if delta > 0.0:
            return EllipticityResult(n, delta)
    raise NotFoundError(
        f"no N <= {n_max} gives positive reach mass from every probe point "
        f"(best delta {best:.3e}); the restricted chain is likely reducible",
        best={"delta": best},
    )


def radial_symmetry_defect(kernel: DispersalKernel, gen: np.random.Generator, probes: int = 64) -> float:
    """Max |a(y) - a(g y)| over random probes y and signed permutations g."""
    d = kernel.dimension
    worst = 0.0
    if kernel.is_discrete:
        sites, masses = kernel.support()
        table = {tuple(s): m for s, m in zip(sites, masses)}
        for s, m in zip(sites, masses):
            for _ in range(8):
                perm = gen.permutation(d)
                signs = gen.integers(0, 2, size=d) * 2 - 1
                img = tuple(np.asarray(s)[perm] * signs)
                worst = max(worst, abs(m - table.get(img, 0.0)))
        return worst
    for _ in range(probes):
        y = (gen.random(d) * 2 - 1) * kernel.support_radius
        base = kernel.density(y)
        perm = gen.permutation(d)
        signs = gen.integers(0, 2, size=d) * 2 - 1
        worst = max(worst, abs(base - kernel.density(y[perm] * signs)))
    return worst


__all__ = [
    "DispersalKernel",
    "CemeteryKernel",
    "GridKernel",
    "EllipticityResult",
    "discretize",
    "min_resolution_supercritical",
    "ellipticity_probe",
    "radial_symmetry_defect",
    "sample_discrete",
    "sample_continuous",
    "FAM_LAZY",
    "FAM_RANGE",
    "FAM_PAIR",
    "FAM_BALL",
    "FAM_GAUSS",
    "FAM_TABLE",
]
