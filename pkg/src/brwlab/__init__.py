"""brwlab: Monte Carlo laboratory for branching random walks on a cube.

Capabilities: event-driven BRW simulation with genealogy and monotone
coupling, dyadic grid coupling of continuous and discrete processes,
oriented percolation on the even lattice, block renormalization of a BRW
onto percolation, and the estimator / oracle toolkit for extinction-tail
statistics.
"""

from .engine import (
    ExtinctionRecord,
    Genealogy,
    ParticleConfiguration,
    SimulationParams,
    run,
    run_coupled,
    run_from,
    simulate_batch,
)
from .geometry import CubeDomain
from .kernels import (
    CemeteryKernel,
    DispersalKernel,
    GridKernel,
    discretize,
    ellipticity_probe,
    min_resolution_supercritical,
)

__version__ = "0.1.0"
