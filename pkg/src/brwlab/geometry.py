"""Cube domains and the dyadic grid geometry used by the coupling.

Discrete cubes are site boxes {-w..w}^d indexed by integer offsets from
the center; continuous cubes are [-l/2, l/2]^d. Grid sites of resolution
n live on 2^-n Z^d strictly inside the continuous cube, and each grid
site j owns the half-open cell [j - 2^-(n+1), j + 2^-(n+1))^d.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

DISCRETE = "discrete"
CONTINUOUS = "continuous"


@dataclass(frozen=True)
class CubeDomain:
    """Cube centered at the origin where births are allowed."""

    space: str
    dimension: int
    side: float  # discrete: odd site count per axis; continuous: edge length

    def __post_init__(self):
        if self.space not in (DISCRETE, CONTINUOUS):
            raise ValidationError(f"domain.space must be discrete|continuous, got {self.space!r}")
        if self.dimension < 1:
            raise ValidationError("domain.dimension must be >= 1")
        if self.side <= 0:
            raise ValidationError("domain.side must be > 0")
        if self.space == DISCRETE:
            s = int(self.side)
            if s != self.side or s % 2 == 0:
                raise ValidationError("discrete domain.side must be an odd integer site count")

    @property
    def is_discrete(self) -> bool:
        return self.space == DISCRETE

    @property
    def halfwidth(self) -> float:
        """Sites span {-halfwidth..halfwidth} (discrete) or [-hw, hw] (continuous)."""
        if self.is_discrete:
            return (int(self.side) - 1) // 2
        return self.side / 2.0

    def contains(self, x) -> bool:
        x = np.asarray(x)
        return bool(np.all(np.abs(x) <= self.halfwidth))

    def axis_sites(self) -> np.ndarray:
        if not self.is_discrete:
            raise ValidationError("axis_sites is defined for discrete domains only")
        w = int(self.halfwidth)
        return np.arange(-w, w + 1, dtype=np.int64)

    def all_sites(self) -> np.ndarray:
        """All discrete sites, shape (side^d, d), lexicographic order."""
        ax = self.axis_sites()
        grids = np.meshgrid(*([ax] * self.dimension), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def site_count(self) -> int:
        return int(self.side) ** self.dimension


def cell_of(x: np.ndarray, n: int) -> np.ndarray:
    """Integer grid coordinates (units of 2^-n) of the cell containing x.

    The cell of site j is the half-open box [j - 2^-(n+1), j + 2^-(n+1)),
    so coordinates map by floor(x * 2^n + 1/2).
    """
    scale = float(1 << n)
    return np.floor(np.asarray(x, dtype=np.float64) * scale + 0.5).astype(np.int64)
