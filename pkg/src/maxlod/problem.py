"""Problem data: coefficient fields, sources, and the frequency.

Coefficients are piecewise constant per fine cell; closed-form fields are
sampled at fine-cell centroids.  All generators are deterministic functions
of the configured seed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .mesh import Mesh


@dataclass(frozen=True)
class CoefficientSpec:
    """Descriptor for a per-cell SPD 3x3 coefficient field.

    kinds:
      identity      -- the 3x3 identity on every cell
      checkerboard  -- two-phase fine-scale checkerboard, values 1 and `contrast`
      random        -- seeded i.i.d. scalar per cell, uniform in [lo, hi]
    """

    kind: str = "identity"
    contrast: float = 10.0
    lo: float = 1.0
    hi: float = 10.0

    def __post_init__(self):
        if self.kind not in ("identity", "checkerboard", "random"):
            raise ValueError(f"unknown coefficient kind {self.kind!r}")
        if self.kind == "checkerboard" and self.contrast <= 0:
            raise ValueError("checkerboard contrast must be positive")
        if self.kind == "random" and not 0 < self.lo <= self.hi:
            raise ValueError("random coefficient range must satisfy 0 < lo <= hi")

    def materialize(self, mesh: Mesh, seed: int = 0) -> np.ndarray:
        nc = mesh.n_cells
        if self.kind == "identity":
            vals = np.ones(nc)
        elif self.kind == "checkerboard":
            cube = np.arange(nc) // 6
            i = cube % mesh.n
            j = (cube // mesh.n) % mesh.n
            k = cube // (mesh.n * mesh.n)
            vals = np.where((i + j + k) % 2 == 0, 1.0, self.contrast)
        else:
            rng = np.random.default_rng(seed)
            vals = rng.uniform(self.lo, self.hi, size=nc)
        return vals[:, None, None] * np.eye(3)

    def bounds(self) -> tuple[float, float]:
        if self.kind == "identity":
            return 1.0, 1.0
        if self.kind == "checkerboard":
            return min(1.0, self.contrast), max(1.0, self.contrast)
        return self.lo, self.hi


@dataclass(frozen=True)
class SourceSpec:
    """Right-hand side descriptor.

    kinds:
      smooth    -- f(x) = (sin(pi y) sin(pi z), 0, 0), divergence-free and bounded
      constant  -- constant vector `value`
      zero      -- homogeneous source
    """

    kind: str = "smooth"
    value: tuple[float, float, float] = (1.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("smooth", "constant", "zero"):
            raise ValueError(f"unknown source kind {self.kind!r}")

    def as_callable(self):
        if self.kind == "smooth":
            def f(x):
                x = np.atleast_2d(x)
                out = np.zeros_like(x)
                out[:, 0] = np.sin(np.pi * x[:, 1]) * np.sin(np.pi * x[:, 2])
                return out
            return f
        if self.kind == "constant":
            val = np.asarray(self.value, dtype=float)

            def f(x):
                x = np.atleast_2d(x)
                return np.broadcast_to(val, (x.shape[0], 3)).copy()
            return f

        def f(x):
            x = np.atleast_2d(x)
            return np.zeros((x.shape[0], 3))
        return f


@dataclass(frozen=True)
class ProblemSpec:
    """Frequency, coefficients, and source of one model problem."""

    omega: float
    mu: CoefficientSpec = field(default_factory=CoefficientSpec)
    eps: CoefficientSpec = field(default_factory=CoefficientSpec)
    source: SourceSpec = field(default_factory=SourceSpec)
    seed: int = 0

    def __post_init__(self):
        if self.omega <= 0:
            raise ValueError(f"omega must be positive, got {self.omega}")

    def materialize(self, mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
        """Per-fine-cell (mu, eps) arrays; mu and eps use decorrelated seeds."""
        mu = self.mu.materialize(mesh, seed=self.seed)
        eps = self.eps.materialize(mesh, seed=self.seed + 104729)
        return mu, eps


def check_resolution(omega: float, H: float) -> bool:
    """True (with a warning) when the resolution condition omega*H <= 1 fails."""
    flagged = omega * H > 1.0
    if flagged:
        warnings.warn(
            f"resolution condition violated: omega*H = {omega * H:.3g} > 1; "
            "kernel problems may be near-singular",
            stacklevel=2,
        )
    return flagged
