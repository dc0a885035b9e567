"""Numerical tolerances and shared defaults.

Every threshold that turns an exact spectral statement into a numerical
decision lives here, so reports can echo the configuration they ran with.
"""

from dataclasses import dataclass, asdict, replace


@dataclass(frozen=True)
class Tolerances:
    """Thresholds used across the toolkit.

    unit_tol
        A Floquet multiplier rho counts as a unit multiplier when
        |rho - 1| <= unit_tol.
    res_tol
        Relative residual separating a solvable periodic-solution system
        from an obstructed one.
    rank_tol
        Relative singular-value cutoff for Lie-span rank computations.
    eig_tol
        Singular-value cutoff when extracting the eigenspace of the
        monodromy matrix for eigenvalue 1 (nullspace of Phi - I).
    cross_tol
        |det(I - Phi)| below cross_tol * scale is flagged as a crossing
        during continuation.
    level_tol
        |z|-coordinate of a unit representative below this classifies a
        projective point as lying on the level at infinity.
    cluster_tol
        Clustering radius (projective metric) for direction estimates.
        None picks an estimator-specific default: 3 sphere-box diameters
        for the chain estimator, 0.1 for the box-center estimator.
    kernel_window
        Kernel alignment of periodic initial values is reported when the
        unit-multiplier margin falls below this.
    """

    unit_tol: float = 1e-8
    res_tol: float = 1e-8
    rank_tol: float = 1e-9
    eig_tol: float = 1e-6
    cross_tol: float = 1e-10
    level_tol: float = 1e-6
    cluster_tol: float | None = None
    kernel_window: float = 0.1

    def replace(self, **kwargs) -> "Tolerances":
        return replace(self, **kwargs)

    def as_dict(self) -> dict:
        return asdict(self)


DEFAULT_TOLERANCES = Tolerances()

# Box-graph construction refuses to allocate beyond this many point-control
# work items; raise the cap explicitly for bigger runs.
DEFAULT_MEMORY_CAP = 50_000_000

# Matrix-exponential applications are chunked so that ||M||_F * dt stays
# below this, with renormalization in between (overflow guard).
MAX_EXP_GROWTH = 50.0
