"""Lattice potential theory for non-reversible diffusions on the flat torus.

Finite-volume Markov generators for ``div(a grad) + b.grad``, their invariant
densities and discrete adjoints, Green functions, exit times, capacities and
equilibrium measures, scans of the Green / exit-time / capacity / Harnack
conditions, and a Monte Carlo sampler for cross-checks.
"""

__version__ = "0.1.0"

from .coeffs import FAMILIES, CoefficientField, EllipticityError, builtin_field, ellipticity_check
from .conditions import (
    ConditionReport,
    EquivalenceReport,
    ball_family,
    check_C,
    check_E,
    check_G,
    check_harnack,
    check_sandwich,
    comparison_check,
    equivalence_suite,
    telescoping_check,
)
from .grid import BallSpec, GeometryError, RegionMask, TorusGrid, complement_mask, make_ball_mask, torus_distance
from .linalg import SolveReport, SolverError, solve, solver_options
from .montecarlo import McEstimate, SdeConfig, simulate_exit_time, simulate_hitting_probability
from .operator import (
    DualGeneratorMatrix,
    GeneratorMatrix,
    InvariantDensity,
    assemble_generator,
    dual_generator,
    invariant_density,
    killed_submatrix,
    write_matrix_market,
)
from .potential import (
    CapacityResult,
    EquilibriumMeasure,
    ExitTimeField,
    GreenColumn,
    HarmonicExtension,
    IdentityReport,
    annulus_extrema_check,
    capacity,
    equilibrium_measure,
    exit_time,
    green_column,
    harmonic_extension,
    maximum_principle_check,
    representation_check,
)
