"""
Hydrostatic equilibria of a stratified viscous fluid in an annulus: stability
analysis, pseudo-spectral simulation and run diagnostics.

Modules:

- :mod:`~boussinesq_annulus.spectral`: Chebyshev-Fourier grid, fields, operators, norms
- :mod:`~boussinesq_annulus.equilibrium`: potentials, density profiles, stability classes
- :mod:`~boussinesq_annulus.elliptic`: per-mode Poisson/Helmholtz solves, streamfunction, pressure, Stokes
- :mod:`~boussinesq_annulus.eigensolver`: variational growth-rate computation
- :mod:`~boussinesq_annulus.timestepper`: IMEX integration of the nonlinear and linearized systems
- :mod:`~boussinesq_annulus.diagnostics`: energy/Lyapunov budgets and long-time checks
- :mod:`~boussinesq_annulus.cli`: configuration files, subcommands and run directories
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    AnnulusError,
    DomainError,
    SizeError,
    ArgError,
    RangeError,
    HarmonicityError,
    VariantError,
    SeedError,
    BracketError,
    NumericalError,
    SingularError,
    InfluenceSingular,
    CompatibilityError,
    EigenFailure,
    DegenerateError,
    CFLViolation,
    SolverFailure,
    NotConverged,
    ParseError,
    ValidationError,
)
from .spectral import (  # noqa: F401
    AnnulusGrid,
    ScalarField,
    VectorField,
    load_field,
    make_grid,
    norm,
    save_field,
)
from .equilibrium import (  # noqa: F401
    HydrostaticEquilibrium,
    PhysicsParams,
    Stable,
    Unstable,
    Indeterminate,
    classify,
    linear_family,
    linear_profile,
    make_equilibrium,
    make_potential,
    make_profile,
)
from .elliptic import (  # noqa: F401
    helmholtz_mode,
    poisson_mode,
    recover_pressure,
    solve_stokes,
    streamfunction,
)
from .eigensolver import (  # noqa: F401
    alpha_of_s,
    assemble_coupled,
    assemble_forms,
    eigenmode,
    full_spectrum_check,
    growth_rate,
)
from .timestepper import SeedSpec, SimConfig, SimState, init, run, step_linear, step_nonlinear  # noqa: F401
