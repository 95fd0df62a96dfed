"""ksflow: a variational solver for the 2D parabolic-parabolic Keller-Segel
system with per-step dissipation certificates.

Time stepping is implicit: each step minimises the free energy penalised by
a product metric (quadratic Wasserstein on the cell density, L2 on the
chemoattractant potential).  Every accepted step carries a machine-checked
discrete dissipation inequality, and the package ships the functional
inequalities (Onofri, Carleman, BHN, the subcritical energy lower bound) as
runtime diagnostics.
"""

from .backend import BACKEND
from .energy import (
    AnalysisContext,
    Density,
    EnergyBreakdown,
    Potential,
    SchemeParams,
    auxiliary_functional,
    bhn_check,
    carleman_bound,
    default_entropic_eps,
    energy_lower_bound,
    free_energy,
    onofri_check,
)
from .grid import (
    Grid2D,
    ScalarField,
    VectorField,
    gradient,
    integrate,
    laplacian,
    make_grid,
)
from .scheme import (
    State,
    StepDiagnostics,
    Trajectory,
    de_giorgi_interpolant,
    jko_step,
    metric_d_sq,
    phi_substep,
    rho_substep,
    run,
)
from .transport import (
    TransportResult,
    barycentric_map,
    wasserstein_entropic,
    wasserstein_exact,
)
from .diagnostics import (
    blowup_monitor,
    discrete_identities,
    dissipation_ledger,
    state_observables,
    weak_residual,
)
from .config import RunConfig, build_initial, load_config

__version__ = "0.1.0"
