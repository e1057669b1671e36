"""Selection probabilities of l1-regularised GLMs under bootstrap resampling
and penalty randomisation, computed by replicated VAMP instead of refitting."""

__version__ = "0.1.0"

from .exceptions import DomainError, NumericalError
from .glm_model import (
    Likelihood,
    OccupationLaw,
    PenaltyLaw,
    Quadrature,
    avg_x_moments,
    avg_z_moments,
    g1x,
    g1x_prime,
    g1z,
    g1z_prime,
    selection_probability,
    soft_threshold,
)
from .rvamp import (
    Dataset,
    MessageState,
    RvampConfig,
    RvampResult,
    SelectionPath,
    default_gamma_grid,
    run_rvamp,
    selection_path,
)
from .sa_rvamp import MacroObservables, SaMessageState, macroscopic_observables, run_sa_rvamp
from .state_evolution import SeState, SpectralMeasure, TeacherModel, row_orthogonal_spectrum, run_se
from .baseline import (
    BootstrapConfig,
    SolverConfig,
    bootstrap_selection_probability,
    fit_weighted_l1_glm,
)
from .data import SynthSpec, load_and_preprocess, make_synthetic
