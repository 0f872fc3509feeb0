"""Factor analysis of dynamic PET images by constrained unmixing.

The package provides the mixing model with a spatially varying
specific-binding factor, the PALM solver estimating factors, proportions and
variability maps, baseline methods (k-means, multiplicative NMF), a kinetic
phantom generator and an NMSE evaluation harness.
"""

from .errors import (DataError, NumericalError, PetunmixError, ShapeError,
                     UsageError)
from .model import (DynamicImage, FactorModel, Hyperparameters, ImageGeometry,
                    ProportionMaps, VariabilityMaps, cost, default_frame_times,
                    forward_model)
from .operators import (PsfOperator, SpatialDiffOperator, operator_norm_sq,
                        project_nonneg, project_simplex_columns,
                        prox_l1_nonneg, psf_adjoint, psf_apply, sdiff_adjoint,
                        sdiff_apply)
from .solver import (SolverOptions, SolverState, grad_A, grad_B, grad_M,
                     lipschitz_estimates, palm_iterate, solve)
from .baselines import (KmeansResult, NmfResult, kmeans_init, match_factors,
                        nmf_multiplicative, normalize_nmf)
from .phantom import (KineticParams, PhantomTruth, PlasmaInput, SbfDatabase,
                      add_noise, assemble_phantom, build_sbf_database,
                      extract_variability_basis, plasma_input, solve_2tcm)
from .evaluate import (ExperimentConfig, ExperimentReport, MethodOutput, nmse,
                       run_experiment, score_run)

__version__ = "0.1.0"
