"""Decoupling of polynomial NARX models into sums of univariate branches."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .fcpd import (FcpdConfig, FcpdResult, build_fd_filters, build_jacobian_tensor,
                   fcpd_decompose, parameterize, sample_operating_points)
from .finetune import finetune_sim
from .hessian import (build_hessian_tensor, hessian_pipeline, recover_linear_part,
                      structured_hessian_decouple)
from .lm import LmOptions, levenberg_marquardt
from .narx import (DecoupledNarxModel, NarxStructure, PNarxModel, build_regressors, e_f,
                   e_rms, fit_pnarx, load_model, save_model, simulate, simulation_error)
from .pipeline import decouple_cell
from .poly import (MultiPoly, UnivariatePoly, basis_enumerate, fit_multipoly,
                   fit_univariate, poly_eval, poly_gradient, poly_hessian)
from .signals import (DuffingParams, LabConfig, SignalRecord, add_noise, csv_read,
                      csv_write, duffing_simulate, generate_training, generate_validation,
                      multisine)
