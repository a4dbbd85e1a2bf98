"""Attention localization diagnostics: signal propagation probability,
W_QK eigenspectrum shape, attention entropy and a trace regularizer."""

from .errors import (AsymmetricMatrixError, EmptyBatchError, InvalidCovarianceError, InvalidDimensionError,
                     InvalidInputError, InvalidTemperatureError, TrainingDiverged)
from .locater import TrainConfig, TrainLog, regularizer, regularizer_grads, train
from .model import (AttentionParams, GradReport, attention_entropy, entropy_lower_bound, forward,
                    grad_term_orders, loss, qk_gradient_analytic)
from .moments import MomentQuery, audit_walk_formulas, moment_closed_form, moment_monte_carlo
from .pwsoftmax import piecewise_softmax, softmax, taylor_coeffs
from .randwalk import CovarianceSpec, TokenSequence, generate_walk, make_covariance
from .spectrum import (EigenSpec, ShapeParams, collapse_bounds, eigenspectrum_variance, sample_wqk,
                       shape_params)
from .spp import (MeanVar, SppProfile, rho_gaussian, rho_theory, spp_empirical_batch, spp_mean_var,
                  spp_monte_carlo, verify_limits)

__version__ = "0.1.0"
