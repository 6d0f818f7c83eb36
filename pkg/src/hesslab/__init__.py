"""Hessians of two-layer teacher-student networks at the optimum: closed forms,
Monte-Carlo oracles, spectra, rank predictions and near-optimum dynamics."""

__version__ = "0.1.0"

from .errors import DivergenceError, NumericError, UsageError
from .net import (Architecture, Erf, Linear, Polynomial, Quadratic, TwoLayerNet, WeightDistribution,
                  activation_eval, activation_from_dict, forward, output_gradients, sample_teacher)
from .hessian import (HessianMatrix, analytic_hessian, hessian_erf, hessian_linear, hessian_quadratic)
from .empirical import (McEstimate, empirical_fim, finite_diff_hessian, outer_product_hessian_mc,
                        validation_report)
from .spectral import Spectrum, SpectralDensity, eig_sym, ecdf, ks_distance, numerical_rank, spectral_histogram
from .theory import (EffectiveParamReport, TheoreticalSpectrum, chi2_scaled, convolution_spectrum,
                     effective_params, linear_spectrum_prediction, mp_scaled, poly_rank_upper_bound,
                     verify_block_eigenstructure)
from .dynamics import LossTrajectory, fit_tail_rate, perturb, predicted_loss_curve, sgd_train

__all__ = [
    "__version__",
    "DivergenceError", "NumericError", "UsageError",
    "Architecture", "Erf", "Linear", "Polynomial", "Quadratic", "TwoLayerNet", "WeightDistribution",
    "activation_eval", "activation_from_dict", "forward", "output_gradients", "sample_teacher",
    "HessianMatrix", "analytic_hessian", "hessian_erf", "hessian_linear", "hessian_quadratic",
    "McEstimate", "empirical_fim", "finite_diff_hessian", "outer_product_hessian_mc", "validation_report",
    "Spectrum", "SpectralDensity", "eig_sym", "ecdf", "ks_distance", "numerical_rank", "spectral_histogram",
    "EffectiveParamReport", "TheoreticalSpectrum", "chi2_scaled", "convolution_spectrum", "effective_params",
    "linear_spectrum_prediction", "mp_scaled", "poly_rank_upper_bound", "verify_block_eigenstructure",
    "LossTrajectory", "fit_tail_rate", "perturb", "predicted_loss_curve", "sgd_train",
]
