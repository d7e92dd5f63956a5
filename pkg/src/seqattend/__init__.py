"""Sequential visual attention with a low-bandwidth Gaussian glimpse sensor."""

from .attention import GlimpseParams, build_filterbank, decode_glimpse, read_glimpse
from .model import AttentionModel, ModelConfig, rollout
from .ndcore import GaussianParams, NumericError, gaussian_sample, grad_check
from .objective import kl_diag_gaussian, poisson_weights, reconstruction_nll, variational_bound

__all__ = [
    "AttentionModel", "GaussianParams", "GlimpseParams", "ModelConfig", "NumericError",
    "build_filterbank", "decode_glimpse", "gaussian_sample", "grad_check",
    "kl_diag_gaussian", "poisson_weights", "read_glimpse", "reconstruction_nll",
    "rollout", "variational_bound",
]
