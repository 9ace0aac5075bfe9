"""Hierarchical rater model: latent ability -> ideal score -> observed score.

The ideal-score stage is a multidimensional generalized partial credit model
with simple structure (each item loads on one latent dimension, one anchor
item per dimension fixed to unit loading).  The observed-score stage is a
signal-detection layer where a rater's category mass centers at the ideal
score plus the rater's bias and spreads with the rater's variability.
Estimation is Metropolis-within-Gibbs MCMC over multiple chains.
"""

from .model import HrmConfig, gpcm_probs, sdt_probs
from .draws import PosteriorDraws, load_draws, save_draws
from .sampler import fit
from .diagnostics import rhat, rhat_max
from .summaries import (FairnessContrast, RaterBiasSummary, fairness_contrast,
                        summarize_bias)

__all__ = [
    "HrmConfig", "gpcm_probs", "sdt_probs", "PosteriorDraws", "load_draws",
    "save_draws", "fit", "rhat", "rhat_max", "RaterBiasSummary",
    "FairnessContrast", "summarize_bias", "fairness_contrast",
]
