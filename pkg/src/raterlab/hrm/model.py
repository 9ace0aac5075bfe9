"""Probability stages and configuration of the hierarchical rater model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError

PSI2_FLOOR = 1e-8


def gpcm_probs(theta_row, alpha_row, gamma_steps) -> np.ndarray:
    """Category probabilities of the generalized partial credit stage.

    ``P(k) ~ exp{(k-1) * (alpha . theta) - sum_{h<=k} gamma_h}`` over
    k = 1..K, with the first step difficulty fixed at zero.  The exponent is
    max-subtracted so large discriminations cannot overflow.
    """
    theta_row = np.atleast_1d(np.asarray(theta_row, dtype=float))
    alpha_row = np.atleast_1d(np.asarray(alpha_row, dtype=float))
    gamma_steps = np.asarray(gamma_steps, dtype=float)
    k = len(gamma_steps)
    if k < 2:
        raise DataError("gpcm needs K >= 2 categories")
    if gamma_steps[0] != 0.0:
        raise DataError("first step difficulty must be 0 (identification)")
    a_dot = float(alpha_row @ theta_row)
    logw = np.arange(k) * a_dot - np.cumsum(gamma_steps)
    logw -= logw.max()
    w = np.exp(logw)
    return w / w.sum()


def sdt_probs(xi: int, phi: float, psi2: float, K: int) -> np.ndarray:
    """Category probabilities of the rater detection stage.

    Mass centers at the ideal score plus the rater bias and spreads with the
    rater variance; below the variance floor the distribution degenerates to
    the category nearest the center (ties resolve to the lower category).
    """
    if K < 2:
        raise DataError("sdt needs K >= 2 categories")
    if not 1 <= xi <= K:
        raise DataError(f"ideal score {xi} outside 1..{K}")
    center = xi + phi
    if psi2 < PSI2_FLOOR:
        k_star = int(min(max(math.ceil(center - 0.5), 1), K))
        out = np.zeros(K)
        out[k_star - 1] = 1.0
        return out
    cats = np.arange(1, K + 1, dtype=float)
    logw = -((cats - center) ** 2) / (2.0 * psi2)
    logw -= logw.max()
    w = np.exp(logw)
    return w / w.sum()


@dataclass
class HrmConfig:
    """Sampler and prior settings.

    ``covariate`` switches rater bias/variability to per-attribute-level
    parameters; ``freeze_true_scores`` holds ideal scores and all teacher and
    item parameters at values from a prior fit while only rater parameters
    are sampled.  ``anchor_items`` may pin which item anchors each dimension
    (default: first item of the dimension in sorted order).
    """
    chains: int = 4
    iterations: int = 2000
    burn_in: int = 1000
    thin: int = 1
    seed: int = 0
    covariate: str | None = None
    families: tuple[str, ...] | None = None
    freeze_true_scores: bool = False
    anchor_items: dict[int, str] = field(default_factory=dict)
    # prior hyperparameters
    prec_shape: float = 1.0
    prec_rate: float = 1.0
    var_alpha: float = 1.0
    var_gamma: float = 4.0
    wishart_df: int | None = None  # defaults to M + 1
    adapt_window: int = 50

    def validate(self) -> None:
        if self.chains < 2:
            raise DataError("need >= 2 chains for convergence diagnostics")
        if not 0 <= self.burn_in < self.iterations:
            raise DataError("burn_in must be in [0, iterations)")
        if self.thin < 1:
            raise DataError("thin must be >= 1")
        if self.freeze_true_scores:
            pass  # frozen values are supplied to fit() directly

    def digest_payload(self) -> dict:
        return {
            "chains": self.chains, "iterations": self.iterations,
            "burn_in": self.burn_in, "thin": self.thin, "seed": self.seed,
            "covariate": self.covariate, "families": self.families,
            "freeze_true_scores": self.freeze_true_scores,
            "anchor_items": {str(k): v for k, v in self.anchor_items.items()},
            "prec_shape": self.prec_shape, "prec_rate": self.prec_rate,
            "var_alpha": self.var_alpha, "var_gamma": self.var_gamma,
            "wishart_df": self.wishart_df,
        }
