"""MCMC convergence diagnostics."""

from __future__ import annotations

import numpy as np

from ..errors import DataError
from .draws import PosteriorDraws


def split_rhat(chains: np.ndarray) -> float:
    """Split-chain potential scale reduction factor for one scalar parameter.

    ``chains`` has shape (n_chains, n_draws).  Each chain is halved, and the
    classic between/within variance ratio is computed over the 2C half
    chains.  Constant chains report exactly 1.0 (zero-variance note applies).
    """
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2:
        raise DataError("split_rhat expects (chains, draws)")
    c, n = chains.shape
    if c < 2:
        raise DataError("need >= 2 chains")
    if n < 4:
        raise DataError("need >= 4 draws per chain")
    half = n // 2
    halves = np.concatenate([chains[:, :half], chains[:, half:2 * half]],
                            axis=0)
    m, nn = halves.shape
    w = float(np.mean(np.var(halves, axis=1, ddof=1)))
    means = halves.mean(axis=1)
    b = nn * float(np.var(means, ddof=1))
    if w <= 0.0:
        return 1.0
    var_plus = (nn - 1) / nn * w + b / nn
    return float(np.sqrt(var_plus / w))


def rhat(draws: PosteriorDraws, parameter: str) -> np.ndarray:
    """Split R-hat for every scalar component of one stored parameter."""
    if parameter not in draws.arrays:
        raise DataError(f"unknown parameter {parameter!r}")
    arr = draws.arrays[parameter].astype(float)
    c, n = arr.shape[0], arr.shape[1]
    if n < 50:
        raise DataError("need >= 50 post-burn-in draws per chain")
    flatshape = int(np.prod(arr.shape[2:])) if arr.ndim > 2 else 1
    flat = arr.reshape(c, n, flatshape)
    return np.array([split_rhat(flat[:, :, i]) for i in range(flatshape)])


def rhat_max(draws: PosteriorDraws,
             parameters: list[str] | None = None,
             identified_only: bool = True) -> float:
    """Largest split R-hat across stored parameters.

    Unidentified rater groups sit at their initial zeros and are skipped
    when ``identified_only`` (they carry no information to diagnose).
    """
    params = parameters if parameters is not None else draws.param_names()
    ident = draws.meta.get("identified")
    worst = 1.0
    for name in params:
        if name == "xi":
            continue  # discrete; diagnose continuous parameters
        values = rhat(draws, name)
        if (ident is not None and name in ("phi", "log_psi2")
                and identified_only and len(values) == len(ident)):
            values = values[np.array(ident, dtype=bool)]
        if len(values):
            worst = max(worst, float(np.max(values)))
    return worst
