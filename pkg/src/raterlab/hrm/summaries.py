"""Posterior summaries: per-rater bias/variability and fairness contrasts."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import DataError
from .draws import PosteriorDraws


@dataclass
class RaterBiasSummary:
    rater_id: str
    item_id: str
    level: str
    phi_mean: float
    phi_lo: float
    phi_hi: float
    psi_mean: float
    severity: str  # severe | neutral | lenient


@dataclass
class FairnessContrast:
    rater_id: str
    item_id: str
    delta_mean: float
    delta_lo: float
    delta_hi: float
    independence_violation: bool
    note: str = ""


def _group_table(draws: PosteriorDraws):
    labels = draws.labels["group"]
    ident = np.array(draws.meta.get("identified", [1] * len(labels)),
                     dtype=bool)
    items = draws.labels["item"]
    levels = draws.labels["level"]
    item_idx = {j: i for i, j in enumerate(items)}
    level_idx = {l: i for i, l in enumerate(levels)}
    return labels, ident, item_idx, level_idx


def summarize_bias(draws: PosteriorDraws, alpha: float = 0.05
                   ) -> list[RaterBiasSummary]:
    """Drawwise bias summaries, centered at the item-level detection effect.

    Each group's bias draws have the matching item(-level) mean subtracted
    draw by draw before summarizing, so the reported bias is the rater's own
    deviation.  Severity uses the half-standard-deviation rule on the
    across-rater spread of posterior means.
    """
    labels, ident, item_idx, level_idx = _group_table(draws)
    phi = draws.flat("phi")          # (draws, groups)
    eta = draws.flat("eta")          # (draws, items, levels)
    psi = np.sqrt(np.exp(draws.flat("log_psi2")))

    means, los, his, psis, keep = [], [], [], [], []
    for g, (rid, jid, lvl) in enumerate(labels):
        if not ident[g]:
            continue
        centered = phi[:, g] - eta[:, item_idx[jid], level_idx[lvl]]
        means.append(float(np.mean(centered)))
        lo, hi = np.quantile(centered, [alpha / 2, 1 - alpha / 2])
        los.append(float(lo))
        his.append(float(hi))
        psis.append(float(np.mean(psi[:, g])))
        keep.append((rid, jid, lvl))

    spread = float(np.std(means)) if len(means) > 1 else 0.0
    threshold = 0.5 * spread
    out = []
    for (rid, jid, lvl), m, lo, hi, pv in zip(keep, means, los, his, psis):
        if threshold > 0 and m <= -threshold:
            sev = "severe"
        elif threshold > 0 and m >= threshold:
            sev = "lenient"
        else:
            sev = "neutral"
        out.append(RaterBiasSummary(rater_id=rid, item_id=jid, level=lvl,
                                    phi_mean=m, phi_lo=lo, phi_hi=hi,
                                    psi_mean=pv, severity=sev))
    return out


def fairness_contrast(draws: PosteriorDraws, level_a: str = "B",
                      level_b: str = "W", alpha: float = 0.05
                      ) -> list[FairnessContrast]:
    """Drawwise bias difference between two attribute levels per rater-item.

    The contrast is computed draw by draw (never as a difference of
    summaries); a rater-item pair with either level unidentified is reported
    with a note instead of a number.
    """
    if draws.meta.get("covariate") is None:
        raise DataError("fairness contrasts need a covariate-mode fit")
    labels, ident, _item_idx, _level_idx = _group_table(draws)
    levels = {lvl for _, _, lvl in labels}
    if level_a not in levels or level_b not in levels:
        raise DataError(f"levels {level_a!r}/{level_b!r} not present")
    phi = draws.flat("phi")
    pos = {(rid, jid, lvl): g for g, (rid, jid, lvl) in enumerate(labels)}
    pairs = sorted({(rid, jid) for rid, jid, _ in labels})
    out = []
    for rid, jid in pairs:
        ga = pos.get((rid, jid, level_a))
        gb = pos.get((rid, jid, level_b))
        if ga is None or gb is None or not ident[ga] or not ident[gb]:
            out.append(FairnessContrast(
                rater_id=rid, item_id=jid, delta_mean=math.nan,
                delta_lo=math.nan, delta_hi=math.nan,
                independence_violation=False,
                note=f"unidentified: no records for some of "
                     f"{level_a}/{level_b}"))
            continue
        delta = phi[:, ga] - phi[:, gb]
        lo, hi = np.quantile(delta, [alpha / 2, 1 - alpha / 2])
        out.append(FairnessContrast(
            rater_id=rid, item_id=jid, delta_mean=float(np.mean(delta)),
            delta_lo=float(lo), delta_hi=float(hi),
            independence_violation=bool(lo > 0.0 or hi < 0.0)))
    return out
