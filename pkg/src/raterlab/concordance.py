"""Agreement and correlation panel with bootstrap confidence intervals.

Covers exact and within-one agreement, Cohen's kappa, quadratic weighted
kappa, Pearson/Spearman/Kendall correlations, and the two-stage intraclass
correlation from a one-way random-intercept model.  Undefined metrics are
surfaced as undefined results with a reason, never coerced to zero.

The bootstrap resamples the reference-rater assignment (a fresh derived seed
per replicate) and recomputes the metric, which is how segment-level
human-baseline panels are usually built for sparse multi-rater data.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import stats

from ._util import derive_seed
from .dataset import Dataset, paired_scores, sample_reference_raters
from .errors import DataError

log = logging.getLogger(__name__)


class Metric(str, Enum):
    PCT_AGREE = "pct_agree"
    PCT_AGREE_WITHIN1 = "pct_agree_within1"
    COHEN_KAPPA = "cohen_kappa"
    QWK = "qwk"
    PEARSON_R = "pearson_r"
    SPEARMAN_RHO = "spearman_rho"
    KENDALL_TAU = "kendall_tau"
    ICC = "icc"
    ADJ_ICC = "adj_icc"


AGREEMENT_METRICS = (Metric.PCT_AGREE, Metric.PCT_AGREE_WITHIN1,
                     Metric.COHEN_KAPPA, Metric.QWK)
CORRELATION_METRICS = (Metric.PEARSON_R, Metric.SPEARMAN_RHO,
                       Metric.KENDALL_TAU)


@dataclass
class MetricResult:
    metric: Metric
    estimate: float = math.nan
    ci_low: float = math.nan
    ci_high: float = math.nan
    n_pairs: int = 0
    defined: bool = True
    note: str = ""
    flags: tuple[str, ...] = field(default_factory=tuple)

    @staticmethod
    def undefined(metric: Metric, reason: str, n_pairs: int = 0) -> "MetricResult":
        return MetricResult(metric=metric, n_pairs=n_pairs, defined=False,
                            note=reason)


def _confusion(a: np.ndarray, b: np.ndarray, k: int) -> np.ndarray:
    m = np.zeros((k, k))
    np.add.at(m, (a - 1, b - 1), 1.0)
    return m


def agreement_metrics(pairs: list[tuple[int, int]], categories: int
                      ) -> dict[Metric, MetricResult]:
    """Exact/within-1 agreement, Cohen's kappa, and QWK for paired scores.

    Kappa uses the unweighted confusion matrix with marginal chance
    correction; QWK weights disagreement by (a-b)^2/(K-1)^2 with expected
    counts from marginal products.
    """
    if not pairs:
        reason = "no pairs"
        return {m: MetricResult.undefined(m, reason) for m in AGREEMENT_METRICS}
    a = np.array([p[0] for p in pairs], dtype=np.int64)
    b = np.array([p[1] for p in pairs], dtype=np.int64)
    k = int(categories)
    if a.min() < 1 or a.max() > k or b.min() < 1 or b.max() > k:
        raise DataError(f"scores outside 1..{k}")
    n = len(pairs)

    out: dict[Metric, MetricResult] = {}
    p_agree = float(np.mean(a == b))
    out[Metric.PCT_AGREE] = MetricResult(Metric.PCT_AGREE, p_agree, n_pairs=n)
    p_within = float(np.mean(np.abs(a - b) <= 1))
    out[Metric.PCT_AGREE_WITHIN1] = MetricResult(
        Metric.PCT_AGREE_WITHIN1, p_within, n_pairs=n)

    conf = _confusion(a, b, k)
    row = conf.sum(axis=1) / n
    col = conf.sum(axis=0) / n
    expected = np.outer(row, col) * n

    p_e = float(np.trace(expected)) / n
    if p_e >= 1.0 - 1e-12:
        out[Metric.COHEN_KAPPA] = MetricResult.undefined(
            Metric.COHEN_KAPPA,
            "degenerate marginals: chance agreement is 1", n)
    else:
        kappa = (p_agree - p_e) / (1.0 - p_e)
        out[Metric.COHEN_KAPPA] = MetricResult(Metric.COHEN_KAPPA, kappa,
                                               n_pairs=n)

    cats = np.arange(1, k + 1, dtype=float)
    w = (cats[:, None] - cats[None, :]) ** 2 / (k - 1) ** 2
    w_expected = float(np.sum(w * expected))
    if w_expected <= 1e-12:
        out[Metric.QWK] = MetricResult.undefined(
            Metric.QWK, "degenerate marginals: zero expected disagreement", n)
    else:
        qwk = 1.0 - float(np.sum(w * conf)) / w_expected
        out[Metric.QWK] = MetricResult(Metric.QWK, qwk, n_pairs=n)
    return out


def rank_correlations(pairs: list[tuple[float, float]]
                      ) -> dict[Metric, MetricResult]:
    """Pearson on raw values, Spearman on average ranks, Kendall tau-b."""
    n = len(pairs)
    if n < 3:
        reason = f"need >= 3 pairs, got {n}"
        return {m: MetricResult.undefined(m, reason, n)
                for m in CORRELATION_METRICS}
    a = np.array([p[0] for p in pairs], dtype=float)
    b = np.array([p[1] for p in pairs], dtype=float)
    if np.var(a) == 0.0 or np.var(b) == 0.0:
        reason = "zero variance on one side"
        return {m: MetricResult.undefined(m, reason, n)
                for m in CORRELATION_METRICS}
    out = {}
    out[Metric.PEARSON_R] = MetricResult(
        Metric.PEARSON_R, float(stats.pearsonr(a, b).statistic), n_pairs=n)
    out[Metric.SPEARMAN_RHO] = MetricResult(
        Metric.SPEARMAN_RHO, float(stats.spearmanr(a, b).statistic), n_pairs=n)
    out[Metric.KENDALL_TAU] = MetricResult(
        Metric.KENDALL_TAU, float(stats.kendalltau(a, b).statistic), n_pairs=n)
    return out


def icc(scores: list[tuple[str, float]], n_l: int = 1) -> MetricResult:
    """Intraclass correlation from lesson values nested within teachers.

    Fits the one-way random-intercept model with the shared REML engine and
    returns var(teacher) / (var(teacher) + var(residual) / n_l); n_l = 6
    gives the adjusted variant.
    """
    from . import gtheory  # local import: gtheory does not import back

    if n_l < 1:
        raise DataError("n_l must be >= 1")
    teachers = {t for t, _ in scores}
    if len(teachers) < 2:
        raise DataError("ICC needs >= 2 teachers")
    y = np.array([v for _, v in scores], dtype=float)
    keys = [t for t, _ in scores]
    vc = gtheory.reml_fit(y, {"teacher": keys}, design_name="one-way")
    v_mu = vc.components["teacher"]
    v_eps = vc.components["residual"]
    metric = Metric.ICC if n_l == 1 else Metric.ADJ_ICC
    denom = v_mu + v_eps / n_l
    if v_mu <= 0.0 or denom <= 0.0:
        return MetricResult(metric, 0.0, n_pairs=len(scores),
                            flags=("degenerate",),
                            note="zero between-teacher variance")
    return MetricResult(metric, v_mu / denom, n_pairs=len(scores))


def icc_from_components(var_mu: float, var_eps: float, n_l: int = 1) -> float:
    """Plug-in two-stage ICC for already-known variance components."""
    denom = var_mu + var_eps / n_l
    if var_mu <= 0.0 or denom <= 0.0:
        return 0.0
    return var_mu / denom


def _lesson_values(ds: Dataset, reference: dict, family: str,
                   item_id: str | None, seed: int) -> list[tuple[str, float]]:
    """Teacher-lesson scores for ICC: mean of the sampled family member's
    ratings per observation (reference human for the human family)."""
    from ._util import derive_rng
    from .dataset import HUMAN_FAMILY

    per_obs: dict[tuple[str, str], list[float]] = {}
    if family == HUMAN_FAMILY:
        chosen = reference
        for rec in ds.records:
            if rec.family != family:
                continue
            if item_id is not None and rec.item_id != item_id:
                continue
            if chosen.get(rec.cell) != rec.rater_id:
                continue
            per_obs.setdefault((rec.teacher_id, rec.observation_id),
                               []).append(float(rec.score))
    else:
        rng = derive_rng(seed, "icc-member", family, item_id or "*")
        by_cell: dict[tuple, list] = {}
        for rec in ds.records:
            if rec.family != family:
                continue
            if item_id is not None and rec.item_id != item_id:
                continue
            by_cell.setdefault(rec.cell, []).append(rec)
        for cell in sorted(by_cell):
            recs = sorted(by_cell[cell], key=lambda r: r.rater_id)
            rec = recs[int(rng.integers(len(recs)))]
            per_obs.setdefault((rec.teacher_id, rec.observation_id),
                               []).append(float(rec.score))
    return [(t, float(np.mean(vals)))
            for (t, _o), vals in sorted(per_obs.items())]


def _metric_once(ds: Dataset, metric: Metric, family: str,
                 item_id: str | None, seed: int) -> MetricResult:
    reference = sample_reference_raters(ds, seed)
    if metric in (Metric.ICC, Metric.ADJ_ICC):
        values = _lesson_values(ds, reference, family, item_id,
                                derive_seed(seed, "icc-member"))
        if len({t for t, _ in values}) < 2:
            return MetricResult.undefined(metric, "fewer than 2 teachers")
        return icc(values, n_l=1 if metric == Metric.ICC else 6)
    pairs = paired_scores(ds, reference, family, item_id=item_id,
                          seed=derive_seed(seed, "pairing"))
    if metric in AGREEMENT_METRICS:
        if item_id is not None:
            k = ds.scale[item_id].category_count
        else:
            k = max(s.category_count for s in ds.scale.values())
        return agreement_metrics(pairs, k)[metric]
    return rank_correlations([(float(x), float(y)) for x, y in pairs])[metric]


def bootstrap_ci(ds: Dataset, metric: Metric | str, family: str, B: int = 1000,
                 seed: int = 0, alpha: float = 0.05,
                 item_id: str | None = None) -> MetricResult:
    """Bootstrap a metric over re-drawn reference-rater assignments.

    Replicate b uses the seed derived from (seed, b), so results are
    independent of evaluation order and thread count.  The estimate is the
    replicate mean, the CI the empirical alpha/2 and 1-alpha/2 percentiles.
    If more than half the replicates are undefined the result is undefined
    and carries the failure count.
    """
    metric = Metric(metric)
    if B < 100:
        raise DataError("bootstrap needs B >= 100")
    values = []
    n_failed = 0
    n_pairs = 0
    for b in range(B):
        res = _metric_once(ds, metric, family, item_id,
                           derive_seed(seed, "bootstrap", b))
        if res.defined and not math.isnan(res.estimate):
            values.append(res.estimate)
            n_pairs = max(n_pairs, res.n_pairs)
        else:
            n_failed += 1
    if n_failed > B // 2:
        return MetricResult.undefined(
            metric, f"metric undefined in {n_failed}/{B} replicates")
    arr = np.array(values)
    lo, hi = np.quantile(arr, [alpha / 2.0, 1.0 - alpha / 2.0])
    return MetricResult(metric, float(np.mean(arr)), float(lo), float(hi),
                        n_pairs=n_pairs,
                        note=f"B={B - n_failed} defined replicates")
