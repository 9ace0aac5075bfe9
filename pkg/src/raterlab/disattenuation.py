"""Cross-lesson correlation of same-teacher scores, corrected for the two
rater families' generalizabilities.

The raw statistic correlates, per teacher, one lesson scored by family A
with a different lesson scored by family B (random family members, lesson
means over segments).  Dividing by the geometric mean of the families'
generalizability coefficients estimates the latent correlation; values above
one are reported unclipped with a flag since nonrandom measurement error is
exactly what they indicate.  An item whose same-cell correlation is
materially positive while its disattenuated interval is incalculable or
spans zero is flagged spurious.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ._util import derive_rng
from .dataset import Dataset
from .errors import DataError

log = logging.getLogger(__name__)

LOW_N_TEACHERS = 10
SPURIOUS_PANEL_THRESHOLD = 0.1


@dataclass
class DisattenuationResult:
    item: str
    raw_corr: float = math.nan
    raw_ci: tuple[float, float] = (math.nan, math.nan)
    disattenuated: float = math.nan
    disattenuated_ci: tuple[float, float] = (math.nan, math.nan)
    n_teacher_pairs: int = 0
    spurious_flag: bool = False
    overunity_flag: bool = False
    incalculable: bool = False
    notes: tuple[str, ...] = field(default_factory=tuple)


def cross_lesson_pairs(ds: Dataset, item: str, family_a: str, family_b: str,
                       seed: int = 0, aggregate: str = "lesson_mean"
                       ) -> list[tuple[float, float]]:
    """One (family A score, family B score) pair per eligible teacher.

    Eligible teachers have two different lessons, one rated on the item by
    each family.  The lesson pair and one rater per family are drawn with a
    seeded generator; scores are the chosen rater's lesson mean over
    segments (or one seeded segment score with ``aggregate='segment'``).
    """
    if aggregate not in ("lesson_mean", "segment"):
        raise DataError(f"unknown aggregation {aggregate!r}")
    # (teacher, year) -> lesson -> rater -> [scores]
    table: dict[tuple, dict[str, dict[tuple, list[int]]]] = {}
    for rec in ds.by_item(item):
        if rec.family not in (family_a, family_b):
            continue
        lessons = table.setdefault((rec.teacher_id, rec.year), {})
        raters = lessons.setdefault(rec.observation_id, {})
        raters.setdefault((rec.family, rec.rater_id), []).append(rec.score)

    rng = derive_rng(seed, "cross-lesson", item, family_a, family_b)
    pairs: list[tuple[float, float]] = []
    for tkey in sorted(table):
        lessons = table[tkey]
        lessons_a = sorted(o for o, raters in lessons.items()
                           if any(f == family_a for f, _ in raters))
        lessons_b = sorted(o for o, raters in lessons.items()
                           if any(f == family_b for f, _ in raters))
        feasible = [(la, lb) for la in lessons_a for lb in lessons_b
                    if la != lb]
        if not feasible:
            continue
        la, lb = feasible[int(rng.integers(len(feasible)))]

        def draw_score(lesson: str, family: str) -> float:
            members = sorted(r for f, r in lessons[lesson] if f == family)
            rater = members[int(rng.integers(len(members)))]
            scores = lessons[lesson][(family, rater)]
            if aggregate == "segment":
                return float(scores[int(rng.integers(len(scores)))])
            return float(np.mean(scores))

        pairs.append((draw_score(la, family_a), draw_score(lb, family_b)))
    if 0 < len(pairs) < LOW_N_TEACHERS:
        log.warning("cross-lesson pairing for %s: only %d eligible teachers",
                    item, len(pairs))
    return pairs


def disattenuate(raw_corr: float, erho2_a: float, erho2_b: float) -> float:
    """Observed correlation divided by the geometric mean reliability.

    Callers must carry the over-unity flag downstream; values above one are
    meaningful output here, not errors.
    """
    if not (0.0 < erho2_a <= 1.0) or not (0.0 < erho2_b <= 1.0):
        raise DataError("incalculable due to low reliabilities")
    return raw_corr / math.sqrt(erho2_a * erho2_b)


def fisher_ci(r: float, n: int, alpha: float = 0.05) -> tuple[float, float]:
    """Normal-theory interval for a correlation via the z transform."""
    if n < 4 or abs(r) >= 1.0:
        return (math.nan, math.nan)
    z = math.atanh(r)
    half = stats.norm.ppf(1.0 - alpha / 2.0) / math.sqrt(n - 3)
    return (math.tanh(z - half), math.tanh(z + half))


def disattenuated_ci(pairs: list[tuple[float, float]], erho2_a: float,
                     erho2_b: float, B: int = 1000, alpha: float = 0.05,
                     seed: int = 0) -> tuple[tuple[float, float], int]:
    """Teacher-level percentile bootstrap of the disattenuated correlation.

    Teachers (pairs) are resampled with replacement, the raw correlation is
    recomputed, and the fixed plug-in reliabilities divide each replicate.
    Returns the interval and the count of degenerate replicates skipped.
    """
    if B < 500:
        raise DataError("disattenuated CI needs B >= 500")
    if not (0.0 < erho2_a <= 1.0) or not (0.0 < erho2_b <= 1.0):
        raise DataError("incalculable due to low reliabilities")
    n = len(pairs)
    if n < 3:
        raise DataError("need >= 3 teacher pairs")
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    denom = math.sqrt(erho2_a * erho2_b)
    values = []
    skipped = 0
    for rep in range(B):
        rng = derive_rng(seed, "disatten-boot", rep)
        idx = rng.integers(0, n, size=n)
        aa, bb = a[idx], b[idx]
        if np.var(aa) == 0.0 or np.var(bb) == 0.0:
            skipped += 1
            continue
        raw = float(np.corrcoef(aa, bb)[0, 1])
        values.append(raw / denom)
    if skipped:
        log.info("disattenuated CI: skipped %d degenerate resamples", skipped)
    if not values:
        raise DataError("all bootstrap resamples degenerate")
    lo, hi = np.quantile(np.array(values), [alpha / 2.0, 1.0 - alpha / 2.0])
    return (float(lo), float(hi)), skipped


def flag_spurious(panel_corr: float, disattenuated_interval: tuple[float, float],
                  incalculable: bool,
                  threshold: float = SPURIOUS_PANEL_THRESHOLD) -> bool:
    """Materially positive same-cell correlation with an uninformative
    cross-lesson interval is the spuriousness signature."""
    if math.isnan(panel_corr) or panel_corr < threshold:
        return False
    if incalculable:
        return True
    lo, hi = disattenuated_interval
    if math.isnan(lo) or math.isnan(hi):
        return True
    return lo <= 0.0 <= hi


def analyze_item(ds: Dataset, item: str, family_a: str, family_b: str,
                 erho2_a: float, erho2_b: float, B: int = 1000,
                 alpha: float = 0.05, seed: int = 0,
                 panel_corr: float = math.nan,
                 aggregate: str = "lesson_mean") -> DisattenuationResult:
    """Full per-item pipeline: pairs, raw and corrected correlations, flags.

    Reliabilities enter as plug-in point estimates (resampling them is a
    sensitivity analysis, not the default).
    """
    pairs = cross_lesson_pairs(ds, item, family_a, family_b, seed=seed,
                               aggregate=aggregate)
    notes = []
    if len(pairs) < LOW_N_TEACHERS:
        notes.append(f"low-n: {len(pairs)} eligible teachers")
    if len(pairs) < 3:
        return DisattenuationResult(item=item, n_teacher_pairs=len(pairs),
                                    incalculable=True,
                                    notes=tuple(notes + ["too few pairs"]))
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    if np.var(a) == 0.0 or np.var(b) == 0.0:
        return DisattenuationResult(item=item, n_teacher_pairs=len(pairs),
                                    incalculable=True,
                                    notes=tuple(notes + ["zero variance"]))
    raw = float(np.corrcoef(a, b)[0, 1])
    raw_ci = fisher_ci(raw, len(pairs), alpha)

    try:
        rho = disattenuate(raw, erho2_a, erho2_b)
        ci, _skipped = disattenuated_ci(pairs, erho2_a, erho2_b, B=max(B, 500),
                                        alpha=alpha, seed=seed)
        incalculable = False
    except DataError as exc:
        rho = math.nan
        ci = (math.nan, math.nan)
        incalculable = True
        notes.append(str(exc))

    spurious = flag_spurious(panel_corr, ci, incalculable)
    return DisattenuationResult(
        item=item, raw_corr=raw, raw_ci=raw_ci, disattenuated=rho,
        disattenuated_ci=ci, n_teacher_pairs=len(pairs),
        spurious_flag=spurious,
        overunity_flag=(not incalculable and abs(rho) > 1.0),
        incalculable=incalculable, notes=tuple(notes))
