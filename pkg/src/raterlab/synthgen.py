"""Synthetic rating datasets with known generative parameters.

Two modes mirror the two estimation tracks:

* g-study mode runs the nested variance-components model forward: per-facet
  Gaussian effects are summed and the continuous score is discretized by
  round-and-clamp onto 1..K.  Each effect vector is standardized so its
  realized (ddof=1) variance equals the planted value exactly, which makes
  recovery tests meaningful at finite facet counts; the oracle records the
  planted variances and the analytic generalizability/dependability ratios.
* rater-model mode samples latent abilities, draws ideal scores through the
  partial-credit stage, and observed scores through the rater detection
  stage with planted biases (plus per-attribute offsets in covariate mode).

Generation is a pure function of the spec (seed included).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._util import derive_rng, write_csv, write_json
from .dataset import (ATTRIBUTES_HEADER, RATINGS_HEADER, ROSTER_HEADER,
                      Dataset, RatingRecord, ScaleSpec, TeacherAttributes)
from .errors import DataError

log = logging.getLogger(__name__)

SHARED_TERMS = ("i", "o:i", "s:o:i")
FAMILY_TERMS = ("r", "ir", "residual")


@dataclass
class FamilySpec:
    """One rater family in g-study mode: its pool and variance structure."""
    n_raters: int = 4
    loadings: dict[str, float] = field(default_factory=dict)   # on shared terms
    variances: dict[str, float] | None = None                  # r, ir, residual


@dataclass
class GStudySpec:
    teachers: int = 50
    lessons_per_teacher: int = 4
    segments_per_lesson: int = 2
    items: int = 1
    categories: int = 81
    mu: float = 41.0
    score_scale: float = 4.0
    variances: dict[str, float] = field(default_factory=lambda: {
        "i": 2.0, "o:i": 1.0, "s:o:i": 1.0, "r": 2.0, "ir": 1.0,
        "residual": 1.0})
    families: dict[str, FamilySpec] = field(
        default_factory=lambda: {"human": FamilySpec()})
    raters_per_cell: int | None = None   # None = dense crossing
    standardize: bool = True
    moment_exact: bool = True   # exact per-stratum moments (dense single family)
    seed: int = 0


@dataclass
class HrmSynthSpec:
    teachers: int = 40
    lessons_per_teacher: int = 2
    segments_per_lesson: int = 2
    categories: tuple[int, ...] = (3, 3, 3, 3)
    dimensions: tuple[int, ...] = (1, 1, 1, 1)
    alpha: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    gamma: tuple[tuple[float, ...], ...] | None = None  # per item, len K-1
    lesson_sd: float = 0.3
    raters: dict[str, str] = field(default_factory=lambda: {
        f"h{i}": "human" for i in range(1, 6)})
    phi: dict[str, float] = field(default_factory=dict)
    psi: dict[str, float] = field(default_factory=dict)
    covariate: str | None = None
    level_probs: dict[str, float] = field(default_factory=dict)
    delta: dict[tuple[str, str], float] = field(default_factory=dict)
    raters_per_cell: int | None = None
    seed: int = 0


def _effects(rng: np.random.Generator, size: int, variance: float,
             standardize: bool) -> np.ndarray:
    if variance <= 0.0 or size == 0:
        return np.zeros(size)
    draws = rng.normal(0.0, np.sqrt(variance), size)
    if not standardize or size < 2:
        return draws
    draws = draws - draws.mean()
    sd = draws.std(ddof=1)
    if sd == 0.0:
        return draws
    return draws * (np.sqrt(variance) / sd)


# ---------------------------------------------------------------------------
# moment-exact construction on the balanced dense grid
#
# On a complete (teacher x lesson x segment) x rater grid, the ANOVA strata
# are the mutually orthogonal mean-difference subspaces of the two crossed
# nesting chains.  Planting each effect so that its component in every
# stratum carries exactly the expected sum of squares (and is orthogonal to
# the other effects there) makes the balanced-design REML solution equal the
# planted variances up to discretization, which is what a recovery oracle
# should pin down.
# ---------------------------------------------------------------------------

# level lattice: left chain 0=grand,1=teacher,2=lesson,3=segment; right 0/1=rater
_LEFT_AXES = {0: (0, 1, 2), 1: (1, 2), 2: (2,), 3: ()}
_STRATA = [(lv, rv) for lv in range(4) for rv in range(2)]

_TERM_GRIDS = {
    "i": (1, 0), "o:i": (2, 0), "s:o:i": (3, 0),
    "r": (0, 1), "ir": (1, 1), "residual": (3, 1),
}


def _level_mean(v: np.ndarray, left: int, right: int) -> np.ndarray:
    axes = _LEFT_AXES[left] + ((3,) if right == 0 else ())
    if not axes:
        return v
    return v.mean(axis=axes, keepdims=True)


def _stratum_component(v: np.ndarray, left: int, right: int) -> np.ndarray:
    """Orthogonal increment of the (left, right) lattice level."""
    cur = _level_mean(v, left, right)
    if left > 0:
        cur = cur - _level_mean(v, left - 1, right)
    if right > 0:
        up = _level_mean(v, left, 0)
        if left > 0:
            up = up - _level_mean(v, left - 1, 0)
        cur = cur - up
    return np.broadcast_to(cur, v.shape)


def _expand(term: str, values: np.ndarray, shape: tuple) -> np.ndarray:
    t, o, s, r = shape
    if term == "i":
        return np.broadcast_to(values.reshape(t, 1, 1, 1), shape).copy()
    if term == "o:i":
        return np.broadcast_to(values.reshape(t, o, 1, 1), shape).copy()
    if term == "s:o:i":
        return np.broadcast_to(values.reshape(t, o, s, 1), shape).copy()
    if term == "r":
        return np.broadcast_to(values.reshape(1, 1, 1, r), shape).copy()
    if term == "ir":
        return np.broadcast_to(values.reshape(t, 1, 1, r), shape).copy()
    return values.reshape(shape).copy()


def _stratum_coefficient(term: str, left: int, right: int,
                         shape: tuple) -> float:
    """tr(Z' P Z)/q for the term at one stratum, via balance symmetry."""
    t, o, s, r = shape
    sizes = {"i": t, "o:i": t * o, "s:o:i": t * o * s, "r": r, "ir": t * r,
             "residual": t * o * s * r}
    probe = np.zeros(sizes[term])
    probe[0] = 1.0
    z = _expand(term, probe, shape)
    comp = _stratum_component(z, left, right)
    return float(np.sum(comp * comp)) * sizes[term]


def _moment_exact_field(rng: np.random.Generator, variances: dict[str, float],
                        shape: tuple) -> np.ndarray:
    """Sum of effect fields whose per-stratum moments match expectation."""
    t, o, s, r = shape
    terms = [tm for tm in _TERM_GRIDS if variances.get(tm, 0.0) > 0.0]
    sizes = {"i": t, "o:i": t * o, "s:o:i": t * o * s, "r": r, "ir": t * r,
             "residual": t * o * s * r}
    fields = {tm: _expand(tm, rng.standard_normal(sizes[tm]), shape)
              for tm in terms}
    total = np.zeros(shape)
    for left, right in _STRATA:
        if (left, right) == (0, 0):
            continue  # grand mean is the planted mu
        kept: list[np.ndarray] = []
        for tm in terms:
            gl, gr = _TERM_GRIDS[tm]
            if left > gl or right > gr:
                continue  # term is constant within this stratum
            comp = _stratum_component(fields[tm], left, right)
            flat = comp.reshape(-1).copy()
            for prev in kept:
                flat -= (prev @ flat) / (prev @ prev) * prev
            target = variances[tm] * _stratum_coefficient(tm, left, right,
                                                          shape)
            norm2 = float(flat @ flat)
            if target <= 0.0 or norm2 <= 1e-12:
                continue
            flat *= np.sqrt(target / norm2)
            kept.append(flat)
            total += flat.reshape(shape)
    return total


def analytic_coefficients(variances: dict[str, float],
                          loadings: dict[str, float] | None = None
                          ) -> tuple[float, float]:
    """Generalizability and dependability implied by planted variances."""
    lo = loadings or {}
    v = {t: variances.get(t, 0.0) * lo.get(t, 1.0) ** 2
         for t in SHARED_TERMS} | {t: variances.get(t, 0.0)
                                   for t in FAMILY_TERMS}
    rel = v["o:i"] + v["s:o:i"] + variances.get("ir", 0.0) + v["residual"]
    denom_rel = v["i"] + rel
    denom_abs = denom_rel + v["r"]
    erho2 = v["i"] / denom_rel if denom_rel > 0 else 0.0
    phi = v["i"] / denom_abs if denom_abs > 0 else 0.0
    return erho2, phi


def gen_gstudy_dataset(spec: GStudySpec) -> tuple[Dataset, dict]:
    """Forward-run the variance model and return (dataset, oracle summary)."""
    rng = derive_rng(spec.seed, "synth-gstudy")
    nt, no, ns = spec.teachers, spec.lessons_per_teacher, spec.segments_per_lesson
    k = spec.categories
    teachers = [f"t{t + 1:04d}" for t in range(nt)]

    scale = {f"item{j + 1}": ScaleSpec(item_id=f"item{j + 1}",
                                       category_count=k, dimension=1)
             for j in range(spec.items)}
    roster: dict[str, str] = {}
    for fam in sorted(spec.families):
        fspec = spec.families[fam]
        for ridx in range(fspec.n_raters):
            roster[f"{fam}_r{ridx + 1:03d}"] = fam

    only_family = next(iter(spec.families.values())) \
        if len(spec.families) == 1 else None
    use_moments = (spec.moment_exact and spec.raters_per_cell is None
                   and only_family is not None
                   and not only_family.loadings
                   and only_family.variances is None)

    records: list[RatingRecord] = []
    n_clamped = 0
    n_total = 0
    if use_moments:
        fam = next(iter(spec.families))
        nr = only_family.n_raters
        rater_ids = [f"{fam}_r{ridx + 1:03d}" for ridx in range(nr)]
        for item_id in sorted(scale):
            field_ = _moment_exact_field(rng, spec.variances,
                                         (nt, no, ns, nr))
            raw = spec.mu + spec.score_scale * field_
            scores = np.rint(raw).astype(np.int64)
            n_clamped += int(np.sum((scores < 1) | (scores > k)))
            n_total += scores.size
            scores = np.clip(scores, 1, k)
            for t in range(nt):
                for o in range(no):
                    for s in range(ns):
                        for ridx in range(nr):
                            records.append(RatingRecord(
                                rater_id=rater_ids[ridx], family=fam,
                                teacher_id=teachers[t], year="y1",
                                observation_id=f"{teachers[t]}_L{o + 1}",
                                segment_index=s + 1, item_id=item_id,
                                score=int(scores[t, o, s, ridx])))
        return _finish_gstudy(spec, records, scale, roster,
                              n_clamped, n_total)

    for item_id in sorted(scale):
        shared = {
            "i": _effects(rng, nt, spec.variances.get("i", 0.0),
                          spec.standardize),
            "o:i": _effects(rng, nt * no, spec.variances.get("o:i", 0.0),
                            spec.standardize),
            "s:o:i": _effects(rng, nt * no * ns,
                              spec.variances.get("s:o:i", 0.0),
                              spec.standardize),
        }
        for fam in sorted(spec.families):
            fspec = spec.families[fam]
            fvar = dict(spec.variances) | dict(fspec.variances or {})
            nr = fspec.n_raters
            rater_ids = [f"{fam}_r{ridx + 1:03d}" for ridx in range(nr)]
            eff_r = _effects(rng, nr, fvar.get("r", 0.0), spec.standardize)
            eff_ir = _effects(rng, nt * nr, fvar.get("ir", 0.0),
                              spec.standardize)
            lo = {t: fspec.loadings.get(t, 1.0) for t in SHARED_TERMS}

            cells = []  # (t, o, s, list of rater indices)
            for t in range(nt):
                for o in range(no):
                    for s in range(ns):
                        if spec.raters_per_cell is None:
                            chosen = list(range(nr))
                        else:
                            m = min(spec.raters_per_cell, nr)
                            chosen = sorted(rng.choice(nr, size=m,
                                                       replace=False))
                        cells.append((t, o, s, chosen))
            n_rec = sum(len(c[3]) for c in cells)
            eps = _effects(rng, n_rec, fvar.get("residual", 0.0),
                           spec.standardize)
            pos = 0
            for t, o, s, chosen in cells:
                base = (lo["i"] * shared["i"][t]
                        + lo["o:i"] * shared["o:i"][t * no + o]
                        + lo["s:o:i"] * shared["s:o:i"][(t * no + o) * ns + s])
                for ridx in chosen:
                    cont = (base + eff_r[ridx] + eff_ir[t * nr + ridx]
                            + eps[pos])
                    pos += 1
                    raw = spec.mu + spec.score_scale * cont
                    score = int(round(raw))
                    if score < 1 or score > k:
                        n_clamped += 1
                        score = min(max(score, 1), k)
                    n_total += 1
                    records.append(RatingRecord(
                        rater_id=rater_ids[ridx], family=fam,
                        teacher_id=teachers[t], year="y1",
                        observation_id=f"{teachers[t]}_L{o + 1}",
                        segment_index=s + 1, item_id=item_id, score=score))

    return _finish_gstudy(spec, records, scale, roster, n_clamped, n_total)


def _finish_gstudy(spec: GStudySpec, records, scale, roster,
                   n_clamped: int, n_total: int) -> tuple[Dataset, dict]:
    clamp_frac = n_clamped / max(n_total, 1)
    if clamp_frac > 0.8:
        log.warning("discretization clamped %.1f%% of scores: categories too "
                    "few for the planted variance", 100 * clamp_frac)

    oracle = {
        "mode": "gstudy",
        "seed": spec.seed,
        "variances": spec.variances,
        "score_scale": spec.score_scale,
        "mu": spec.mu,
        "clamped_fraction": clamp_frac,
        "families": {},
    }
    for fam in sorted(spec.families):
        fspec = spec.families[fam]
        fvar = dict(spec.variances) | dict(fspec.variances or {})
        erho2, phi = analytic_coefficients(fvar, fspec.loadings)
        oracle["families"][fam] = {
            "erho2": erho2, "phi": phi,
            "loadings": {t: fspec.loadings.get(t, 1.0) for t in SHARED_TERMS},
            "variances": fvar,
        }
    ds = Dataset.build(records, scale, roster,
                       provenance={"bundle": f"synth-gstudy-{spec.seed}"})
    return ds, oracle


def gen_oneway_values(teachers: int, per_teacher: int, var_between: float,
                      var_within: float, seed: int = 0,
                      moment_exact: bool = True
                      ) -> list[tuple[str, float]]:
    """Balanced one-way (teacher, value) data with exact planted variances.

    Feed straight into the intraclass-correlation fit; with moment-exact
    construction the one-way mean squares match their expectations so the
    fitted components equal the planted ones.
    """
    rng = derive_rng(seed, "synth-oneway")
    variances = {"i": var_between, "residual": var_within}
    if moment_exact:
        field_ = _moment_exact_field(rng, variances,
                                     (teachers, per_teacher, 1, 1))
        values = field_.reshape(teachers, per_teacher)
    else:
        u = _effects(rng, teachers, var_between, True)
        e = _effects(rng, teachers * per_teacher, var_within, True)
        values = u[:, None] + e.reshape(teachers, per_teacher)
    return [(f"t{t + 1:04d}", float(values[t, o]))
            for t in range(teachers) for o in range(per_teacher)]


def gen_hrm_dataset(spec: HrmSynthSpec
                    ) -> tuple[Dataset, TeacherAttributes, dict]:
    """Forward-run the rater model; the oracle carries every planted value."""
    from .hrm.model import gpcm_probs, sdt_probs

    rng = derive_rng(spec.seed, "synth-hrm")
    nt, no, ns = spec.teachers, spec.lessons_per_teacher, spec.segments_per_lesson
    j = len(spec.categories)
    if len(spec.dimensions) != j or len(spec.alpha) != j:
        raise DataError("categories, dimensions, alpha must align")
    m = max(spec.dimensions)
    gamma = spec.gamma
    if gamma is None:
        gamma = tuple(tuple(0.0 for _ in range(kj - 1))
                      for kj in spec.categories)

    teachers = [f"t{t + 1:04d}" for t in range(nt)]
    rater_ids = sorted(spec.raters)
    phi = {r: spec.phi.get(r, 0.0) for r in rater_ids}
    psi = {r: spec.psi.get(r, 1.0) for r in rater_ids}

    attr_values: dict[str, dict[str, str]] = {}
    level_of: dict[str, str] = {}
    if spec.covariate:
        names = sorted(spec.level_probs)
        probs = np.array([spec.level_probs[n] for n in names])
        if abs(probs.sum() - 1.0) > 1e-9:
            raise DataError("attribute level probabilities must sum to 1")
        for t in teachers:
            lvl = names[int(rng.choice(len(names), p=probs))]
            level_of[t] = lvl
            attr_values[t] = {spec.covariate: lvl}

    big_theta = rng.normal(0.0, 1.0, (nt, m))
    theta = np.zeros((nt, no, m))
    xi = np.zeros((nt, no, j), dtype=np.int64)
    for t in range(nt):
        for o in range(no):
            theta[t, o] = big_theta[t] + rng.normal(0.0, spec.lesson_sd, m)
            for ji in range(j):
                dim = spec.dimensions[ji] - 1
                alpha_row = np.zeros(m)
                alpha_row[dim] = spec.alpha[ji]
                steps = np.array([0.0, *gamma[ji]])
                p = gpcm_probs(theta[t, o], alpha_row, steps)
                xi[t, o, ji] = 1 + int(rng.choice(len(p), p=p))

    scale = {f"item{ji + 1}": ScaleSpec(item_id=f"item{ji + 1}",
                                        category_count=spec.categories[ji],
                                        dimension=spec.dimensions[ji])
             for ji in range(j)}
    roster = {r: spec.raters[r] for r in rater_ids}

    records: list[RatingRecord] = []
    for t in range(nt):
        for o in range(no):
            obs_id = f"{teachers[t]}_L{o + 1}"
            for s in range(ns):
                if spec.raters_per_cell is None:
                    chosen = rater_ids
                else:
                    mcell = min(spec.raters_per_cell, len(rater_ids))
                    idx = sorted(rng.choice(len(rater_ids), size=mcell,
                                            replace=False))
                    chosen = [rater_ids[i] for i in idx]
                for r in chosen:
                    for ji in range(j):
                        kj = spec.categories[ji]
                        bias = phi[r]
                        if spec.covariate and (r, level_of[teachers[t]]) in \
                                spec.delta:
                            bias = bias + spec.delta[(r, level_of[teachers[t]])]
                        p = sdt_probs(int(xi[t, o, ji]), bias,
                                      psi[r] ** 2, kj)
                        score = 1 + int(rng.choice(kj, p=p))
                        records.append(RatingRecord(
                            rater_id=r, family=spec.raters[r],
                            teacher_id=teachers[t], year="y1",
                            observation_id=obs_id, segment_index=s + 1,
                            item_id=f"item{ji + 1}", score=score))

    oracle = {
        "mode": "hrm",
        "seed": spec.seed,
        "phi": phi,
        "psi": psi,
        "alpha": list(spec.alpha),
        "gamma": [list(g) for g in gamma],
        "lesson_sd": spec.lesson_sd,
        "delta": {f"{r}|{lvl}": v for (r, lvl), v in spec.delta.items()},
        "covariate": spec.covariate,
        "levels": {t: level_of[t] for t in teachers} if spec.covariate else {},
    }
    attrs = TeacherAttributes(attr_values)
    ds = Dataset.build(records, scale, roster, attributes=attrs,
                       provenance={"bundle": f"synth-hrm-{spec.seed}"})
    return ds, attrs, oracle


def write_bundle(out_dir: str | Path, ds: Dataset, oracle: dict) -> list[str]:
    """Emit the standard CSV/JSON bundle plus oracle.json; byte-stable."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [[r.rater_id, r.family, r.teacher_id, r.year, r.observation_id,
             r.segment_index, r.item_id, r.score] for r in ds.records]
    write_csv(out / "ratings.csv", RATINGS_HEADER, rows)
    scale_rows = [{
        "item_id": s.item_id, "categories": s.category_count,
        "reverse_coded": s.reverse_coded, "dimension": s.dimension,
        "segment_minutes": s.segment_minutes,
    } for s in sorted(ds.scale.values(), key=lambda s: s.item_id)]
    write_json(out / "scale.json", scale_rows)
    write_csv(out / "roster.csv", ROSTER_HEADER,
              sorted(ds.roster.items()))
    files = ["ratings.csv", "scale.json", "roster.csv", "oracle.json"]
    if ds.attributes.values:
        attr_rows = []
        for t in sorted(ds.attributes.values):
            for a in sorted(ds.attributes.values[t]):
                attr_rows.append([t, a, ds.attributes.values[t][a]])
        write_csv(out / "attributes.csv", ATTRIBUTES_HEADER, attr_rows)
        files.append("attributes.csv")
    write_json(out / "oracle.json", oracle)
    return sorted(files)
