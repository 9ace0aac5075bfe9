"""Variance components for nested multifacet rating designs.

Designs are named in standard g-theory notation over the facets teacher (i),
lesson/observation nested in teacher (o:i), segment nested in lesson
(s:o:i), rater (r), and item (j).  Interactions are concatenations (ir is
rater-by-teacher); the residual absorbs the highest-order interaction.

Estimation is EM-REML on the intercept-only mixed model

    y = mu + sum_t Z_t u_t + e,   u_t ~ N(0, v_t I),  e ~ N(0, v_e I),

run to a relative tolerance of 1e-6 on every component (cap 500 sweeps),
with negative intermediate estimates projected to zero.  A method-of-moments
solve supplies starting values (exact on balanced data, so the EM polish is
short there), and the largest random term is absorbed out of the mixed-model
equations so each sweep only factorizes the small core.

The generalizability coefficient is the teacher share of relative error
variance (terms involving the teacher, plus the residual); dependability
additionally charges the non-teacher main effects and interactions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.linalg.lapack import dpotri

from .dataset import Dataset
from .errors import DataError, InestimableTermError

log = logging.getLogger(__name__)

TOL = 1e-6
MAX_ITER = 500

# facet key builders: record -> hashable level key
_FACETS = {
    "i": lambda r: r.teacher_id,
    "iy": lambda r: (r.teacher_id, r.year),
    "o": lambda r: r.observation_id,
    "s": lambda r: (r.observation_id, r.segment_index),
    "r": lambda r: r.rater_id,
    "j": lambda r: r.item_id,
}


def _key(*facets):
    funcs = [_FACETS[f] for f in facets]
    return lambda rec: tuple(fn(rec) for fn in funcs)


@dataclass(frozen=True)
class VarianceDesign:
    """Named design: random-effect terms and their error classification."""
    name: str
    terms: dict  # term name -> record key function
    relative_error: tuple[str, ...]   # terms charged to relative error
    absolute_only: tuple[str, ...]    # extra terms charged only to absolute error
    teacher_term: str = "i"

    def all_terms(self) -> list[str]:
        return list(self.terms)


def _make_designs() -> dict[str, VarianceDesign]:
    designs = {}
    # by-item designs
    designs["rxoi"] = VarianceDesign(
        name="rxoi",
        terms={"i": _key("i"), "o:i": _key("i", "o"), "r": _key("r"),
               "ir": _key("i", "r")},
        relative_error=("o:i", "ir", "residual"),
        absolute_only=("r",),
    )
    designs["rxsoi"] = VarianceDesign(
        name="rxsoi",
        terms={"i": _key("iy"), "o:i": _key("iy", "o"),
               "s:o:i": _key("iy", "o", "s"), "r": _key("r"),
               "ir": _key("iy", "r")},
        relative_error=("o:i", "s:o:i", "ir", "residual"),
        absolute_only=("r",),
    )
    # all-items designs
    designs["jxrxoi"] = VarianceDesign(
        name="jxrxoi",
        terms={"i": _key("i"), "o:i": _key("i", "o"), "r": _key("r"),
               "j": _key("j"), "ir": _key("i", "r"),
               "o:ir": _key("i", "o", "r"), "ij": _key("i", "j"),
               "jo:i": _key("i", "o", "j"), "jr": _key("j", "r"),
               "ijr": _key("i", "j", "r")},
        relative_error=("o:i", "ir", "o:ir", "ij", "jo:i", "ijr", "residual"),
        absolute_only=("r", "j", "jr"),
    )
    designs["jxrxsoi"] = VarianceDesign(
        name="jxrxsoi",
        terms={"i": _key("iy"), "o:i": _key("iy", "o"),
               "s:o:i": _key("iy", "o", "s"), "r": _key("r"),
               "j": _key("j"), "ir": _key("iy", "r"),
               "o:ir": _key("iy", "o", "r"), "ij": _key("iy", "j"),
               "jo:i": _key("iy", "o", "j"), "jr": _key("j", "r"),
               "ijr": _key("iy", "j", "r")},
        relative_error=("o:i", "s:o:i", "ir", "o:ir", "ij", "jo:i", "ijr",
                        "residual"),
        absolute_only=("r", "j", "jr"),
    )
    return designs


DESIGNS = _make_designs()


@dataclass
class VarianceComponents:
    """Estimated variance per design term, 'residual' included."""
    components: dict[str, float]
    grand_mean: float
    n_obs: int
    converged: bool
    log_likelihood: float
    design: str
    n_iterations: int = 0
    truncated: tuple[str, ...] = ()
    degenerate: bool = False

    def total(self) -> float:
        return float(sum(self.components.values()))


@dataclass
class GStudyResult:
    item: str
    family: str
    erho2: float
    phi: float
    components: VarianceComponents
    degenerate: bool = False


# ---------------------------------------------------------------------------
# REML engine
# ---------------------------------------------------------------------------

def _codes(keys: list) -> tuple[np.ndarray, int]:
    uniq = sorted(set(keys))
    lookup = {k: c for c, k in enumerate(uniq)}
    return np.fromiter((lookup[k] for k in keys), dtype=np.int64,
                       count=len(keys)), len(uniq)


def _cooccurrence(codes_a: np.ndarray, q_a: int, codes_b: np.ndarray,
                  q_b: int) -> sp.csr_matrix:
    """Sparse count matrix N[a, b] = #records with level a of one term and
    level b of the other."""
    data = np.ones(len(codes_a))
    return sp.coo_matrix((data, (codes_a, codes_b)), shape=(q_a, q_b)).tocsr()


def _mom_start(y: np.ndarray, codes: dict[str, np.ndarray],
               sizes: dict[str, int]) -> dict[str, float]:
    """Henderson-style method-of-moments estimates used as EM starting values.

    Solves E[T_t - T_mu] = sum_s v_s (c_ts - c_mus) + v_e (q_t - 1) for all
    random terms plus the total-sum-of-squares equation.  Exact for balanced
    designs; clipped to a small positive floor otherwise.
    """
    terms = list(codes)
    n = len(y)
    var_y = float(np.var(y))
    if var_y == 0:
        return {t: 0.0 for t in terms} | {"residual": 0.0}

    def t_stat(t):
        sums = np.bincount(codes[t], weights=y, minlength=sizes[t])
        counts = np.bincount(codes[t], minlength=sizes[t]).astype(float)
        return float(np.sum(sums * sums / np.maximum(counts, 1.0)))

    t_mu = float(np.sum(y)) ** 2 / n
    coefs = {}
    for t in terms:
        counts_t = np.bincount(codes[t], minlength=sizes[t]).astype(float)
        for s in terms:
            nn = _cooccurrence(codes[t], sizes[t], codes[s], sizes[s])
            nn2 = nn.copy()
            nn2.data = nn2.data ** 2
            coefs[(t, s)] = float(
                np.sum(np.asarray(nn2.sum(axis=1)).ravel() / counts_t))
    c_mu = {s: float(np.sum(np.bincount(codes[s], minlength=sizes[s])
                            .astype(float) ** 2)) / n for s in terms}

    m = len(terms)
    a = np.zeros((m + 1, m + 1))
    b = np.zeros(m + 1)
    for row, t in enumerate(terms):
        for col, s in enumerate(terms):
            a[row, col] = coefs[(t, s)] - c_mu[s]
        a[row, m] = sizes[t] - 1
        b[row] = t_stat(t) - t_mu
    for col, s in enumerate(terms):
        a[m, col] = n - c_mu[s]
    a[m, m] = n - 1
    b[m] = float(np.sum(y * y)) - t_mu

    try:
        est, *_ = np.linalg.lstsq(a, b, rcond=None)
    except np.linalg.LinAlgError:
        est = np.full(m + 1, var_y / (m + 1))
    floor = 1e-3 * var_y
    start = {t: max(float(est[k]), floor) for k, t in enumerate(terms)}
    start["residual"] = max(float(est[m]), floor)
    return start


def reml_fit(y: np.ndarray, factor_keys: dict[str, list],
             design_name: str = "custom") -> VarianceComponents:
    """EM-REML for an intercept-plus-random-intercepts model.

    ``factor_keys`` maps each random term to its per-record level keys.
    Terms whose estimates collapse to zero are removed from the equations
    and reported as truncated.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    terms = list(factor_keys)
    codes, sizes = {}, {}
    for t in terms:
        codes[t], sizes[t] = _codes(factor_keys[t])
        if sizes[t] < 2:
            raise InestimableTermError(t, f"inestimable term {t!r}: needs "
                                          f">= 2 levels, found {sizes[t]}")
    if n <= 1 + len(terms):
        raise DataError(f"too few records ({n}) to fit {len(terms)} terms")

    var_y = float(np.var(y))
    mean_y = float(np.mean(y))
    if var_y == 0.0:
        return VarianceComponents(
            components={t: 0.0 for t in terms} | {"residual": 0.0},
            grand_mean=mean_y, n_obs=n, converged=True, log_likelihood=0.0,
            design=design_name, n_iterations=0,
            truncated=tuple(terms) + ("residual",), degenerate=True)

    sigma = _mom_start(y, codes, sizes)
    floor = 1e-10 * var_y
    active = [t for t in terms]
    truncated: set[str] = set()

    yty = float(y @ y)
    sum_y = float(np.sum(y))
    zty = {t: np.bincount(codes[t], weights=y, minlength=sizes[t])
           for t in terms}
    counts = {t: np.bincount(codes[t], minlength=sizes[t]).astype(float)
              for t in terms}
    cross = {}
    for a_i, t in enumerate(terms):
        for s in terms[a_i + 1:]:
            cross[(t, s)] = _cooccurrence(codes[t], sizes[t], codes[s], sizes[s])

    def get_cross(t, s) -> sp.csr_matrix:
        if (t, s) in cross:
            return cross[(t, s)]
        return cross[(s, t)].T.tocsr()

    logdet_c = 0.0
    converged = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        drop = [t for t in active if sigma[t] < floor]
        for t in drop:
            sigma[t] = 0.0
            truncated.add(t)
            active.remove(t)
        if not active:
            # pure error model
            sigma["residual"] = var_y * n / max(n - 1, 1)
            converged = True
            logdet_c = math.log(n)
            break

        sigma_e = max(sigma["residual"], floor)
        lam = {t: sigma_e / sigma[t] for t in active}

        # absorb the largest term when it is worth it
        absorb = max(active, key=lambda t: sizes[t])
        if sizes[absorb] < 64:
            absorb = None
        rest = [t for t in active if t != absorb]

        offs = {}
        dim = 1
        for t in rest:
            offs[t] = dim
            dim += sizes[t]

        s_mat = np.zeros((dim, dim))
        s_mat[0, 0] = n
        rhs_orig = np.zeros(dim)
        rhs_orig[0] = sum_y
        for t in rest:
            sl = slice(offs[t], offs[t] + sizes[t])
            s_mat[0, sl] = counts[t]
            s_mat[sl, 0] = counts[t]
            diag_idx = np.arange(offs[t], offs[t] + sizes[t])
            s_mat[diag_idx, diag_idx] = counts[t] + lam[t]
            rhs_orig[sl] = zty[t]
        rhs = rhs_orig
        for a_i, t in enumerate(rest):
            for s in rest[a_i + 1:]:
                nn = get_cross(t, s).tocoo()
                s_mat[offs[t] + nn.row, offs[s] + nn.col] += nn.data
                s_mat[offs[s] + nn.col, offs[t] + nn.row] += nn.data

        if absorb is not None:
            qa = sizes[absorb]
            d_a = counts[absorb] + lam[absorb]
            dinv = 1.0 / d_a
            # coupling B: rest-dim x qa
            b_rows, b_cols, b_vals = [np.zeros(0, dtype=np.int64)], \
                [np.zeros(0, dtype=np.int64)], [np.zeros(0)]
            b_rows[0] = np.zeros(qa, dtype=np.int64)
            b_cols[0] = np.arange(qa)
            b_vals[0] = counts[absorb]
            for t in rest:
                nn = get_cross(t, absorb).tocoo()
                b_rows.append(offs[t] + nn.row)
                b_cols.append(nn.col)
                b_vals.append(nn.data)
            b_mat = sp.coo_matrix(
                (np.concatenate(b_vals),
                 (np.concatenate(b_rows), np.concatenate(b_cols))),
                shape=(dim, qa)).tocsc()
            g_mat = b_mat.multiply(dinv[np.newaxis, :]).tocsc()
            s_mat -= (g_mat @ b_mat.T).toarray()
            rhs_a = zty[absorb]
            rhs = rhs_orig - g_mat @ rhs_a

        try:
            cf = sla.cho_factor(s_mat, lower=True)
        except np.linalg.LinAlgError as exc:
            raise DataError(f"mixed-model equations singular: {exc}") from exc
        sol = sla.cho_solve(cf, rhs)
        inv_core, info = dpotri(cf[0], lower=1)
        if info != 0:
            raise DataError("inverse of mixed-model equations failed")
        inv_core = np.tril(inv_core) + np.tril(inv_core, -1).T
        logdet_c = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))

        u = {}
        tr = {}
        for t in rest:
            sl = slice(offs[t], offs[t] + sizes[t])
            u[t] = sol[sl]
            tr[t] = float(np.trace(inv_core[sl, sl]))
        quad = float(sol @ rhs_orig)
        intercept = float(sol[0])
        if absorb is not None:
            u_a = dinv * (rhs_a - b_mat.T @ sol)
            u[absorb] = u_a
            pat = (g_mat @ g_mat.T).tocoo()
            tr[absorb] = float(np.sum(dinv)) + float(
                np.sum(pat.data * inv_core[pat.row, pat.col]))
            quad += float(u_a @ rhs_a)
            logdet_c += float(np.sum(np.log(d_a)))

        new_sigma_e = (yty - quad) / (n - 1)
        new = {}
        for t in active:
            new[t] = (float(u[t] @ u[t]) + sigma_e * tr[t]) / sizes[t]
        new["residual"] = max(new_sigma_e, floor)

        rel = max(abs(new.get(t, sigma[t]) - sigma[t]) /
                  max(sigma[t], floor) for t in active + ["residual"])
        for t in active:
            sigma[t] = new[t]
        sigma["residual"] = new["residual"]
        if rel < TOL:
            converged = True
            break

    # REML log-likelihood at the final estimates
    sigma_e = max(sigma["residual"], floor)
    q_total = sum(sizes[t] for t in active)
    logdet_sum = sum(sizes[t] * math.log(max(sigma[t], floor)) for t in active)
    if active:
        ypy = (yty - quad) / sigma_e
        grand_mean = intercept
    else:
        ypy = (n * var_y) / sigma_e
        grand_mean = mean_y
    loglik = -0.5 * ((n - 1 - q_total) * math.log(sigma_e)
                     + logdet_sum + logdet_c + ypy
                     + (n - 1) * math.log(2 * math.pi))

    components = {t: float(sigma.get(t, 0.0)) for t in terms}
    components["residual"] = float(sigma["residual"])
    return VarianceComponents(
        components=components, grand_mean=grand_mean, n_obs=n,
        converged=converged, log_likelihood=loglik, design=design_name,
        n_iterations=it, truncated=tuple(sorted(truncated)))


# ---------------------------------------------------------------------------
# dataset-facing operations
# ---------------------------------------------------------------------------

def fit_variance_components(ds: Dataset, design: str | VarianceDesign,
                            family: str, item: str | None = None
                            ) -> VarianceComponents:
    """Estimate all variance terms of ``design`` for one rater family.

    By-item designs (rxoi, rxsoi) require ``item``; all-items designs
    (jxrxoi, jxrxsoi) pool every item the family rated.
    """
    dz = DESIGNS[design] if isinstance(design, str) else design
    if "j" not in dz.terms and item is None:
        raise DataError(f"design {dz.name!r} is by-item: pass item=")
    recs = [r for r in ds.by_family(family)
            if item is None or r.item_id == item]
    if not recs:
        raise DataError(f"no records for family {family!r}"
                        + (f" item {item!r}" if item else ""))
    y = np.array([r.score for r in recs], dtype=float)
    factor_keys = {t: [keyfn(r) for r in recs] for t, keyfn in dz.terms.items()}
    vc = reml_fit(y, factor_keys, design_name=dz.name)
    if not vc.converged:
        log.warning("REML did not converge in %d iterations (family=%s "
                    "item=%s design=%s)", MAX_ITER, family, item, dz.name)
    return vc


def generalizability(vc: VarianceComponents, design: str | VarianceDesign) -> float:
    """Teacher variance over teacher-plus-relative-error variance."""
    dz = DESIGNS[design] if isinstance(design, str) else design
    nu_i = vc.components.get(dz.teacher_term, 0.0)
    err = sum(vc.components.get(t, 0.0) for t in dz.relative_error)
    denom = nu_i + err
    if denom <= 0.0:
        return 0.0
    return nu_i / denom


def dependability(vc: VarianceComponents, design: str | VarianceDesign) -> float:
    """As generalizability, but absolute error adds the non-teacher terms."""
    dz = DESIGNS[design] if isinstance(design, str) else design
    nu_i = vc.components.get(dz.teacher_term, 0.0)
    err = sum(vc.components.get(t, 0.0)
              for t in dz.relative_error + dz.absolute_only)
    denom = nu_i + err
    if denom <= 0.0:
        return 0.0
    return nu_i / denom


def gstudy(ds: Dataset, design: str, family: str,
           item: str | None = None) -> GStudyResult:
    vc = fit_variance_components(ds, design, family, item)
    er = generalizability(vc, design)
    ph = dependability(vc, design)
    return GStudyResult(item=item or "*", family=family, erho2=er, phi=ph,
                        components=vc,
                        degenerate=vc.degenerate or (er == 0.0))


def item_score_reliability(ds: Dataset, item: str,
                           family: str | None = None) -> float:
    """Share of an item's teacher-level variance predictable from the other
    items, via least squares of the item on the remaining item scores.

    Teacher-level scores are mean ratings per (teacher, item).  Returns
    1 - var(residual)/var(item), i.e. the regression R^2.
    """
    items = ds.items()
    if len(items) < 3:
        raise DataError("item-score reliability needs >= 3 items")
    if item not in ds.scale:
        raise DataError(f"unknown item {item!r}")

    sums: dict[tuple[str, str], float] = {}
    counts: dict[tuple[str, str], int] = {}
    for rec in ds.records:
        if family is not None and rec.family != family:
            continue
        key = (rec.teacher_id, rec.item_id)
        sums[key] = sums.get(key, 0.0) + rec.score
        counts[key] = counts.get(key, 0) + 1
    teachers = sorted({t for t, _ in sums})
    table = np.full((len(teachers), len(items)), np.nan)
    for ti, t in enumerate(teachers):
        for ji, j in enumerate(items):
            if (t, j) in sums:
                table[ti, ji] = sums[(t, j)] / counts[(t, j)]
    keep = ~np.any(np.isnan(table), axis=1)
    table = table[keep]
    if table.shape[0] < len(items) + 1:
        raise DataError("too few complete teacher rows for reliability")

    target_col = items.index(item)
    yv = table[:, target_col]
    xv = np.column_stack([np.ones(len(yv)),
                          np.delete(table, target_col, axis=1)])
    rank = np.linalg.matrix_rank(xv)
    if rank < xv.shape[1]:
        log.warning("collinear predictors for item %s: rank %d < %d, "
                    "dropping via least squares", item, rank, xv.shape[1])
    beta, *_ = np.linalg.lstsq(xv, yv, rcond=None)
    resid = yv - xv @ beta
    var_y = float(np.var(yv))
    if var_y == 0.0:
        return 0.0
    return float(max(0.0, min(1.0, 1.0 - np.var(resid) / var_y)))
