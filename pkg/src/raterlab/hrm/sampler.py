"""Metropolis-within-Gibbs sampler for the hierarchical rater model.

Update sweep, in fixed order: ideal scores (exact categorical draw), lesson
abilities, teacher-year abilities, latent covariance (conjugate Wishart),
discriminations, step difficulties, rater biases, rater log-variabilities,
item-level bias/variability means (conjugate normal), and the four precision
hyperparameters (conjugate gamma).  Random-walk proposals adapt toward a
20-40% acceptance rate during burn-in and are frozen afterwards.

Parameters are vectorized per update family: components whose conditionals
are mutually independent (ideal scores across cells, abilities across
lessons, biases across rater-item groups, ...) are proposed and accepted in
one batch.  Each chain owns a generator derived from (seed, chain), so
results are identical however chains are scheduled.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .._util import derive_rng, json_digest
from ..dataset import Dataset
from ..errors import DataError
from .draws import PosteriorDraws
from .model import HrmConfig, PSI2_FLOOR

log = logging.getLogger(__name__)


@dataclass
class _ModelData:
    """Record/cell/group index arrays shared by every chain."""
    x: np.ndarray
    cell_of_rec: np.ndarray
    group_of_rec: np.ndarray
    k_of_rec: np.ndarray
    lesson_of_cell: np.ndarray
    item_of_cell: np.ndarray
    k_of_cell: np.ndarray
    ty_of_lesson: np.ndarray
    dim_of_item: np.ndarray
    k_of_item: np.ndarray
    anchor: np.ndarray
    group_item: np.ndarray
    group_level: np.ndarray
    identified: np.ndarray
    rater_ids: list
    item_ids: list
    level_names: list
    lesson_keys: list
    ty_keys: list
    cell_keys: list
    group_labels: list
    kmax: int
    n_dims: int

    @property
    def n_cells(self) -> int:
        return len(self.k_of_cell)

    @property
    def n_lessons(self) -> int:
        return len(self.ty_of_lesson)

    @property
    def n_groups(self) -> int:
        return len(self.group_item)


def _prepare(ds: Dataset, config: HrmConfig) -> _ModelData:
    recs = list(ds.records)
    if config.families is not None:
        wanted = set(config.families)
        recs = [r for r in recs if r.family in wanted]
    if not recs:
        raise DataError("no records selected for the rater model")

    level_names: list[str] = []
    levels_by_teacher: dict[str, str] = {}
    if config.covariate is not None:
        attr = config.covariate
        n_before = len(recs)
        for r in recs:
            lvl = ds.attributes.level(r.teacher_id, attr)
            if lvl is not None:
                levels_by_teacher[r.teacher_id] = lvl
        recs = [r for r in recs if r.teacher_id in levels_by_teacher]
        dropped = n_before - len(recs)
        if dropped:
            log.info("covariate %r: excluded %d records from teachers "
                     "without the attribute", attr, dropped)
        if not recs:
            raise DataError(f"no teacher has attribute {config.covariate!r}")
        level_names = sorted(set(levels_by_teacher.values()))
    if not level_names:
        level_names = [""]

    item_ids = sorted({r.item_id for r in recs})
    item_idx = {j: i for i, j in enumerate(item_ids)}
    dims = np.array([ds.scale[j].dimension - 1 for j in item_ids])
    n_dims = int(dims.max()) + 1
    k_of_item = np.array([ds.scale[j].category_count for j in item_ids])
    anchor = np.zeros(len(item_ids), dtype=bool)
    for m in range(n_dims):
        members = [j for j in item_ids if ds.scale[j].dimension - 1 == m]
        if not members:
            raise DataError(f"dimension {m + 1} has no items")
        pick = config.anchor_items.get(m + 1)
        if pick is not None and pick not in members:
            raise DataError(f"anchor {pick!r} is not on dimension {m + 1}")
        anchor[item_idx[pick if pick is not None else members[0]]] = True

    lesson_keys = sorted({(r.teacher_id, r.year, r.observation_id)
                          for r in recs})
    lesson_idx = {k: i for i, k in enumerate(lesson_keys)}
    ty_keys = sorted({(t, y) for t, y, _ in lesson_keys})
    ty_idx = {k: i for i, k in enumerate(ty_keys)}
    ty_of_lesson = np.array([ty_idx[(t, y)] for t, y, _ in lesson_keys])

    cell_keys = sorted({(lesson_idx[(r.teacher_id, r.year, r.observation_id)],
                         item_idx[r.item_id]) for r in recs})
    cell_idx = {k: i for i, k in enumerate(cell_keys)}

    rater_ids = sorted({r.rater_id for r in recs})
    rater_idx = {r: i for i, r in enumerate(rater_ids)}
    n_levels = len(level_names)
    level_idx = {name: i for i, name in enumerate(level_names)}

    def group_of(rater: int, item: int, level: int) -> int:
        return (rater * len(item_ids) + item) * n_levels + level

    n_groups = len(rater_ids) * len(item_ids) * n_levels
    group_item = np.zeros(n_groups, dtype=np.int64)
    group_level = np.zeros(n_groups, dtype=np.int64)
    group_labels = []
    for ri, rid in enumerate(rater_ids):
        for ji, jid in enumerate(item_ids):
            for li, lname in enumerate(level_names):
                g = group_of(ri, ji, li)
                group_item[g] = ji
                group_level[g] = li
                group_labels.append((rid, jid, lname))

    n = len(recs)
    x = np.zeros(n, dtype=np.int64)
    cell_of_rec = np.zeros(n, dtype=np.int64)
    group_of_rec = np.zeros(n, dtype=np.int64)
    for pos, r in enumerate(recs):
        li = lesson_idx[(r.teacher_id, r.year, r.observation_id)]
        ji = item_idx[r.item_id]
        lvl = level_idx[levels_by_teacher.get(r.teacher_id, "")] \
            if config.covariate else 0
        x[pos] = r.score
        cell_of_rec[pos] = cell_idx[(li, ji)]
        group_of_rec[pos] = group_of(rater_idx[r.rater_id], ji, lvl)
    identified = np.zeros(n_groups, dtype=bool)
    identified[np.unique(group_of_rec)] = True

    lesson_of_cell = np.array([c[0] for c in cell_keys])
    item_of_cell = np.array([c[1] for c in cell_keys])
    return _ModelData(
        x=x, cell_of_rec=cell_of_rec, group_of_rec=group_of_rec,
        k_of_rec=k_of_item[item_of_cell][cell_of_rec],
        lesson_of_cell=lesson_of_cell, item_of_cell=item_of_cell,
        k_of_cell=k_of_item[item_of_cell], ty_of_lesson=ty_of_lesson,
        dim_of_item=dims, k_of_item=k_of_item, anchor=anchor,
        group_item=group_item, group_level=group_level, identified=identified,
        rater_ids=rater_ids, item_ids=item_ids, level_names=level_names,
        lesson_keys=[list(k) for k in lesson_keys],
        ty_keys=[list(k) for k in ty_keys],
        cell_keys=[[list(lesson_keys[li]), item_ids[ji]]
                   for li, ji in cell_keys],
        group_labels=[list(g) for g in group_labels],
        kmax=int(k_of_item.max()), n_dims=n_dims)


class _ChainState:
    """All parameter values plus proposal scales for one chain."""

    def __init__(self, d: _ModelData, config: HrmConfig,
                 rng: np.random.Generator, frozen: dict | None):
        self.rng = rng
        self.frozen = frozen is not None
        j, m = len(d.item_ids), d.n_dims
        g = d.n_groups

        med = np.zeros(d.n_cells)
        cnt = np.bincount(d.cell_of_rec, minlength=d.n_cells)
        np.add.at(med, d.cell_of_rec, d.x.astype(float))
        med = med / np.maximum(cnt, 1)

        if frozen is None:
            self.xi = np.clip(np.round(med), 1, d.k_of_cell).astype(np.int64)
            self.theta = rng.normal(0.0, 0.5, (d.n_lessons, m))
            self.Theta = rng.normal(0.0, 0.5, (len(d.ty_keys), m))
            self.Sigma = np.eye(m)
            self.alpha = np.where(d.anchor, 1.0,
                                  np.exp(rng.normal(0.0, 0.3, j)))
            self.gamma = np.zeros((j, d.kmax))
            self.gamma[:, 1:] = rng.normal(0.0, 0.3, (j, d.kmax - 1))
            for ji in range(j):
                self.gamma[ji, d.k_of_item[ji]:] = 0.0
        else:
            self.xi = frozen["xi"].copy()
            self.theta = frozen["theta"].copy()
            self.Theta = frozen["Theta"].copy()
            self.Sigma = frozen["Sigma"].copy()
            self.alpha = frozen["alpha"].copy()
            self.gamma = frozen["gamma"].copy()

        resid = d.x - self.xi[d.cell_of_rec]
        phi0 = np.zeros(g)
        np.add.at(phi0, d.group_of_rec, resid.astype(float))
        gcnt = np.bincount(d.group_of_rec, minlength=g)
        phi0 = phi0 / np.maximum(gcnt, 1)
        self.phi = np.where(d.identified,
                            phi0 + rng.normal(0.0, 0.2, g), 0.0)
        self.log_psi2 = np.where(d.identified, rng.normal(0.0, 0.3, g), 0.0)
        n_lv = len(d.level_names)
        self.eta = np.zeros((j, n_lv))
        self.kappa = np.zeros((j, n_lv))
        self.prec_phi = 1.0
        self.prec_logpsi2 = 1.0
        self.prec_eta = 1.0
        self.prec_kappa = 1.0
        self.lam = np.linalg.inv(self.Sigma)

        # proposal scales
        self.s_theta = np.full(d.n_lessons, 0.4)
        self.s_Theta = np.full(len(d.ty_keys), 0.4)
        self.s_alpha = np.full(j, 0.3)
        self.s_gamma = np.full(j, 0.3)
        self.s_phi = np.full(g, 0.3)
        self.s_psi = np.full(g, 0.4)
        self.acc: dict[str, np.ndarray] = {}
        self.tries: dict[str, np.ndarray] = {}
        for name, size in (("theta", d.n_lessons), ("Theta", len(d.ty_keys)),
                           ("alpha", j), ("gamma", j), ("phi", g),
                           ("psi", g)):
            self.acc[name] = np.zeros(size)
            self.tries[name] = np.zeros(size)

    def gamma_cum(self) -> np.ndarray:
        return np.cumsum(self.gamma, axis=1)


def _sdt_loglik(x, center, psi2, kvec, kmax) -> np.ndarray:
    """Per-record log-probability of the observed category."""
    z = -((x - center) ** 2) / (2.0 * psi2)
    ks = np.arange(1, kmax + 1, dtype=float)
    e = -((ks[None, :] - center[:, None]) ** 2) / (2.0 * psi2[:, None])
    e[ks[None, :] > kvec[:, None]] = -np.inf
    mx = e.max(axis=1)
    logz = mx + np.log(np.sum(np.exp(e - mx[:, None]), axis=1))
    return z - logz


def _gpcm_logw(theta, alpha, gamma_cum, d: _ModelData) -> np.ndarray:
    """(cells, kmax) unnormalized log weights, invalid categories at -inf."""
    items = d.item_of_cell
    a_dot = alpha[items] * theta[d.lesson_of_cell, d.dim_of_item[items]]
    ks = np.arange(d.kmax)
    logw = ks[None, :] * a_dot[:, None] - gamma_cum[items]
    logw[ks[None, :] >= d.k_of_cell[:, None]] = -np.inf
    return logw


def _gpcm_cell_logp(logw, xi) -> np.ndarray:
    mx = logw.max(axis=1)
    logz = mx + np.log(np.sum(np.exp(logw - mx[:, None]), axis=1))
    return logw[np.arange(len(xi)), xi - 1] - logz


def _adapt(state: _ChainState, name: str, scales: np.ndarray,
           window: int) -> None:
    tries = state.tries[name]
    mask = tries >= window
    if not np.any(mask):
        return
    rate = np.where(tries > 0, state.acc[name] / np.maximum(tries, 1), 0.3)
    scales[mask & (rate > 0.4)] *= np.exp(0.15)
    scales[mask & (rate < 0.2)] *= np.exp(-0.15)
    np.clip(scales, 1e-3, 10.0, out=scales)
    state.acc[name][mask] = 0.0
    state.tries[name][mask] = 0.0


def _run_chain(d: _ModelData, config: HrmConfig, chain: int,
               frozen: dict | None) -> dict[str, np.ndarray]:
    rng = derive_rng(config.seed, "hrm-chain", chain)
    st = _ChainState(d, config, rng, frozen)
    span = config.iterations - config.burn_in
    n_keep = (span + config.thin - 1) // config.thin
    j, m = len(d.item_ids), d.n_dims
    rec: dict[str, np.ndarray] = {
        "phi": np.zeros((n_keep, d.n_groups)),
        "log_psi2": np.zeros((n_keep, d.n_groups)),
        "eta": np.zeros((n_keep, j, len(d.level_names))),
        "kappa": np.zeros((n_keep, j, len(d.level_names))),
        "prec_phi": np.zeros(n_keep),
        "prec_log_psi2": np.zeros(n_keep),
        "prec_eta": np.zeros(n_keep),
        "prec_kappa": np.zeros(n_keep),
    }
    if frozen is None:
        rec.update({
            "alpha": np.zeros((n_keep, j)),
            "gamma": np.zeros((n_keep, j, d.kmax)),
            "theta": np.zeros((n_keep, d.n_lessons, m)),
            "Theta": np.zeros((n_keep, len(d.ty_keys), m)),
            "Sigma": np.zeros((n_keep, m, m)),
            "xi": np.zeros((n_keep, d.n_cells), dtype=np.int16),
        })

    id_g = np.flatnonzero(d.identified)
    gi, gl = d.group_item[id_g], d.group_level[id_g]
    jl_of_idg = gi * len(d.level_names) + gl
    n_jl = j * len(d.level_names)
    jl_counts = np.bincount(jl_of_idg, minlength=n_jl).astype(float)
    x_float = d.x.astype(float)
    kept = 0

    for it in range(config.iterations):
        adapting = it < config.burn_in
        psi2 = np.exp(st.log_psi2)

        if frozen is None:
            # per-cell, per-candidate detection evidence, shared by the
            # marginal alpha/gamma moves and the ideal-score draw
            phi_rec = st.phi[d.group_of_rec]
            psi2_rec = np.maximum(psi2[d.group_of_rec], PSI2_FLOOR)
            sdt_sum = np.zeros((d.n_cells, d.kmax))
            for k in range(1, d.kmax + 1):
                ll = _sdt_loglik(x_float, k + phi_rec, psi2_rec,
                                 d.k_of_rec, d.kmax)
                sdt_sum[:, k - 1] = np.bincount(d.cell_of_rec, weights=ll,
                                                minlength=d.n_cells)

            def marginal_by_item(alpha, gamma_cum):
                logw = _gpcm_logw(st.theta, alpha, gamma_cum, d)
                mx = logw.max(axis=1)
                log_z = mx + np.log(np.sum(np.exp(logw - mx[:, None]),
                                           axis=1))
                both = logw + sdt_sum
                mx2 = both.max(axis=1)
                log_marg = mx2 + np.log(np.sum(np.exp(both - mx2[:, None]),
                                               axis=1)) - log_z
                return np.bincount(d.item_of_cell, weights=log_marg,
                                   minlength=len(d.item_ids))

            # --- discriminations (log-scale RW on the marginal likelihood)
            j_n = len(d.item_ids)
            cur_j = marginal_by_item(st.alpha, st.gamma_cum())
            u = np.log(st.alpha)
            u_prop = u + st.s_alpha * rng.standard_normal(j_n)
            alpha_prop = np.where(d.anchor, st.alpha, np.exp(u_prop))
            new_j = marginal_by_item(alpha_prop, st.gamma_cum())
            pr_cur = -0.5 * u ** 2 / config.var_alpha
            pr_new = -0.5 * u_prop ** 2 / config.var_alpha
            accept = (~d.anchor) & (np.log(rng.random(j_n)) <
                                    (new_j + pr_new - cur_j - pr_cur))
            st.alpha[accept] = alpha_prop[accept]
            st.acc["alpha"][accept] += 1
            st.tries["alpha"][~d.anchor] += 1
            if adapting:
                _adapt(st, "alpha", st.s_alpha, config.adapt_window)

            # --- step difficulties (per-item block RW, marginal likelihood)
            gamma_prop = st.gamma.copy()
            for ji in range(j_n):
                kj = d.k_of_item[ji]
                gamma_prop[ji, 1:kj] += st.s_gamma[ji] * \
                    rng.standard_normal(kj - 1)
            cur_j = marginal_by_item(st.alpha, st.gamma_cum())
            new_j = marginal_by_item(st.alpha, np.cumsum(gamma_prop, axis=1))
            pr_cur = -0.5 * np.sum(st.gamma ** 2, axis=1) / config.var_gamma
            pr_new = -0.5 * np.sum(gamma_prop ** 2, axis=1) / config.var_gamma
            accept = np.log(rng.random(j_n)) < (new_j + pr_new - cur_j -
                                                pr_cur)
            st.gamma[accept] = gamma_prop[accept]
            st.acc["gamma"][accept] += 1
            st.tries["gamma"] += 1
            if adapting:
                _adapt(st, "gamma", st.s_gamma, config.adapt_window)

            # --- ideal scores: exact categorical full conditional
            gamma_cum = st.gamma_cum()
            logw = _gpcm_logw(st.theta, st.alpha, gamma_cum, d) + sdt_sum
            gum = -np.log(-np.log(rng.random(logw.shape)))
            st.xi = 1 + np.argmax(logw + gum, axis=1)

            # --- lesson abilities
            logw = _gpcm_logw(st.theta, st.alpha, gamma_cum, d)
            cell_lp = _gpcm_cell_logp(logw, st.xi)
            cur_ll = np.bincount(d.lesson_of_cell, weights=cell_lp,
                                 minlength=d.n_lessons)
            prop = st.theta + st.s_theta[:, None] * rng.standard_normal(
                st.theta.shape)
            logw_p = _gpcm_logw(prop, st.alpha, gamma_cum, d)
            cell_lp_p = _gpcm_cell_logp(logw_p, st.xi)
            new_ll = np.bincount(d.lesson_of_cell, weights=cell_lp_p,
                                 minlength=d.n_lessons)
            dev_cur = st.theta - st.Theta[d.ty_of_lesson]
            dev_new = prop - st.Theta[d.ty_of_lesson]
            pr_cur = -0.5 * np.einsum("lm,mn,ln->l", dev_cur, st.lam, dev_cur)
            pr_new = -0.5 * np.einsum("lm,mn,ln->l", dev_new, st.lam, dev_new)
            accept = np.log(rng.random(d.n_lessons)) < (
                new_ll + pr_new - cur_ll - pr_cur)
            st.theta[accept] = prop[accept]
            st.acc["theta"][accept] += 1
            st.tries["theta"] += 1
            if adapting:
                _adapt(st, "theta", st.s_theta, config.adapt_window)

            # --- teacher-year abilities
            n_ty = len(d.ty_keys)
            dev = st.theta - st.Theta[d.ty_of_lesson]
            quad = np.einsum("lm,mn,ln->l", dev, st.lam, dev)
            cur = -0.5 * np.bincount(d.ty_of_lesson, weights=quad,
                                     minlength=n_ty)
            prop_T = st.Theta + st.s_Theta[:, None] * rng.standard_normal(
                st.Theta.shape)
            dev_p = st.theta - prop_T[d.ty_of_lesson]
            quad_p = np.einsum("lm,mn,ln->l", dev_p, st.lam, dev_p)
            new = -0.5 * np.bincount(d.ty_of_lesson, weights=quad_p,
                                     minlength=n_ty)
            pr_cur = -0.5 * np.sum(st.Theta ** 2, axis=1)
            pr_new = -0.5 * np.sum(prop_T ** 2, axis=1)
            accept = np.log(rng.random(n_ty)) < (new + pr_new - cur - pr_cur)
            st.Theta[accept] = prop_T[accept]
            st.acc["Theta"][accept] += 1
            st.tries["Theta"] += 1
            if adapting:
                _adapt(st, "Theta", st.s_Theta, config.adapt_window)

            # --- latent covariance (conjugate Wishart on the precision)
            df0 = config.wishart_df if config.wishart_df is not None else m + 1
            dev = st.theta - st.Theta[d.ty_of_lesson]
            scatter = dev.T @ dev
            scale_n = np.linalg.inv(np.eye(m) + scatter)
            scale_n = 0.5 * (scale_n + scale_n.T)
            lam = stats.wishart.rvs(df=df0 + d.n_lessons, scale=scale_n,
                                    random_state=rng)
            st.lam = np.atleast_2d(lam)
            st.Sigma = np.linalg.inv(st.lam)

        # --- rater biases
        xi_rec = st.xi[d.cell_of_rec].astype(float)
        psi2_rec = np.maximum(np.exp(st.log_psi2)[d.group_of_rec], PSI2_FLOOR)
        ll = _sdt_loglik(x_float, xi_rec + st.phi[d.group_of_rec], psi2_rec,
                         d.k_of_rec, d.kmax)
        cur_g = np.bincount(d.group_of_rec, weights=ll, minlength=d.n_groups)
        phi_prop = st.phi + st.s_phi * rng.standard_normal(d.n_groups)
        ll_p = _sdt_loglik(x_float, xi_rec + phi_prop[d.group_of_rec],
                           psi2_rec, d.k_of_rec, d.kmax)
        new_g = np.bincount(d.group_of_rec, weights=ll_p,
                            minlength=d.n_groups)
        mu_g = st.eta[d.group_item, d.group_level]
        pr_cur = -0.5 * st.prec_phi * (st.phi - mu_g) ** 2
        pr_new = -0.5 * st.prec_phi * (phi_prop - mu_g) ** 2
        accept = d.identified & (np.log(rng.random(d.n_groups)) <
                                 (new_g + pr_new - cur_g - pr_cur))
        st.phi[accept] = phi_prop[accept]
        st.acc["phi"][accept] += 1
        st.tries["phi"][d.identified] += 1
        if adapting:
            _adapt(st, "phi", st.s_phi, config.adapt_window)

        # --- rater log-variabilities
        ll = _sdt_loglik(x_float, xi_rec + st.phi[d.group_of_rec],
                         np.maximum(np.exp(st.log_psi2)[d.group_of_rec],
                                    PSI2_FLOOR),
                         d.k_of_rec, d.kmax)
        cur_g = np.bincount(d.group_of_rec, weights=ll, minlength=d.n_groups)
        lp_prop = st.log_psi2 + st.s_psi * rng.standard_normal(d.n_groups)
        ll_p = _sdt_loglik(x_float, xi_rec + st.phi[d.group_of_rec],
                           np.maximum(np.exp(lp_prop)[d.group_of_rec],
                                      PSI2_FLOOR),
                           d.k_of_rec, d.kmax)
        new_g = np.bincount(d.group_of_rec, weights=ll_p,
                            minlength=d.n_groups)
        mu_g = st.kappa[d.group_item, d.group_level]
        pr_cur = -0.5 * st.prec_logpsi2 * (st.log_psi2 - mu_g) ** 2
        pr_new = -0.5 * st.prec_logpsi2 * (lp_prop - mu_g) ** 2
        accept = d.identified & (np.log(rng.random(d.n_groups)) <
                                 (new_g + pr_new - cur_g - pr_cur))
        st.log_psi2[accept] = lp_prop[accept]
        st.acc["psi"][accept] += 1
        st.tries["psi"][d.identified] += 1
        if adapting:
            _adapt(st, "psi", st.s_psi, config.adapt_window)

        # --- item-level means of bias and log-variability (conjugate)
        phi_sum = np.bincount(jl_of_idg, weights=st.phi[id_g],
                              minlength=n_jl)
        post_prec = st.prec_eta + jl_counts * st.prec_phi
        post_mean = (st.prec_phi * phi_sum) / post_prec
        st.eta = (post_mean + rng.standard_normal(n_jl) /
                  np.sqrt(post_prec)).reshape(j, len(d.level_names))
        lp_sum = np.bincount(jl_of_idg, weights=st.log_psi2[id_g],
                             minlength=n_jl)
        post_prec_k = st.prec_kappa + jl_counts * st.prec_logpsi2
        post_mean_k = (st.prec_logpsi2 * lp_sum) / post_prec_k
        st.kappa = (post_mean_k + rng.standard_normal(n_jl) /
                    np.sqrt(post_prec_k)).reshape(j, len(d.level_names))

        # --- precision hyperparameters (conjugate gamma)
        a0, b0 = config.prec_shape, config.prec_rate
        eta_flat = st.eta.reshape(-1)
        kappa_flat = st.kappa.reshape(-1)
        dev_phi = st.phi[id_g] - eta_flat[jl_of_idg]
        st.prec_phi = rng.gamma(a0 + 0.5 * len(id_g),
                                1.0 / (b0 + 0.5 * float(dev_phi @ dev_phi)))
        dev_lp = st.log_psi2[id_g] - kappa_flat[jl_of_idg]
        st.prec_logpsi2 = rng.gamma(a0 + 0.5 * len(id_g),
                                    1.0 / (b0 + 0.5 * float(dev_lp @ dev_lp)))
        st.prec_eta = rng.gamma(a0 + 0.5 * n_jl,
                                1.0 / (b0 + 0.5 * float(eta_flat @ eta_flat)))
        st.prec_kappa = rng.gamma(
            a0 + 0.5 * n_jl, 1.0 / (b0 + 0.5 * float(kappa_flat @ kappa_flat)))

        if it >= config.burn_in and (it - config.burn_in) % config.thin == 0:
            rec["phi"][kept] = st.phi
            rec["log_psi2"][kept] = st.log_psi2
            rec["eta"][kept] = st.eta
            rec["kappa"][kept] = st.kappa
            rec["prec_phi"][kept] = st.prec_phi
            rec["prec_log_psi2"][kept] = st.prec_logpsi2
            rec["prec_eta"][kept] = st.prec_eta
            rec["prec_kappa"][kept] = st.prec_kappa
            if frozen is None:
                rec["alpha"][kept] = st.alpha
                rec["gamma"][kept] = st.gamma
                rec["theta"][kept] = st.theta
                rec["Theta"][kept] = st.Theta
                rec["Sigma"][kept] = st.Sigma
                rec["xi"][kept] = st.xi
            kept += 1
    return rec


def _hkey(key):
    """Recursively convert list/tuple label keys to hashable tuples."""
    if isinstance(key, (list, tuple)):
        return tuple(_hkey(k) for k in key)
    return key


def _frozen_values(d: _ModelData, frozen_draws: PosteriorDraws) -> dict:
    """Posterior point values from a prior fit, matched by label."""
    src_cells = {_hkey(c): i
                 for i, c in enumerate(frozen_draws.labels["cell"])}
    src_lessons = {_hkey(c): i
                   for i, c in enumerate(frozen_draws.labels["lesson"])}
    src_ty = {_hkey(c): i
              for i, c in enumerate(frozen_draws.labels["teacher_year"])}
    src_items = {c: i for i, c in enumerate(frozen_draws.labels["item"])}

    xi_draws = frozen_draws.flat("xi")
    xi_mode = np.zeros(xi_draws.shape[1], dtype=np.int64)
    for ci in range(xi_draws.shape[1]):
        vals, counts = np.unique(xi_draws[:, ci], return_counts=True)
        xi_mode[ci] = int(vals[np.argmax(counts)])
    theta_mean = frozen_draws.flat("theta").mean(axis=0)
    Theta_mean = frozen_draws.flat("Theta").mean(axis=0)
    sigma_mean = frozen_draws.flat("Sigma").mean(axis=0)
    alpha_mean = frozen_draws.flat("alpha").mean(axis=0)
    gamma_mean = frozen_draws.flat("gamma").mean(axis=0)

    def pick(table, mapping, keys, what):
        idx = []
        for k in keys:
            kk = _hkey(k)
            if kk not in mapping:
                raise DataError(f"frozen fit lacks {what} {kk!r}")
            idx.append(mapping[kk])
        return table[idx]

    missing = [c for c in d.cell_keys if _hkey(c) not in src_cells]
    if missing:
        raise DataError(
            f"frozen fit lacks ideal scores for cells {missing[:3]}")
    xi = np.array([xi_mode[src_cells[_hkey(c)]] for c in d.cell_keys])
    alpha_idx = []
    for jid in d.item_ids:
        if jid not in src_items:
            raise DataError(f"frozen fit lacks item {jid!r}")
        alpha_idx.append(src_items[jid])
    if gamma_mean.shape[1] < d.kmax:
        raise DataError("frozen fit has fewer score categories than the data")
    return {
        "xi": xi,
        "theta": pick(theta_mean, src_lessons, d.lesson_keys, "lesson"),
        "Theta": pick(Theta_mean, src_ty, d.ty_keys, "teacher-year"),
        "Sigma": sigma_mean,
        "alpha": alpha_mean[alpha_idx],
        "gamma": gamma_mean[alpha_idx][:, :d.kmax],
    }


def _run_chain_star(args) -> dict[str, np.ndarray]:
    return _run_chain(*args)


def fit(ds: Dataset, config: HrmConfig,
        frozen_draws: PosteriorDraws | None = None,
        threads: int = 1) -> PosteriorDraws:
    """Run the sampler and return pooled post-burn-in draws.

    ``frozen_draws`` enables the two-phase protocol: ideal scores and all
    teacher/item parameters are held at point values from the earlier fit
    while only rater biases and variabilities are sampled.
    """
    config.validate()
    d = _prepare(ds, config)
    frozen = None
    if config.freeze_true_scores:
        if frozen_draws is None:
            raise DataError("freeze_true_scores requires a prior fit")
        frozen = _frozen_values(d, frozen_draws)
    n_unident = int(np.sum(~d.identified))
    if n_unident:
        log.info("%d rater-item%s parameter groups have no records and are "
                 "reported as unidentified",
                 n_unident, "-level" if config.covariate else "")

    chain_ids = list(range(config.chains))
    if threads > 1:
        # chains are CPU bound; processes sidestep the GIL and per-chain
        # seeds make the outcome identical to the sequential path
        with ProcessPoolExecutor(max_workers=min(threads,
                                                 config.chains)) as pool:
            chain_recs = list(pool.map(_run_chain_star,
                                       [(d, config, c, frozen)
                                        for c in chain_ids]))
    else:
        chain_recs = [_run_chain(d, config, c, frozen) for c in chain_ids]

    arrays = {name: np.stack([cr[name] for cr in chain_recs])
              for name in chain_recs[0]}
    labels = {
        "group": d.group_labels,
        "rater": d.rater_ids,
        "item": d.item_ids,
        "level": d.level_names,
        "lesson": d.lesson_keys,
        "teacher_year": d.ty_keys,
        "cell": d.cell_keys,
    }
    meta = {
        "config": config.digest_payload(),
        "config_digest": json_digest(config.digest_payload()),
        "dataset_digest": ds.digest(),
        "covariate": config.covariate,
        "frozen": bool(frozen is not None),
        "n_dims": d.n_dims,
        "identified": [int(v) for v in d.identified],
        "n_records": int(len(d.x)),
    }
    return PosteriorDraws(arrays=arrays, labels=labels, meta=meta)
