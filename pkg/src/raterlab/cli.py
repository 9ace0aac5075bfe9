"""Command-line entry point.

Subcommands: validate, concordance, gstudy, disattenuate, hrm, dstudy,
synth, report.  Exit codes: 0 success, 1 data/validation error, 2 numerical
non-convergence (results are still written, flagged), 64 usage error.

Every stochastic subcommand takes --seed; without one a seed is drawn from
system entropy and logged so the run stays reproducible after the fact.
Worker seeds derive from (seed, unit id), so --threads never changes
results.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import concordance as conc
from . import disattenuation as disat
from . import dstudy as dst
from . import gtheory as gt
from . import hrm as hrm_mod
from . import report as report_mod
from . import synthgen
from ._util import write_csv, write_json
from .dataset import HUMAN_FAMILY, Dataset, load_dataset
from .errors import (DataError, InestimableTermError, InfeasibleScenarioError,
                     RaterlabError)

log = logging.getLogger("raterlab")

EXIT_OK = 0
EXIT_DATA = 1
EXIT_NONCONVERGENCE = 2
EXIT_USAGE = 64


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D102 - argparse hook
        raise _UsageError(message)


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="bundle dir with ratings.csv, scale.json, "
                                  "roster.csv and optional attributes.csv")
    p.add_argument("--ratings")
    p.add_argument("--scale")
    p.add_argument("--roster")
    p.add_argument("--attributes")


def _load(args) -> Dataset:
    if args.data:
        base = Path(args.data)
        ratings = base / "ratings.csv"
        scale = base / "scale.json"
        roster = base / "roster.csv"
        attributes = base / "attributes.csv"
        attributes = attributes if attributes.exists() else None
    else:
        if not (args.ratings and args.scale and args.roster):
            raise _UsageError("pass --data DIR or all of --ratings --scale "
                              "--roster")
        ratings, scale, roster = args.ratings, args.scale, args.roster
        attributes = args.attributes
    return load_dataset(ratings, scale, roster, attributes)


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    seed = int.from_bytes(os.urandom(4), "big")
    log.info("no --seed given; derived %d from system entropy", seed)
    return seed


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_meta(path: Path, operation: str, ds: Dataset | None,
                params: dict) -> None:
    meta = {"operation": operation, "params": params}
    if ds is not None:
        meta["dataset_digest"] = ds.digest()
    write_json(Path(str(path) + ".meta.json"), meta)


def _distribution_rows(ds: Dataset) -> list[list]:
    counts: dict[tuple[str, str, int], int] = {}
    for rec in ds.records:
        key = (rec.item_id, rec.family, rec.score)
        counts[key] = counts.get(key, 0) + 1
    return [[item, family, score, n]
            for (item, family, score), n in sorted(counts.items())]


# ---------------------------------------------------------------------- cmds

def _cmd_validate(args) -> int:
    ds = _load(args)
    print(f"records: {len(ds.records)}")
    print(f"items: {len(ds.scale)}  families: {', '.join(ds.families())}")
    print(f"teachers: {len(ds.teachers())}  raters: {len(ds.roster)}")
    print(f"digest: {ds.digest()[:16]}...")
    if args.out:
        out = _out_dir(args)
        path = out / "distributions.csv"
        write_csv(path, ["item", "family", "score", "count"],
                  _distribution_rows(ds))
        _write_meta(path, "validate", ds, {})
        print(f"wrote {path}")
    return EXIT_OK


def _cmd_concordance(args) -> int:
    ds = _load(args)
    seed = _resolve_seed(args)
    items = args.items.split(",") if args.items else ds.items()
    families = (args.family.split(",") if args.family
                else ds.families())
    metrics = ([conc.Metric(args.metric)] if args.metric != "all"
               else list(conc.Metric))
    rows = []
    for item in items:
        if item not in ds.scale:
            raise DataError(f"unknown item {item!r}")
        for family in families:
            for metric in metrics:
                res = conc.bootstrap_ci(ds, metric, family, B=args.bootstrap,
                                        seed=seed, alpha=args.alpha,
                                        item_id=item)
                rows.append([item, family, metric.value, res.estimate,
                             res.ci_low, res.ci_high, res.n_pairs])
    out = _out_dir(args)
    path = out / "concordance.csv"
    write_csv(path, ["item", "family", "metric", "estimate", "ci_low",
                     "ci_high", "n"], rows)
    _write_meta(path, "concordance", ds,
                {"seed": seed, "B": args.bootstrap, "alpha": args.alpha})
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_gstudy(args) -> int:
    ds = _load(args)
    families = args.family.split(",") if args.family else ds.families()
    by_item = args.design in ("rxoi", "rxsoi")
    items = (args.items.split(",") if args.items else ds.items()) \
        if by_item else [None]
    jobs = [(item, family) for item in items for family in families]

    def run(job):
        item, family = job
        return gt.gstudy(ds, args.design, family, item)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    comp_rows, coef_rows = [], []
    nonconverged = 0
    for res in results:
        label = res.item
        for term in sorted(res.components.components):
            comp_rows.append([label, res.family, term,
                              res.components.components[term]])
        coef_rows.append([label, res.family, res.erho2, res.phi])
        if not res.components.converged:
            nonconverged += 1
    out = _out_dir(args)
    p1 = out / "gstudy_components.csv"
    write_csv(p1, ["item", "family", "term", "variance"], comp_rows)
    p2 = out / "gstudy_coefficients.csv"
    write_csv(p2, ["item", "family", "erho2", "phi"], coef_rows)
    params = {"design": args.design}
    _write_meta(p1, "gstudy", ds, params)
    _write_meta(p2, "gstudy", ds, params)
    print(f"wrote {p1} and {p2}")
    if nonconverged:
        log.warning("%d fits did not converge", nonconverged)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


def _cmd_disattenuate(args) -> int:
    ds = _load(args)
    seed = _resolve_seed(args)
    family_a, family_b = (args.families.split(",") + [None, None])[:2]
    if not family_a or not family_b:
        raise _UsageError("--families takes two comma-separated tags")
    items = args.item.split(",") if args.item else ds.items()
    rows = []
    for item in items:
        vc_a = gt.gstudy(ds, "rxoi", family_a, item)
        vc_b = gt.gstudy(ds, "rxoi", family_b, item)
        reference = None
        panel_corr = float("nan")
        try:
            from .dataset import sample_reference_raters, paired_scores
            reference = sample_reference_raters(ds, seed)
            pairs = paired_scores(ds, reference, family_b, item_id=item,
                                  seed=seed)
            cors = conc.rank_correlations([(float(a), float(b))
                                           for a, b in pairs])
            panel_corr = cors[conc.Metric.PEARSON_R].estimate
        except (DataError, KeyError):
            pass
        res = disat.analyze_item(
            ds, item, family_a, family_b, erho2_a=vc_a.erho2,
            erho2_b=vc_b.erho2, B=args.bootstrap, alpha=args.alpha,
            seed=seed, panel_corr=panel_corr)
        flags = []
        if res.spurious_flag:
            flags.append("spurious")
        if res.overunity_flag:
            flags.append("overunity")
        if res.incalculable:
            flags.append("incalculable")
        rows.append([item, res.raw_corr, res.raw_ci[0], res.raw_ci[1],
                     res.disattenuated, res.disattenuated_ci[0],
                     res.disattenuated_ci[1], "|".join(flags)])
    out = _out_dir(args)
    path = out / "disattenuation.csv"
    write_csv(path, ["item", "raw", "raw_lo", "raw_hi", "disatten", "dis_lo",
                     "dis_hi", "flags"], rows)
    _write_meta(path, "disattenuate", ds,
                {"seed": seed, "families": [family_a, family_b],
                 "B": args.bootstrap, "alpha": args.alpha})
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_hrm(args) -> int:
    if args.action != "fit":
        raise _UsageError(f"unknown hrm action {args.action!r}")
    ds = _load(args)
    seed = _resolve_seed(args)
    config = hrm_mod.HrmConfig(
        chains=args.chains, iterations=args.iters, burn_in=args.burnin,
        thin=args.thin, seed=seed, covariate=args.covariate,
        families=tuple(args.family.split(",")) if args.family else None,
        freeze_true_scores=bool(args.freeze_from))
    frozen = hrm_mod.load_draws(args.freeze_from) if args.freeze_from else None
    draws = hrm_mod.fit(ds, config, frozen_draws=frozen,
                        threads=args.threads)
    out = _out_dir(args)
    draws_path = out / "hrm_draws.bin"
    hrm_mod.save_draws(draws, draws_path)

    summaries = hrm_mod.summarize_bias(draws, alpha=args.alpha)
    contrasts = []
    if args.covariate:
        levels = sorted({lvl for _, _, lvl in draws.labels["group"]
                         if lvl})[:2]
        if len(levels) == 2:
            contrasts = hrm_mod.fairness_contrast(
                draws, level_a=levels[0], level_b=levels[-1],
                alpha=args.alpha)
    contrast_of = {(c.rater_id, c.item_id): c for c in contrasts}
    rows = []
    for s in summaries:
        c = contrast_of.get((s.rater_id, s.item_id))
        rows.append([
            s.rater_id, s.item_id, s.phi_mean, s.phi_lo, s.phi_hi,
            s.psi_mean,
            c.delta_mean if c else "", c.delta_lo if c else "",
            c.delta_hi if c else "",
            "|".join(filter(None, [
                s.severity,
                "violation" if (c and c.independence_violation) else "",
                s.level])),
        ])
    path = out / "hrm_bias.csv"
    write_csv(path, ["rater", "item", "phi", "phi_lo", "phi_hi", "psi",
                     "delta", "delta_lo", "delta_hi", "flags"], rows)
    _write_meta(path, "hrm", ds, {"seed": seed, "chains": args.chains,
                                  "iters": args.iters,
                                  "covariate": args.covariate})
    _write_meta(draws_path, "hrm", ds, {"seed": seed})
    if args.covariate and contrasts:
        frows = [[c.rater_id, c.item_id, c.delta_mean, c.delta_lo,
                  c.delta_hi, int(c.independence_violation), c.note]
                 for c in contrasts]
        fpath = out / "hrm_fairness.csv"
        write_csv(fpath, ["rater", "item", "delta", "delta_lo", "delta_hi",
                          "violation", "note"], frows)
        _write_meta(fpath, "hrm", ds, {"seed": seed})
    print(f"wrote {path} and {draws_path}")

    worst = hrm_mod.rhat_max(draws)
    if worst >= 1.1:
        log.warning("max split R-hat %.3f >= 1.1: treat results as "
                    "non-converged", worst)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


def _cmd_dstudy(args) -> int:
    ds = _load(args)
    family_h, family_m = (args.families.split(",") + [None])[:2] \
        if args.families else (HUMAN_FAMILY, None)
    items = args.item.split(",") if args.item else ds.items()
    rows = []
    for item in items:
        vc_h = gt.fit_variance_components(ds, "rxsoi", family_h, item)
        vc_m = None
        if family_m:
            vc_m = gt.fit_variance_components(ds, "rxsoi", family_m, item)
        series = dst.sweep(vc_h, vc_m, max_observations=args.max_obs)
        wanted = None if args.scenario == "all" else {
            "hil": "hil-single", "human": "human",
            "second-human": "second-human", "ensemble": "hil-ensemble",
        }[args.scenario]
        for res in series:
            if wanted is not None and res.label != wanted:
                continue
            rows.append([item, res.label, res.n_observations, res.phi_tilde,
                         res.human_minutes])
    out = _out_dir(args)
    path = out / "dstudy.csv"
    write_csv(path, ["item", "scenario", "n_obs", "phi_tilde",
                     "human_minutes"], rows)
    _write_meta(path, "dstudy", ds, {"scenario": args.scenario,
                                     "max_obs": args.max_obs})
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_synth(args) -> int:
    seed = _resolve_seed(args)
    spec_args = {}
    if args.spec:
        spec_args = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    spec_args.setdefault("seed", seed)
    out = Path(args.out or ".")
    if args.mode == "gstudy":
        families = {
            name: synthgen.FamilySpec(**fam)
            for name, fam in spec_args.pop("families", {}).items()}
        if families:
            spec_args["families"] = families
        spec = synthgen.GStudySpec(**spec_args)
        ds, oracle = synthgen.gen_gstudy_dataset(spec)
    else:
        for key in ("categories", "dimensions", "alpha"):
            if key in spec_args:
                spec_args[key] = tuple(spec_args[key])
        if "gamma" in spec_args and spec_args["gamma"] is not None:
            spec_args["gamma"] = tuple(tuple(g) for g in spec_args["gamma"])
        if "delta" in spec_args:
            spec_args["delta"] = {
                (k.split("|")[0], k.split("|")[1]): v
                for k, v in spec_args["delta"].items()}
        spec = synthgen.HrmSynthSpec(**spec_args)
        ds, _attrs, oracle = synthgen.gen_hrm_dataset(spec)
    files = synthgen.write_bundle(out, ds, oracle)
    print(f"wrote {', '.join(files)} to {out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    src = Path(getattr(args, "in"))
    inputs: dict[str, report_mod.PanelInput] = {}

    def maybe(panel: str, filename: str, operation: str):
        path = src / filename
        if path.exists():
            inputs[panel] = report_mod.read_panel_input(path, operation)

    maybe("distributions", "distributions.csv", "validate")
    maybe("concordance", "concordance.csv", "concordance")
    maybe("bias", "hrm_bias.csv", "hrm")
    maybe("fairness", "hrm_fairness.csv", "hrm")
    maybe("dstudy", "dstudy.csv", "dstudy")

    coef_path = src / "gstudy_coefficients.csv"
    if coef_path.exists():
        coef = report_mod.read_panel_input(coef_path, "gstudy")
        dis_path = src / "disattenuation.csv"
        dis_rows = {}
        if dis_path.exists():
            dis = report_mod.read_panel_input(dis_path, "disattenuate")
            dis_rows = {row["item"]: row for row in dis.rows}
        merged = []
        for row in coef.rows:
            extra = dis_rows.get(row["item"], {})
            merged.append({
                "item": row["item"], "family": row["family"],
                "erho2": row["erho2"], "phi": row["phi"],
                "disattenuated": extra.get("disatten", ""),
                "dis_lo": extra.get("dis_lo", ""),
                "dis_hi": extra.get("dis_hi", ""),
                "flags": extra.get("flags", ""),
            })
        inputs["gtheory"] = report_mod.PanelInput(
            operation="gstudy+disattenuate", rows=merged,
            dataset_digest=coef.dataset_digest,
            source_path=str(coef_path))

    # rename columns to panel schema where the source CSV differs
    if "bias" in inputs:
        for row in inputs["bias"].rows:
            row.setdefault("level", "")
            row.setdefault("severity", row.get("flags", ""))
    if "fairness" in inputs:
        pass

    bundle = report_mod.build_panels(inputs)
    out = _out_dir(args)
    files = report_mod.emit(bundle, out)
    print(f"wrote {', '.join(files)} to {out}")
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> _Parser:
    parser = _Parser(prog="raterlab",
                     description="annotation-quality analytics")
    parser.add_argument("--log-level", default="warning",
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, stochastic=True, data=True):
        if data:
            _add_data_args(p)
        p.add_argument("--out", help="output directory (default cwd)")
        p.add_argument("--threads", type=int, default=1)
        if stochastic:
            p.add_argument("--seed", type=int, default=None)
            p.add_argument("--alpha", type=float, default=0.05)

    p = sub.add_parser("validate", help="load and validate a bundle")
    common(p, stochastic=False)
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("concordance", help="agreement/correlation panel")
    common(p)
    p.add_argument("--family", help="comma-separated family tags")
    p.add_argument("--items", help="comma-separated item ids")
    p.add_argument("--metric", default="all")
    p.add_argument("--bootstrap", type=int, default=1000)
    p.set_defaults(func=_cmd_concordance)

    p = sub.add_parser("gstudy", help="variance components and coefficients")
    common(p, stochastic=False)
    p.add_argument("--design", default="rxoi",
                   choices=["rxoi", "rxsoi", "jxrxsoi", "jxrxoi"])
    p.add_argument("--family")
    p.add_argument("--items")
    p.set_defaults(func=_cmd_gstudy)

    p = sub.add_parser("disattenuate", help="cross-lesson latent correlation")
    common(p)
    p.add_argument("--item")
    p.add_argument("--families", default=f"{HUMAN_FAMILY},model")
    p.add_argument("--bootstrap", type=int, default=1000)
    p.set_defaults(func=_cmd_disattenuate)

    p = sub.add_parser("hrm", help="hierarchical rater model")
    p.add_argument("action", choices=["fit"])
    common(p)
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--burnin", type=int, default=1000)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--covariate")
    p.add_argument("--family", help="families to include")
    p.add_argument("--freeze-from", dest="freeze_from",
                   help="posterior draws file from a prior fit")
    p.set_defaults(func=_cmd_hrm)

    p = sub.add_parser("dstudy", help="decision-study projections")
    common(p, stochastic=False)
    p.add_argument("--item")
    p.add_argument("--families", help="human,model family tags")
    p.add_argument("--scenario", default="all",
                   choices=["all", "hil", "human", "second-human",
                            "ensemble"])
    p.add_argument("--max-obs", dest="max_obs", type=int, default=10)
    p.set_defaults(func=_cmd_dstudy)

    p = sub.add_parser("synth", help="generate an oracle dataset")
    p.add_argument("--mode", required=True, choices=["gstudy", "hrm"])
    p.add_argument("--spec", help="JSON spec file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("report", help="assemble panels from results")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse -h
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(all="ignore")
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, InestimableTermError, InfeasibleScenarioError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except RaterlabError as exc:
        log.error("%s", exc)
        return EXIT_DATA


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
