"""Decision studies: projected dependability under hypothetical designs.

Components come from teacher-year R x (S:O:I) fits.  A scenario lists, per
rater family, how many segments, observations, and raters the family
contributes exclusively and how many it shares with the other families
(raters are never shared).  The projected dependability is

    phi_tilde = sum_f var(i)_f / (sum_f var(i)_f + sum_f abs_err_f)

where each family's absolute error divides its variance terms by the
effective counts n'_k = exclusive_k + shared_k:

    abs_err = v(r)/n'_r + v(o:i)/n'_o + v(ir)/n'_r
              + v(s:o:i)/(n'_s n'_o) + v(s:o:ir)/(n'_s n'_o n'_r)

The human-in-the-loop template: one shared observation per visit, the human
present for 2 of the 8 segments of a 60-minute class (15 minutes), a single
model watching the remaining 6, one rater on each side.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import DataError, InfeasibleScenarioError
from .gtheory import VarianceComponents

# class-period geometry (configurable per call)
CLASS_MINUTES = 60.0
SEGMENT_MINUTES = 7.5
HUMAN_WINDOW_MINUTES = 15.0

_TERM_OF_FACET = {"r": "r", "o": "o:i", "s": "s:o:i"}


@dataclass
class FacetCounts:
    """Per-family facet counts; effective n' adds the shared part."""
    exclusive: dict[str, float] = field(default_factory=dict)
    shared: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.shared.get("r", 0.0) != 0.0:
            raise DataError("raters are never shared across families")
        for k, v in list(self.exclusive.items()) + list(self.shared.items()):
            if k not in ("s", "o", "r"):
                raise DataError(f"unknown facet {k!r}")
            if v < 0:
                raise DataError(f"negative count for facet {k!r}")

    def effective(self, facet: str) -> float:
        return self.exclusive.get(facet, 0.0) + self.shared.get(facet, 0.0)


@dataclass
class DStudyScenario:
    label: str
    families: dict[str, VarianceComponents]
    counts: dict[str, FacetCounts]

    def __post_init__(self):
        if not self.families:
            raise DataError("scenario needs at least one family")
        if set(self.families) != set(self.counts):
            raise DataError("families and counts must list the same keys")


@dataclass
class DStudyResult:
    label: str
    phi_tilde: float
    per_family_error: dict[str, float]
    human_minutes: float = 0.0
    model_observation_minutes: float = 0.0
    n_observations: int = 0


def absolute_error(vc: VarianceComponents, counts: FacetCounts) -> float:
    """Projected absolute error variance for one family."""
    comp = vc.components
    v = {
        "r": comp.get("r", 0.0),
        "o:i": comp.get("o:i", 0.0),
        "ir": comp.get("ir", 0.0),
        "s:o:i": comp.get("s:o:i", 0.0),
        "s:o:ir": comp.get("residual", comp.get("s:o:ir", 0.0)),
    }
    n_r = counts.effective("r")
    n_o = counts.effective("o")
    n_s = counts.effective("s")
    total = 0.0
    for variance, divisor, name in (
            (v["r"], n_r, "r"),
            (v["o:i"], n_o, "o"),
            (v["ir"], n_r, "r"),
            (v["s:o:i"], n_s * n_o, "s*o"),
            (v["s:o:ir"], n_s * n_o * n_r, "s*o*r")):
        if variance == 0.0:
            continue
        if divisor <= 0.0:
            raise InfeasibleScenarioError(
                f"facet count {name} is zero but its variance term is "
                f"{variance:g}")
        total += variance / divisor
    return total


def phi_tilde(scenario: DStudyScenario) -> DStudyResult:
    """Projected dependability for a (possibly multi-family) scenario."""
    numer = 0.0
    errors = {}
    for fam in sorted(scenario.families):
        vc = scenario.families[fam]
        numer += vc.components.get("i", 0.0)
        errors[fam] = absolute_error(vc, scenario.counts[fam])
    denom = numer + sum(errors.values())
    value = numer / denom if denom > 0.0 else 0.0
    return DStudyResult(label=scenario.label, phi_tilde=value,
                        per_family_error=errors)


def human_only_scenario(human_vc: VarianceComponents, n_observations: int,
                        n_raters: int = 1, n_segments: float = 2,
                        label: str = "human") -> DStudyScenario:
    if n_observations < 1:
        raise DataError("need n_observations >= 1")
    counts = FacetCounts(exclusive={"s": n_segments, "o": n_observations,
                                    "r": n_raters})
    return DStudyScenario(label=label, families={"human": human_vc},
                          counts={"human": counts})


def hil_scenario(human_vc: VarianceComponents, model_vc: VarianceComponents,
                 n_observations: int, n_model_raters: int = 1,
                 human_segments: float = 2, model_extra_segments: float = 6,
                 label: str = "hil") -> DStudyScenario:
    """Human-in-the-loop design: shared observations, split segments.

    With one observation this instantiates the canonical parameter set
    {n_o_m = 0, n_o_h = 0, n_o_shared = 1, n_s_m = 6, n_s_h = 0,
    n_s_shared = 2, n_r_m = 1, n_r_h = 1}; more observations scale the
    shared observation count.
    """
    if n_observations < 1:
        raise DataError("need n_observations >= 1")
    human_counts = FacetCounts(
        exclusive={"s": 0.0, "o": 0.0, "r": 1.0},
        shared={"s": human_segments, "o": float(n_observations)})
    model_counts = FacetCounts(
        exclusive={"s": model_extra_segments, "o": 0.0,
                   "r": float(n_model_raters)},
        shared={"s": human_segments, "o": float(n_observations)})
    return DStudyScenario(
        label=label,
        families={"human": human_vc, "model": model_vc},
        counts={"human": human_counts, "model": model_counts})


def evaluate_hil(human_vc: VarianceComponents, model_vc: VarianceComponents,
                 n_observations: int, n_model_raters: int = 1,
                 human_minutes_per_obs: float = HUMAN_WINDOW_MINUTES,
                 class_minutes: float = CLASS_MINUTES,
                 label: str = "hil") -> DStudyResult:
    sc = hil_scenario(human_vc, model_vc, n_observations,
                      n_model_raters=n_model_raters, label=label)
    res = phi_tilde(sc)
    res.human_minutes = human_minutes_per_obs * n_observations
    res.model_observation_minutes = class_minutes * n_observations
    res.n_observations = n_observations
    return res


def evaluate_human_only(human_vc: VarianceComponents, n_observations: int,
                        n_raters: int = 1,
                        human_minutes_per_obs: float = HUMAN_WINDOW_MINUTES,
                        label: str = "human") -> DStudyResult:
    sc = human_only_scenario(human_vc, n_observations, n_raters=n_raters,
                             label=label)
    res = phi_tilde(sc)
    res.human_minutes = human_minutes_per_obs * n_observations
    res.n_observations = n_observations
    return res


def sweep(human_vc: VarianceComponents, model_vc: VarianceComponents | None,
          max_observations: int = 10) -> list[DStudyResult]:
    """Plot-ready series: human baseline, second human, single-model HIL,
    and model-ensemble HIL across observation counts."""
    if max_observations < 1:
        raise DataError("need max_observations >= 1")
    out: list[DStudyResult] = []
    for n_obs in range(1, max_observations + 1):
        out.append(evaluate_human_only(human_vc, n_obs, n_raters=1,
                                       label="human"))
        out.append(evaluate_human_only(human_vc, n_obs, n_raters=2,
                                       label="second-human"))
        if model_vc is not None:
            out.append(evaluate_hil(human_vc, model_vc, n_obs,
                                    n_model_raters=1, label="hil-single"))
            out.append(evaluate_hil(human_vc, model_vc, n_obs,
                                    n_model_raters=3, label="hil-ensemble"))
    return out


def crossover_savings(human_series: list[DStudyResult],
                      hil_series: list[DStudyResult]) -> dict | None:
    """Human minutes saved when the HIL design first matches the best
    human-only dependability in a sweep; None when it never does."""
    if not human_series or not hil_series:
        return None
    best_human = max(human_series, key=lambda r: r.phi_tilde)
    for res in sorted(hil_series, key=lambda r: r.n_observations):
        if res.phi_tilde >= best_human.phi_tilde:
            return {
                "human_n_obs": best_human.n_observations,
                "hil_n_obs": res.n_observations,
                "human_minutes_saved": best_human.human_minutes -
                res.human_minutes,
                "phi_tilde_human": best_human.phi_tilde,
                "phi_tilde_hil": res.phi_tilde,
            }
    return None
