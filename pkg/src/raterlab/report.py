"""Assemble per-item, per-family results into panel tables and plot data.

Panels join on (item, family) keyed to one dataset digest; a digest mismatch
between inputs refuses to join.  Emission is byte-stable: fixed float
formatting, sorted rows, no timestamps, and a manifest that traces every
panel back to the operations and files it came from.  Verdicts derive
mechanically: a family beating the human baseline on more than half the
compared metrics gets a check, losing on more than half a cross, anything
else a question mark.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from ._util import file_digest, fmt_num, write_csv, write_json
from .errors import DataError

PANEL_NAMES = ("distributions", "concordance", "gtheory", "bias", "fairness",
               "dstudy")

VERDICT_BETTER = "better"
VERDICT_WORSE = "worse"
VERDICT_UNCLEAR = "unclear"


@dataclass
class PanelInput:
    """One upstream result table plus its provenance."""
    operation: str
    rows: list[dict]
    dataset_digest: str
    source_path: str | None = None


@dataclass
class PanelBundle:
    dataset_digest: str
    panels: dict[str, list[dict]] = field(default_factory=dict)
    verdicts: list[dict] = field(default_factory=list)
    provenance: dict[str, list[dict]] = field(default_factory=dict)
    missing: list[str] = field(default_factory=list)


def _as_float(value) -> float:
    if value in (None, ""):
        return math.nan
    try:
        return float(value)
    except (TypeError, ValueError):
        return math.nan


def derive_verdicts(concordance_rows: list[dict],
                    human_family: str = "human") -> list[dict]:
    """Per (item, family): compare each metric against the human baseline."""
    table: dict[tuple[str, str, str], float] = {}
    items, families, metrics = set(), set(), set()
    for row in concordance_rows:
        est = _as_float(row.get("estimate"))
        key = (row["item"], row["family"], row["metric"])
        table[key] = est
        items.add(row["item"])
        families.add(row["family"])
        metrics.add(row["metric"])
    out = []
    for item in sorted(items):
        for family in sorted(families - {human_family}):
            wins = losses = compared = 0
            for metric in sorted(metrics):
                mine = table.get((item, family, metric), math.nan)
                base = table.get((item, human_family, metric), math.nan)
                if math.isnan(mine) or math.isnan(base):
                    continue
                compared += 1
                if mine > base:
                    wins += 1
                elif mine < base:
                    losses += 1
            if compared == 0:
                verdict = VERDICT_UNCLEAR
            elif wins * 2 > compared:
                verdict = VERDICT_BETTER
            elif losses * 2 > compared:
                verdict = VERDICT_WORSE
            else:
                verdict = VERDICT_UNCLEAR
            out.append({"item": item, "family": family, "verdict": verdict,
                        "metrics_compared": compared, "wins": wins,
                        "losses": losses})
    return out


def build_panels(inputs: dict[str, PanelInput]) -> PanelBundle:
    """Join upstream outputs that share one dataset digest into panels.

    ``inputs`` maps panel name (see PANEL_NAMES) to its table; missing
    analyses become explicit gaps in the bundle, never zero-filled rows.
    """
    digests = {inp.dataset_digest for inp in inputs.values()
               if inp.dataset_digest}
    if len(digests) > 1:
        raise DataError(f"refusing to join results from different datasets: "
                        f"{sorted(digests)}")
    digest = digests.pop() if digests else ""
    bundle = PanelBundle(dataset_digest=digest)
    for name in PANEL_NAMES:
        if name in inputs:
            bundle.panels[name] = inputs[name].rows
            src = {"operation": inputs[name].operation}
            if inputs[name].source_path:
                src["file"] = str(inputs[name].source_path)
                src["digest"] = file_digest(inputs[name].source_path)
            bundle.provenance[name] = [src]
        else:
            bundle.missing.append(name)
    if "concordance" in bundle.panels:
        bundle.verdicts = derive_verdicts(bundle.panels["concordance"])
    return bundle


_PANEL_COLUMNS = {
    "distributions": ["item", "family", "score", "count"],
    "concordance": ["item", "family", "metric", "estimate", "ci_low",
                    "ci_high", "n"],
    "gtheory": ["item", "family", "erho2", "phi", "disattenuated", "dis_lo",
                "dis_hi", "flags"],
    "bias": ["rater", "item", "level", "phi", "phi_lo", "phi_hi", "psi",
             "severity"],
    "fairness": ["rater", "item", "delta", "delta_lo", "delta_hi",
                 "violation", "note"],
    "dstudy": ["item", "scenario", "n_obs", "phi_tilde", "human_minutes"],
}


def emit(bundle: PanelBundle, out_dir: str | Path) -> list[str]:
    """Write one CSV per present panel plus the manifest; byte-stable."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output dir {out}: {exc}") from exc

    written: list[str] = []
    manifest: dict = {
        "dataset_digest": bundle.dataset_digest,
        "panels": {},
        "missing_panels": sorted(bundle.missing),
        "verdicts": bundle.verdicts,
    }
    for name, rows in sorted(bundle.panels.items()):
        cols = _PANEL_COLUMNS[name]
        path = out / f"panel_{name}.csv"
        sorted_rows = sorted(rows, key=lambda r: [fmt_num(r.get(c, ""))
                                                  for c in cols])
        write_csv(path, cols,
                  [[row.get(c, "") for c in cols] for row in sorted_rows])
        manifest["panels"][name] = {
            "file": path.name,
            "rows": len(rows),
            "digest": file_digest(path),
            "sources": bundle.provenance.get(name, []),
        }
        written.append(path.name)
    write_json(out / "manifest.json", manifest)
    written.append("manifest.json")
    return sorted(written)


def read_panel_input(path: str | Path, operation: str) -> PanelInput:
    """Load an upstream CSV and its sidecar metadata as a panel input."""
    path = Path(path)
    meta_path = path.with_suffix(path.suffix + ".meta.json")
    digest = ""
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        digest = meta.get("dataset_digest", "")
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            rows.append(dict(zip(header, line.split(","))))
    return PanelInput(operation=operation, rows=rows, dataset_digest=digest,
                      source_path=str(path))
