"""Multi-facet rating data: ingestion, validation, indexing, recoding.

A rating dataset couples four files:

* ratings CSV with the exact header
  ``rater_id,family,teacher_id,year,observation_id,segment_index,item_id,score``
* a JSON scale file: list of
  ``{item_id, categories, reverse_coded, dimension, segment_minutes}``
* a roster CSV ``rater_id,family``
* an optional attributes CSV ``teacher_id,attribute,value``

Scores are stored post-recode (reverse-coded items flipped so higher is
better); raw values appear only in the load log.  The loaded Dataset is
immutable and safe to share across workers.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from ._util import derive_rng, derive_seed, file_digest
from .errors import DataError

log = logging.getLogger(__name__)

RATINGS_HEADER = ["rater_id", "family", "teacher_id", "year",
                  "observation_id", "segment_index", "item_id", "score"]
ROSTER_HEADER = ["rater_id", "family"]
ATTRIBUTES_HEADER = ["teacher_id", "attribute", "value"]

HUMAN_FAMILY = "human"

# A cell is the finest unit a rater scores: one segment of one observation
# on one item.
Cell = tuple[str, int, str]


@dataclass(frozen=True)
class ScaleSpec:
    """One rubric item: category count, coding direction, latent dimension."""
    item_id: str
    category_count: int
    reverse_coded: bool = False
    dimension: int = 1
    segment_minutes: float = 7.5

    def __post_init__(self):
        if self.category_count < 2:
            raise DataError(f"item {self.item_id!r}: categories must be >= 2")
        if self.segment_minutes <= 0:
            raise DataError(f"item {self.item_id!r}: segment_minutes must be > 0")


@dataclass(frozen=True)
class RatingRecord:
    """One observed score with its full facet coordinates."""
    rater_id: str
    family: str
    teacher_id: str
    year: str
    observation_id: str
    segment_index: int
    item_id: str
    score: int

    @property
    def cell(self) -> Cell:
        return (self.observation_id, self.segment_index, self.item_id)

    @property
    def teacher_year(self) -> tuple[str, str]:
        return (self.teacher_id, self.year)


@dataclass(frozen=True)
class TeacherAttributes:
    """Sensitive-attribute levels per teacher, e.g. race -> {B, W}."""
    values: dict[str, dict[str, str]] = field(default_factory=dict)

    def level(self, teacher_id: str, attribute: str) -> str | None:
        return self.values.get(teacher_id, {}).get(attribute)

    def levels(self, attribute: str) -> list[str]:
        found = {v[attribute] for v in self.values.values() if attribute in v}
        return sorted(found)


@dataclass(frozen=True)
class Dataset:
    """Validated, recoded, indexed rating data."""
    records: tuple[RatingRecord, ...]
    scale: dict[str, ScaleSpec]
    roster: dict[str, str]
    attributes: TeacherAttributes
    provenance: dict[str, str]
    recoded: bool = True

    # single-facet indices, record positions per coordinate
    _by_rater: dict[str, tuple[int, ...]] = field(default_factory=dict, repr=False)
    _by_teacher: dict[str, tuple[int, ...]] = field(default_factory=dict, repr=False)
    _by_observation: dict[str, tuple[int, ...]] = field(default_factory=dict, repr=False)
    _by_item: dict[str, tuple[int, ...]] = field(default_factory=dict, repr=False)
    _by_family: dict[str, tuple[int, ...]] = field(default_factory=dict, repr=False)

    @staticmethod
    def build(records: list[RatingRecord], scale: dict[str, ScaleSpec],
              roster: dict[str, str], attributes: TeacherAttributes | None = None,
              provenance: dict[str, str] | None = None) -> "Dataset":
        """Validate and index records that are already recoded."""
        attributes = attributes or TeacherAttributes()
        seen: set[tuple] = set()
        for pos, rec in enumerate(records):
            if rec.rater_id not in roster:
                raise DataError(f"row {pos + 1}: unknown rater {rec.rater_id!r}")
            if rec.item_id not in scale:
                raise DataError(f"row {pos + 1}: unknown item {rec.item_id!r}")
            k = scale[rec.item_id].category_count
            if not 1 <= rec.score <= k:
                raise DataError(
                    f"row {pos + 1}: score {rec.score} out of range 1..{k} "
                    f"for item {rec.item_id!r}")
            key = (rec.rater_id, rec.teacher_id, rec.observation_id,
                   rec.segment_index, rec.item_id)
            if key in seen:
                raise DataError(f"row {pos + 1}: duplicate facet tuple {key}")
            seen.add(key)

        def index(keyfn):
            out: dict[str, list[int]] = {}
            for pos, rec in enumerate(records):
                out.setdefault(keyfn(rec), []).append(pos)
            return {k: tuple(v) for k, v in out.items()}

        return Dataset(
            records=tuple(records), scale=dict(scale), roster=dict(roster),
            attributes=attributes, provenance=dict(provenance or {}),
            _by_rater=index(lambda r: r.rater_id),
            _by_teacher=index(lambda r: r.teacher_id),
            _by_observation=index(lambda r: r.observation_id),
            _by_item=index(lambda r: r.item_id),
            _by_family=index(lambda r: r.family),
        )

    # -- lookups ---------------------------------------------------------

    def by_rater(self, rater_id: str) -> tuple[RatingRecord, ...]:
        return tuple(self.records[i] for i in self._by_rater.get(rater_id, ()))

    def by_teacher(self, teacher_id: str) -> tuple[RatingRecord, ...]:
        return tuple(self.records[i] for i in self._by_teacher.get(teacher_id, ()))

    def by_observation(self, observation_id: str) -> tuple[RatingRecord, ...]:
        return tuple(self.records[i] for i in self._by_observation.get(observation_id, ()))

    def by_item(self, item_id: str) -> tuple[RatingRecord, ...]:
        return tuple(self.records[i] for i in self._by_item.get(item_id, ()))

    def by_family(self, family: str) -> tuple[RatingRecord, ...]:
        return tuple(self.records[i] for i in self._by_family.get(family, ()))

    def families(self) -> list[str]:
        return sorted(self._by_family)

    def items(self) -> list[str]:
        return sorted(self.scale)

    def teachers(self) -> list[str]:
        return sorted(self._by_teacher)

    def digest(self) -> str:
        return self.provenance.get("bundle", "")


def _read_csv(path: Path, expected_header: list[str]) -> list[dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if header != expected_header:
            raise DataError(
                f"{path}: bad header {header!r}, expected {expected_header!r}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected_header):
                raise DataError(f"{path}:{lineno}: expected "
                                f"{len(expected_header)} columns, got {len(row)}")
            rows.append(dict(zip(expected_header, row)))
        return rows


def load_scale(path: str | Path) -> dict[str, ScaleSpec]:
    """Parse the JSON scale file into ScaleSpec objects and check dimensions."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, list) or not raw:
        raise DataError(f"{path}: expected a non-empty JSON list of items")
    scale: dict[str, ScaleSpec] = {}
    for entry in raw:
        try:
            spec = ScaleSpec(
                item_id=str(entry["item_id"]),
                category_count=int(entry["categories"]),
                reverse_coded=bool(entry.get("reverse_coded", False)),
                dimension=int(entry.get("dimension", 1)),
                segment_minutes=float(entry.get("segment_minutes", 7.5)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: bad scale entry {entry!r}: {exc}") from exc
        if spec.item_id in scale:
            raise DataError(f"{path}: duplicate item {spec.item_id!r}")
        scale[spec.item_id] = spec
    dims = sorted({s.dimension for s in scale.values()})
    if dims != list(range(1, len(dims) + 1)):
        raise DataError(f"{path}: dimensions {dims} are not contiguous 1..M")
    return scale


def load_dataset(ratings_path: str | Path, scale_path: str | Path,
                 roster_path: str | Path,
                 attributes_path: str | Path | None = None) -> Dataset:
    """Load, validate, recode, and index a rating bundle.

    Reverse-coded items are recoded as k -> K + 1 - k exactly once here;
    everything downstream assumes higher scores are better.
    """
    ratings_path, scale_path = Path(ratings_path), Path(scale_path)
    roster_path = Path(roster_path)

    scale = load_scale(scale_path)

    roster: dict[str, str] = {}
    for row in _read_csv(roster_path, ROSTER_HEADER):
        if row["rater_id"] in roster:
            raise DataError(f"{roster_path}: duplicate rater {row['rater_id']!r}")
        roster[row["rater_id"]] = row["family"]

    attr_values: dict[str, dict[str, str]] = {}
    provenance = {
        "ratings": file_digest(ratings_path),
        "scale": file_digest(scale_path),
        "roster": file_digest(roster_path),
    }
    if attributes_path is not None:
        attributes_path = Path(attributes_path)
        for row in _read_csv(attributes_path, ATTRIBUTES_HEADER):
            attr_values.setdefault(row["teacher_id"], {})[row["attribute"]] = row["value"]
        provenance["attributes"] = file_digest(attributes_path)
    provenance["bundle"] = "+".join(
        provenance[k] for k in sorted(provenance) if k != "bundle")

    records: list[RatingRecord] = []
    n_recoded = 0
    for pos, row in enumerate(_read_csv(ratings_path, RATINGS_HEADER), start=1):
        try:
            segment = int(row["segment_index"])
            score = int(row["score"])
        except ValueError as exc:
            raise DataError(f"{ratings_path} row {pos}: non-integer "
                            f"segment_index or score: {exc}") from exc
        if segment < 1:
            raise DataError(f"{ratings_path} row {pos}: segment_index must be >= 1")
        item = row["item_id"]
        if item not in scale:
            raise DataError(f"{ratings_path} row {pos}: unknown item {item!r}")
        k = scale[item].category_count
        if not 1 <= score <= k:
            raise DataError(f"{ratings_path} row {pos}: score {score} out of "
                            f"range 1..{k} for item {item!r}")
        if scale[item].reverse_coded:
            score = k + 1 - score
            n_recoded += 1
        records.append(RatingRecord(
            rater_id=row["rater_id"], family=row["family"],
            teacher_id=row["teacher_id"], year=row["year"],
            observation_id=row["observation_id"], segment_index=segment,
            item_id=item, score=score))

    for pos, rec in enumerate(records, start=1):
        if rec.rater_id not in roster:
            raise DataError(f"{ratings_path} row {pos}: unknown rater "
                            f"{rec.rater_id!r}")
        if roster[rec.rater_id] != rec.family:
            raise DataError(
                f"{ratings_path} row {pos}: rater {rec.rater_id!r} family "
                f"{rec.family!r} disagrees with roster {roster[rec.rater_id]!r}")

    if n_recoded:
        log.info("recoded %d scores on reverse-coded items (raw values kept "
                 "only in this log)", n_recoded)
    return Dataset.build(records, scale, roster,
                         TeacherAttributes(attr_values), provenance)


def recode_score(score: int, categories: int) -> int:
    """Reverse-coding map k -> K + 1 - k (an involution)."""
    return categories + 1 - score


def sample_reference_raters(ds: Dataset, seed: int) -> dict[Cell, str]:
    """Pick one human rater per rated cell, uniformly among those available.

    Pure function of (dataset, seed): cells are visited in sorted order with
    a generator derived from the seed alone, so the same assignment map comes
    back every time.  Cells with no human rating are skipped and counted in
    the log.
    """
    humans_per_cell: dict[Cell, set[str]] = {}
    for rec in ds.records:
        if rec.family == HUMAN_FAMILY:
            humans_per_cell.setdefault(rec.cell, set()).add(rec.rater_id)

    all_cells = {rec.cell for rec in ds.records}
    n_skipped = len(all_cells) - len(humans_per_cell)
    if n_skipped:
        log.info("reference sampling: %d cells without any human rating "
                 "omitted", n_skipped)

    rng = derive_rng(seed, "reference-raters")
    assignment: dict[Cell, str] = {}
    for cell in sorted(humans_per_cell):
        raters = sorted(humans_per_cell[cell])
        assignment[cell] = raters[int(rng.integers(len(raters)))]
    return assignment


def paired_scores(ds: Dataset, reference: dict[Cell, str], target_family: str,
                  item_id: str | None = None,
                  seed: int | None = None) -> list[tuple[int, int]]:
    """Pair the reference human score with a target-family score per cell.

    For ``target_family == "human"`` a second, distinct human is drawn so the
    reference rater is never paired with itself.  When several target raters
    scored a cell one is drawn uniformly (seeded; the default seed is derived
    from the reference assignment so the function stays pure).  Items without
    any pairing yield an empty list, not an exception.
    """
    scores: dict[Cell, dict[str, int]] = {}
    target_raters: dict[Cell, list[str]] = {}
    for rec in ds.records:
        if item_id is not None and rec.item_id != item_id:
            continue
        cell = rec.cell
        scores.setdefault(cell, {})[rec.rater_id] = rec.score
        if rec.family == target_family:
            target_raters.setdefault(cell, []).append(rec.rater_id)

    if seed is None:
        # stable default derived from the assignment itself, not process state
        seed = derive_seed(0, *(f"{c}:{r}" for c, r in sorted(reference.items())))
    rng = derive_rng(seed, "paired-scores", target_family, item_id or "*")

    pairs: list[tuple[int, int]] = []
    for cell in sorted(scores):
        ref_rater = reference.get(cell)
        if ref_rater is None or ref_rater not in scores[cell]:
            continue
        candidates = sorted(r for r in target_raters.get(cell, ())
                            if r != ref_rater)
        if not candidates:
            continue
        target = candidates[int(rng.integers(len(candidates)))]
        pairs.append((scores[cell][ref_rater], scores[cell][target]))
    return pairs
