import json
from pathlib import Path

import pytest

from raterlab.dataset import (Dataset, RatingRecord, ScaleSpec,
                              TeacherAttributes)


def make_records(rows):
    """rows: (rater, family, teacher, obs, seg, item, score)."""
    return [RatingRecord(rater_id=r, family=f, teacher_id=t, year="y1",
                         observation_id=o, segment_index=s, item_id=j,
                         score=k)
            for (r, f, t, o, s, j, k) in rows]


def tiny_scale(items=("EXPL",), k=3):
    return {j: ScaleSpec(item_id=j, category_count=k) for j in items}


@pytest.fixture
def tiny_dataset():
    rows = [
        ("h1", "human", "t1", "t1_L1", 1, "EXPL", 1),
        ("h2", "human", "t1", "t1_L1", 1, "EXPL", 2),
        ("m1", "model", "t1", "t1_L1", 1, "EXPL", 3),
        ("h1", "human", "t2", "t2_L1", 1, "EXPL", 3),
        ("h2", "human", "t2", "t2_L1", 1, "EXPL", 3),
        ("m1", "model", "t2", "t2_L1", 1, "EXPL", 2),
    ]
    roster = {"h1": "human", "h2": "human", "m1": "model"}
    return Dataset.build(make_records(rows), tiny_scale(), roster,
                         TeacherAttributes({"t1": {"race": "B"},
                                            "t2": {"race": "W"}}),
                         provenance={"bundle": "tiny"})


def write_bundle_files(tmp_path: Path, ratings_rows, scale_entries,
                       roster_rows, attr_rows=None):
    ratings = tmp_path / "ratings.csv"
    header = "rater_id,family,teacher_id,year,observation_id,segment_index,item_id,score"
    ratings.write_text("\n".join([header] + ratings_rows) + "\n")
    scale = tmp_path / "scale.json"
    scale.write_text(json.dumps(scale_entries))
    roster = tmp_path / "roster.csv"
    roster.write_text("\n".join(["rater_id,family"] + roster_rows) + "\n")
    attrs = None
    if attr_rows is not None:
        attrs = tmp_path / "attributes.csv"
        attrs.write_text("\n".join(["teacher_id,attribute,value"] + attr_rows)
                         + "\n")
    return ratings, scale, roster, attrs
