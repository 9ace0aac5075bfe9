"""Rating-quality analytics for multi-rater annotation data.

Six analysis surfaces over one validated dataset: agreement/correlation
panels, generalizability and dependability from variance components,
disattenuated cross-lesson correlations, Bayesian rater bias, sensitive-
attribute fairness contrasts, and decision-study projections of
human-in-the-loop designs.  A built-in synthetic generator with known
parameters backs every recovery test.
"""

__version__ = "0.1.0"

from .dataset import (Dataset, RatingRecord, ScaleSpec, TeacherAttributes,
                      load_dataset, paired_scores, sample_reference_raters)
from .errors import (DataError, InestimableTermError, InfeasibleScenarioError,
                     RaterlabError)

__all__ = [
    "Dataset", "RatingRecord", "ScaleSpec", "TeacherAttributes",
    "load_dataset", "paired_scores", "sample_reference_raters",
    "DataError", "InestimableTermError", "InfeasibleScenarioError",
    "RaterlabError", "__version__",
]
