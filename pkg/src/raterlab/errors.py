"""Exception types shared across the package."""

from __future__ import annotations


class RaterlabError(Exception):
    """Base class for all package-specific errors."""


class DataError(RaterlabError):
    """Invalid input data: schema violations, out-of-range scores,
    duplicate facet tuples, unknown raters or items."""


class InestimableTermError(RaterlabError):
    """A variance design term cannot be estimated from the given data."""

    def __init__(self, term: str, message: str | None = None):
        self.term = term
        super().__init__(message or f"inestimable term: {term!r}")


class InfeasibleScenarioError(RaterlabError):
    """A decision-study scenario divides a needed variance term by zero count."""
