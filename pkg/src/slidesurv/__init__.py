"""Whole-slide-image survival prognosis pipeline.

Stages: patch sampling from slide images, thumbnail embedding and k-means
clustering, per-cluster attention CNN survival models, cluster selection by
held-out concordance, weighted patient-level feature aggregation, and a
LASSO-Cox survival analysis with cross-validation.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    NumericError,
    SelectionError,
    SlidesurvError,
    StaleInputError,
    UntrainableClusterError,
)

__all__ = [
    "ConfigError",
    "DataError",
    "NumericError",
    "SelectionError",
    "SlidesurvError",
    "StaleInputError",
    "UntrainableClusterError",
]
