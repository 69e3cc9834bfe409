"""Exception types shared across the pipeline.

The CLI maps these to process exit codes: ConfigError -> 2, StaleInputError
and missing upstream artifacts -> 3, NumericError -> 4, DataError -> 5.
"""


class SlidesurvError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(SlidesurvError):
    """Invalid or inconsistent configuration."""


class DataError(SlidesurvError):
    """Malformed input data (CSV schema, value domains, referential integrity)."""


class StaleInputError(SlidesurvError):
    """A stage's recorded inputs no longer match what is on disk or in config."""


class NumericError(SlidesurvError):
    """A numeric procedure failed (non-convergence, degenerate problem)."""


class UntrainableClusterError(SlidesurvError):
    """A cluster cannot support survival training (fewer than 2 events)."""


class SelectionError(SlidesurvError):
    """No cluster passed the concordance threshold; review the threshold."""
