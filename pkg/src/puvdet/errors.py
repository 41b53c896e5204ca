"""Exception types shared across the pipeline.

Everything derives from PuvdetError so the CLI can map any stage failure
to a nonzero exit code without enumerating causes.
"""


class PuvdetError(Exception):
    pass


class ParseError(PuvdetError):
    """Malformed input file; message carries the offending line number."""


class ValidationError(PuvdetError):
    """A domain invariant was violated (duplicate ids, bad flags, ...)."""


class ConfigError(PuvdetError):
    """Configuration value outside its allowed range, or unknown key."""


class DimensionError(PuvdetError):
    """Vector length mismatch."""


class AlignmentError(PuvdetError):
    """Id sets do not line up between two artifacts."""


class NumericError(PuvdetError):
    """Non-finite value where a finite one is required."""


class TrainingError(PuvdetError):
    """Optimization diverged; message carries the epoch index."""


class BatchConstructionError(PuvdetError):
    """Contrastive batch cannot be assembled from the available pool."""
