"""Exception types shared across the toolkit.

Everything user-facing derives from MetacellError so the CLI can catch one
type and turn it into a single-line stderr message with exit code 1.
"""


class MetacellError(Exception):
    pass


class ValidationError(MetacellError):
    """Bad input data or configuration."""


class EmptyMicrostructureError(MetacellError):
    """Operation requires at least one solid cell."""


class SolverFailure(MetacellError):
    """A linear solve or factorization failed."""


class TrainingDiverged(MetacellError):
    """Loss became non-finite during training."""


class EmptySelection(MetacellError):
    """A selection step produced no records."""


class NoFeasibleCandidate(MetacellError):
    """Candidate search could not satisfy the admission threshold."""


class DisconnectedGraph(MetacellError):
    """Path extraction ran out of connecting routes."""


class FileFormatError(MetacellError):
    """Persistent artifact is malformed or has a version mismatch."""
