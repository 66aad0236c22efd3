"""Exception hierarchy shared by all medgcn modules."""


class MedGcnError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MedGcnError):
    """Matrix dimensions incompatible with the requested operation."""


class ParameterError(MedGcnError):
    """A configuration value or hyperparameter is out of its valid range."""


class StateError(MedGcnError):
    """An object is not in the state required by the operation (e.g. missing gradients)."""


class NumericGuardError(MedGcnError):
    """A numeric precondition was violated (e.g. probabilities saturated to exactly 0 or 1)."""


class IntegrityError(MedGcnError):
    """Graph construction or mutation would violate a structural invariant."""


class GraphLookupError(MedGcnError):
    """An external ID or ordinal does not exist in the registry."""


class SplitError(MedGcnError):
    """A train/val/test split cannot be formed from the given items or ratios."""


class MetricError(MedGcnError):
    """A metric is undefined for the given inputs (e.g. no relevant labels anywhere)."""


class TrainingError(MedGcnError):
    """Training failed, e.g. the loss diverged to NaN."""


class IngestionError(MedGcnError):
    """A CSV bundle is missing, malformed, or internally inconsistent."""


class CheckpointError(MedGcnError):
    """A serialized graph or model file is malformed or does not match its graph."""
