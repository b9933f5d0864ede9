"""Exception hierarchy. The CLI maps these onto exit codes."""


class PruneKitError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(PruneKitError):
    """Tensor dimensions do not line up."""


class InputError(PruneKitError):
    """Invalid argument or configuration value."""


class StateError(PruneKitError):
    """Operation not valid in the current model state (e.g. masking an absent block)."""


class FormatError(PruneKitError):
    """Malformed checkpoint or token file."""


class ExhaustionError(PruneKitError):
    """No removable structure left before the target ratio was reached."""


class TrainingError(PruneKitError):
    """Toy training diverged."""


class SearchError(PruneKitError):
    """Evolutionary search produced no candidate in the feasible ratio band."""
