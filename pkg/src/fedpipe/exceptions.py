"""Exception types raised across the package."""


class FedPipeError(Exception):
    """Base class for all package errors."""


class DimensionError(FedPipeError, ValueError):
    """Vector or dataset shapes do not agree."""


class EmptyDatasetError(FedPipeError, ValueError):
    """An operation needs at least one sample."""


class NonFiniteError(FedPipeError, FloatingPointError):
    """A gradient, update or model contains NaN or inf."""


class SeedMismatchError(FedPipeError, ValueError):
    """Decoder seed differs from the encoder's shared seed."""


class ChannelError(FedPipeError, ValueError):
    """Invalid link or channel parameters."""


class AllocationError(FedPipeError, ValueError):
    """Selection or block assignment cannot be carried out."""


class CombiningError(FedPipeError, ValueError):
    """A server combiner received an invalid batch."""


class ConfigError(FedPipeError, ValueError):
    """Experiment configuration is invalid.

    ``errors`` holds every problem found, not just the first.
    """

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.errors))


class RoundError(FedPipeError):
    """A pipeline stage failed; carries the round, stage and user involved."""

    def __init__(self, round_index: int, stage: str, user=None, cause: Exception = None):
        self.round_index, self.stage, self.user = round_index, stage, user
        who = "" if user is None else f", user {user}"
        super().__init__(f"round {round_index}, stage {stage!r}{who}: {type(cause).__name__}: {cause}")
