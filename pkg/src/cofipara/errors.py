"""Exception types shared across the pipeline."""


class CofiParaError(Exception):
    """Base class; ``code`` is the machine-parsable tag printed by the CLI."""

    code = "error"


class RejectedInput(CofiParaError, ValueError):
    code = "rejected_input"


class ContractViolation(CofiParaError, ValueError):
    code = "contract_violation"


class DatasetValidationError(CofiParaError, ValueError):
    code = "dataset_invalid"

    def __init__(self, message, record_id=None, field=None):
        super().__init__(message)
        self.record_id = record_id
        self.field = field


class TransportError(CofiParaError):
    """A backend call failed in a way that is worth retrying."""

    code = "transport"


class GenerationError(CofiParaError):
    code = "generation_failed"

    def __init__(self, message, stance):
        super().__init__(message)
        self.stance = stance


class CheckpointLoadError(CofiParaError):
    code = "checkpoint_load"

    def __init__(self, message, mismatched=()):
        super().__init__(message)
        self.mismatched = list(mismatched)
