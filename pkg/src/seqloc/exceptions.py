class SeqlocError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(SeqlocError, ValueError):
    pass


class SchemaError(SeqlocError, ValueError):
    pass


class ParseError(SeqlocError, ValueError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class DataIntegrityError(SeqlocError, ValueError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class DegenerateWeightsError(SeqlocError, ValueError):
    pass


class TrainingDivergedError(SeqlocError, RuntimeError):
    def __init__(self, epoch, learning_rate):
        super().__init__(f"loss became non-finite at epoch {epoch} (learning rate {learning_rate})")
        self.epoch = epoch
        self.learning_rate = learning_rate


class PartitionViolationError(SeqlocError, ValueError):
    pass


class EvaluationError(SeqlocError, ValueError):
    pass


class LeafFitError(SeqlocError, ValueError):
    pass


class ConfigurationError(SeqlocError, ValueError):
    pass
