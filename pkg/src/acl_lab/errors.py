"""Exception hierarchy shared by every module."""


class ACLError(Exception):
    """Base class for all library errors."""


class NumericError(ACLError):
    pass


class ZeroVector(NumericError):
    pass


class EmptyInput(NumericError):
    pass


class NonFinite(NumericError):
    pass


class DimMismatch(ACLError, ValueError):
    pass


class LabelOutOfRange(ACLError, ValueError):
    pass


class LabelMismatch(ACLError, ValueError):
    pass


class LengthMismatch(ACLError, ValueError):
    pass


class TooFewSamples(ACLError, ValueError):
    pass


class ShapeMismatch(ACLError, ValueError):
    pass


class TooShort(ACLError, ValueError):
    pass


class StaleTrace(ACLError):
    pass


class CheckpointError(ACLError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class TruncatedFile(CheckpointError):
    pass


class ConfigError(ACLError):
    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class DataError(ACLError):
    pass


class TrainingDiverged(NumericError):
    def __init__(self, message, epoch=None, batch=None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
