"""Exception hierarchy shared across the engine."""


class IxframeError(Exception):
    """Base class for all ixframe errors."""


class RowTooLarge(IxframeError):
    pass


class TypeMismatch(IxframeError):
    pass


class CorruptPayload(IxframeError):
    pass


class FieldOverflow(IxframeError):
    pass


class BatchFull(IxframeError):
    pass


class BatchSealed(IxframeError):
    pass


class OutOfBounds(IxframeError):
    pass


class PartitionSealed(IxframeError):
    pass


class SchemaMismatch(IxframeError):
    pass


class EmptySchema(IxframeError):
    pass


class UnsupportedColumn(IxframeError):
    pass


class UnresolvedColumn(IxframeError):
    pass


class ExecFailure(IxframeError):
    pass


class TaskFailed(IxframeError):
    def __init__(self, message, cause=None):
        super().__init__(message)
        self.cause = cause


class NoSurvivingExecutor(IxframeError):
    pass


class StaleTask(IxframeError):
    """Signal: a task's expected version does not match the hosted replica.

    Raised internally and consumed by the rescheduler; never surfaced as a
    user-visible failure.
    """


class DeadDestination(IxframeError):
    pass


class InvalidSpec(IxframeError):
    pass


class ParseError(IxframeError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class OOMGuard(IxframeError):
    pass


class CorruptLog(IxframeError):
    pass
