"""Exception hierarchy; ``kind`` is the machine-readable tag the CLI reports."""


class MifError(Exception):
    kind = "error"


class IngestIOError(MifError, OSError):
    kind = "io-error"


class FormatError(MifError, ValueError):
    kind = "format-error"

    def __init__(self, msg: str, record: int | None = None):
        self.record = record
        if record is not None:
            msg = f"{msg} (record {record})"
        super().__init__(msg)


class NonRigidError(MifError, ValueError):
    kind = "non-rigid-error"


class ConfigError(MifError, ValueError):
    kind = "config-error"


class EmptyInputError(MifError, ValueError):
    kind = "empty-input"


class NonFiniteError(MifError, FloatingPointError):
    kind = "non-finite"

    def __init__(self, msg: str, iteration: int | None = None):
        self.iteration = iteration
        if iteration is not None:
            msg = f"{msg} at iteration {iteration}"
        super().__init__(msg)


class GridTooLargeError(MifError, ValueError):
    kind = "grid-too-large"
