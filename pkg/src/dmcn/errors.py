"""Exception types shared across the package."""


class ContractError(ValueError):
    """Raised when an operation is called with arguments that violate its preconditions."""


class CheckpointFormatError(ValueError):
    """A checkpoint file could not be parsed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
