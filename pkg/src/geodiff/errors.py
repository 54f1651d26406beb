"""Exception types shared across geodiff."""


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class EmptyMask(DomainError):
    pass


class DegenerateAlignment(DomainError):
    """Prediction has zero variance over the mask, so scale/shift are undefined."""


class FormatError(ValueError):
    """A binary file could not be parsed.

    ``offset`` is the byte position where parsing failed.
    """

    def __init__(self, message: str, offset: int, path=None):
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{message} (at byte offset {offset})")
        self.offset = offset
        self.path = path


class NonFiniteLoss(FloatingPointError):
    def __init__(self, sample_index: int, value: float):
        super().__init__(f"non-finite loss {value!r} for batch sample {sample_index}")
        self.sample_index = sample_index
        self.value = value
