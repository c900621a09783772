"""Shared exception types."""


class FileFormatError(Exception):
    """A binary container failed to parse.

    Carries the byte offset at which parsing failed so corrupt files can be
    diagnosed without a hex editor.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ShapeMismatchError(ValueError):
    """Array dimensions are inconsistent with the declared grid geometry."""


class UnusableConfigError(ValueError):
    """A configuration that can never produce a usable artifact."""
