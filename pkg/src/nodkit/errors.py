"""Exception types shared across nodkit."""


class NodkitError(Exception):
    """Base class for all nodkit errors."""


class FormatError(NodkitError, ValueError):
    """A file or table does not follow the expected layout."""


class DomainError(NodkitError, ValueError):
    """Inputs are well formed but outside an operation's domain."""
