class InputError(ValueError):
    """Malformed input: wrong dimensions, unknown names, too few samples."""


class DomainError(ValueError):
    """Input outside the mathematical domain, e.g. a non-positive variance."""
