class CgdetError(Exception):
    pass


class ConfigurationError(CgdetError, ValueError):
    """Invalid thresholds, weights, fractions or an unknown model id."""


class StructuralError(CgdetError, ValueError):
    """Inputs that are well formed but cannot be combined, e.g. a missing verdict."""


class DataFormatError(CgdetError, ValueError):
    """A file on disk does not match its documented format."""
