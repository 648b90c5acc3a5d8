"""Exception hierarchy shared by every module."""


class HybridLMError(Exception):
    """Base class for all library errors."""


class ShapeError(HybridLMError, ValueError):
    pass


class ConfigError(HybridLMError, ValueError):
    pass


class StateError(HybridLMError, ValueError):
    pass


class InputError(HybridLMError, ValueError):
    pass


class NumericError(HybridLMError, ArithmeticError):
    pass


class SchemaError(HybridLMError, ValueError):
    pass


class FormatError(HybridLMError, ValueError):
    """Checkpoint file has a bad magic, version or header."""


class IntegrityError(HybridLMError, ValueError):
    """Checkpoint payload is truncated or fails its checksum."""


class LoadError(HybridLMError, OSError):
    pass
