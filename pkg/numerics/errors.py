class KwsError(Exception):
    """Base class for every error raised by the toolkit."""


class ConfigError(KwsError):
    pass


class ShapeError(KwsError):
    pass


class LabelError(KwsError):
    pass


class DegenerateInputError(KwsError):
    pass


class NumericError(KwsError):
    pass
