"""Exception hierarchy shared across the package."""


class DifacError(Exception):
    """Base class for all package errors."""


class ParseError(DifacError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class SchemaError(DifacError):
    pass


class SplitError(DifacError):
    pass


class NumericError(DifacError):
    pass


class TrainingError(DifacError):
    def __init__(self, epoch, message):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


class CapacityError(DifacError):
    pass


class RecipeMismatchError(DifacError):
    pass


class ContractError(DifacError):
    pass


class FetchError(DifacError):
    def __init__(self, missing, message="remote fetch failed"):
        shown = ", ".join(map(str, list(missing)[:10]))
        more = "" if len(missing) <= 10 else f" (+{len(missing) - 10} more)"
        super().__init__(f"{message}; missing nodes: {shown}{more}")
        self.missing = list(missing)


class CacheError(DifacError):
    pass


class MetricError(DifacError):
    pass


class InsufficientSampleError(DifacError):
    pass


class ConfigError(DifacError):
    pass
