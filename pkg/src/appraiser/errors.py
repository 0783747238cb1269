"""Exception hierarchy.

Every error carries a ``category`` (machine-readable, used as the CLI error
tag) and the ``module`` it originated from.
"""


class AppraiserError(Exception):
    category = "error"
    module = "appraiser"

    def to_dict(self):
        return {"category": self.category, "module": self.module, "message": str(self)}


class AddressError(AppraiserError, IndexError):
    category = "addressing"
    module = "quant"


class ComparisonError(AppraiserError, ValueError):
    category = "comparison"
    module = "analysis"


class ShapeError(AppraiserError, ValueError):
    category = "shape"
    module = "inference"


class LoadError(AppraiserError, ValueError):
    category = "load"
    module = "model_io"

    def __init__(self, message, tensor=None):
        if tensor is not None:
            message = f"{tensor}: {message}"
        super().__init__(message)
        self.tensor = tensor


class ConfigError(AppraiserError, ValueError):
    category = "configuration"
    module = "config"
