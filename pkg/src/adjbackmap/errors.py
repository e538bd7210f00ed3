"""Exception hierarchy shared by every module.

The CLI maps each class to a short machine-readable code, so new
subclasses should define ``code``.
"""


class AdjointError(Exception):
    code = "domain"


class DimensionError(AdjointError, ValueError):
    code = "dimension"


class NonFiniteError(AdjointError, FloatingPointError):
    code = "nonfinite"


class LayoutError(AdjointError, ValueError):
    code = "layout"


class ModelError(AdjointError, ValueError):
    code = "model"


class ModeError(AdjointError, ValueError):
    code = "mode"


class SchemaError(AdjointError, ValueError):
    code = "schema"

    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


class BlobError(AdjointError, OSError):
    code = "blob"


class OracleSizeError(AdjointError, ValueError):
    code = "oracle-size"
