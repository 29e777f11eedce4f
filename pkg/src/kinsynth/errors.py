"""Exception types shared across the package.

Each carries a short machine-readable ``code`` used by the CLI when it
reports a failure.
"""


class KinsynthError(Exception):
    code = "ERROR"


class ManifestError(KinsynthError, ValueError):
    code = "MANIFEST_INVALID"


class SchemaError(ManifestError):
    code = "MANIFEST_SCHEMA"


class ImageLoadError(KinsynthError, OSError):
    code = "IMAGE_UNREADABLE"


class EncoderLoadError(KinsynthError, ValueError):
    code = "ENCODER_LOAD"


class ConfigError(KinsynthError, ValueError):
    code = "CONFIG_INVALID"


class NonFiniteLossError(KinsynthError, FloatingPointError):
    code = "NON_FINITE_LOSS"

    def __init__(self, component, value, step=None):
        self.component = component
        self.value = value
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"loss component {component!r} is non-finite ({value}){where}")


class IntegrityError(KinsynthError):
    code = "CHECKPOINT_INTEGRITY"


class ShapeMismatchError(KinsynthError, ValueError):
    code = "SHAPE_MISMATCH"
