"""Error taxonomy shared across the package.

The CLI maps these onto distinct exit codes, so raising the right class
matters more than the message text.
"""


class TriRenderError(Exception):
    """Base class for all package errors."""


class ShapeError(TriRenderError, ValueError):
    """Operands have incompatible shapes; message names both shapes."""


class SceneParseError(TriRenderError, ValueError):
    """Malformed scene or mesh input; message carries line or field."""


class ValidationError(TriRenderError, ValueError):
    """A domain invariant was violated; message names the invariant."""


class CheckpointError(TriRenderError, ValueError):
    """Checkpoint magic/version/checksum/config mismatch."""


class NumericalError(TriRenderError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class GenerationError(TriRenderError, RuntimeError):
    """Procedural scene sampling could not satisfy its constraints."""
