"""Exception hierarchy.

Every error raised on purpose by the library derives from :class:`NlosError`.
The CLI maps the three families below onto its exit codes:
validation errors (2), I/O-format errors (2 when the input is malformed),
and resource errors (3).
"""

from __future__ import annotations


class NlosError(Exception):
    """Base class for all library errors."""


# -- validation ---------------------------------------------------------------


class ValidationError(NlosError, ValueError):
    """A precondition on user-supplied values failed."""


class DegenerateDistanceError(ValidationError):
    """Two points of a light path coincide (inverse-square singularity)."""


class DegenerateEllipsoidError(ValidationError):
    """Path length too short to enclose both foci."""


class ConfigConflictError(ValidationError):
    """Mutually incompatible reconstruction options."""


class GeometryMismatchError(ValidationError):
    """Two voxel grids do not share bounds and resolution."""


# -- resources ----------------------------------------------------------------


class ResourceLimitError(NlosError):
    """A memory, overflow or time budget was exceeded."""


class ResolutionOverflowError(ResourceLimitError):
    """Requested grid would exceed the configured memory cap."""


class IntegerOverflowError(ResourceLimitError, OverflowError):
    """A 32-bit accumulator would wrap around."""


class TimeBudgetError(ResourceLimitError):
    """A benchmark cell ran longer than its budget."""


# -- file formats -------------------------------------------------------------


class FormatError(NlosError, ValueError):
    """Malformed file contents. ``offset`` is the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)


class MalformedMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class NegativeIntensityError(FormatError):
    pass


class SceneError(NlosError, ValueError):
    """Invalid scene description. Carries the line and/or field involved."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        ctx = []
        if line is not None:
            ctx.append(f"line {line}")
        if field is not None:
            ctx.append(f"field '{field}'")
        super().__init__(f"{', '.join(ctx)}: {message}" if ctx else message)


class SceneParseError(SceneError):
    """The scene file is not valid TOML."""


class SceneSemanticError(SceneError):
    """The scene parses but describes an impossible setup."""
