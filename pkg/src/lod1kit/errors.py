"""Exception types raised across the pipeline."""


class Lod1Error(Exception):
    """Base class for all library errors."""


class InvalidGeometryError(Lod1Error, ValueError):
    pass


class BufferFailure(Lod1Error):
    """Offsetting a polygon produced a non-simple result."""


class ParseError(Lod1Error, ValueError):
    """Malformed input file. ``location`` is a line number or byte offset."""

    def __init__(self, message, path=None, location=None):
        self.path = path
        self.location = location
        parts = []
        if path is not None:
            parts.append(str(path))
        if location is not None:
            parts.append(str(location))
        prefix = ":".join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class TriangulationError(Lod1Error):
    pass


class DomainError(Lod1Error, ValueError):
    pass


class AlignmentError(Lod1Error, ValueError):
    pass


class NoPointsError(Lod1Error):
    def __init__(self, message, footprint_id=None):
        self.footprint_id = footprint_id
        if footprint_id is not None:
            message = f"{message} (footprint {footprint_id})"
        super().__init__(message)


class DegenerateHeightError(Lod1Error, ValueError):
    pass


class InsufficientSamplesError(Lod1Error, ValueError):
    pass


class PerturbationError(Lod1Error):
    pass


class SceneTooDenseError(Lod1Error):
    pass


class ConfigError(Lod1Error, ValueError):
    pass


class StageError(Lod1Error):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
