"""Exception types raised across the package."""


class Stitch4DError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(Stitch4DError, ValueError):
    pass


class DegenerateProjectionError(Stitch4DError, ArithmeticError):
    pass


class DegenerateInputError(Stitch4DError, ValueError):
    pass


class NoAnchorError(Stitch4DError):
    """Depth refinement was given no valid anchor pixels."""


class MissingDepthError(Stitch4DError):
    def __init__(self, u: int, v: int):
        super().__init__(f"no valid refined depth at mask pixel (u={u}, v={v})")
        self.u = u
        self.v = v


class ProvenanceConflictError(Stitch4DError):
    pass


class ExchangeTimeoutError(Stitch4DError, TimeoutError):
    pass


class SceneParseError(Stitch4DError, ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class FrameError(Stitch4DError):
    """A module error raised while processing one frame of a pipeline run."""

    def __init__(self, frame: int, stage: str, cause: BaseException):
        super().__init__(f"frame {frame}, stage {stage}: {type(cause).__name__}: {cause}")
        self.frame = frame
        self.stage = stage
        self.cause = cause
