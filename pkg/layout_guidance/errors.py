"""Exception hierarchy shared by every layout_guidance module.

Each error carries the module it was raised from and the process exit code
the command line maps it to (0 success, 2 config, 3 missing artifact,
4 runtime failure).
"""
from typing import Any, Dict, Optional


class LayoutGuidanceError(Exception):
    """Base class for all errors raised by the package"""

    module = "layout_guidance"
    exit_code = 4

    def __init__(self, message: str, module: Optional[str] = None):
        super().__init__(message)
        if module is not None:
            self.module = module

    def __str__(self) -> str:
        return f"[{self.module}] {super().__str__()}"


# scene_graph

class UnknownClassError(LayoutGuidanceError, ValueError):
    module = "scene_graph"

    def __init__(self, name: str, kind: str = "object"):
        self.name = name
        self.kind = kind
        LayoutGuidanceError.__init__(self, f"Unknown {kind} class '{name}'")


class EmptyInputError(LayoutGuidanceError, ValueError):
    module = "scene_graph"


class SchemaError(LayoutGuidanceError, ValueError):
    """Raised when a file does not match its schema; names the offending field"""

    module = "scene_graph"

    def __init__(self, field_path: str, message: str, module: Optional[str] = None):
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}", module=module)


class GraphIoError(LayoutGuidanceError, OSError):
    module = "scene_graph"
    exit_code = 3


# embeddings

class EmbedderUnavailableError(LayoutGuidanceError, RuntimeError):
    module = "embeddings"
    exit_code = 3


class ShapeError(LayoutGuidanceError, ValueError):
    module = "embeddings"


class DimensionMismatchError(LayoutGuidanceError, ValueError):
    module = "embeddings"


# sg2seg

class EmptyLayoutError(LayoutGuidanceError, ValueError):
    module = "sg2seg"


class LengthMismatchError(LayoutGuidanceError, ValueError):
    module = "sg2seg"


class DatasetEmptyError(LayoutGuidanceError, ValueError):
    module = "sg2seg"


class NonFiniteLossError(LayoutGuidanceError, ArithmeticError):
    module = "sg2seg"

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None,
                 module: Optional[str] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(f"{message} (diagnostics: {self.diagnostics})", module=module)


# diffusion

class StepUnderflowError(LayoutGuidanceError, ValueError):
    module = "diffusion"


# guidance

class NonDifferentiableEmbedderError(LayoutGuidanceError, TypeError):
    module = "guidance"


class EmptyRoiError(LayoutGuidanceError, ValueError):
    module = "guidance"


class MissingInputError(LayoutGuidanceError, ValueError):
    module = "guidance"

    def __init__(self, term: str, message: Optional[str] = None):
        self.term = term
        super().__init__(message or f"Guidance term '{term}' is enabled but its input is missing")


# datasets

class MissingImageError(LayoutGuidanceError, FileNotFoundError):
    module = "datasets"
    exit_code = 3


# pipeline / cli

class ConfigError(LayoutGuidanceError, ValueError):
    module = "pipeline"
    exit_code = 2


class CheckpointMissingError(LayoutGuidanceError, FileNotFoundError):
    module = "pipeline"
    exit_code = 3


class CheckpointFormatError(LayoutGuidanceError, ValueError):
    module = "pipeline"
    exit_code = 3
