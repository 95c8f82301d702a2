"""
Exception hierarchy shared by every gestaltclosure module.
"""

from pathlib import Path
from typing import Optional, Sequence


class GestaltClosureError(Exception):
    """Base class for all library errors."""


class InvalidStimulusError(GestaltClosureError, ValueError):
    """A stimulus spec violates its invariants or uses an unknown factor level."""


class TripleAssignmentError(GestaltClosureError):
    """Quota-satisfying triple assignment could not be completed."""


class ShapeMismatchError(GestaltClosureError, ValueError):
    pass


class UnknownLayerError(GestaltClosureError, KeyError):
    def __init__(self, name: str, valid: Sequence[str]):
        self.name = name
        self.valid = list(valid)
        super().__init__(f"Unknown layer '{name}'. Valid layers: {', '.join(self.valid)}")

    def __str__(self) -> str:
        return self.args[0]


class NonFiniteError(GestaltClosureError, FloatingPointError):
    """NaN or Inf found where finite values are required."""


class TrainingDivergedError(GestaltClosureError):
    def __init__(self, message: str, last_checkpoint: Optional[Path] = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class DatasetError(GestaltClosureError):
    pass


class MissingEmbeddingError(GestaltClosureError, KeyError):
    def __str__(self) -> str:
        return self.args[0] if self.args else "missing embedding"


class DegenerateSampleError(GestaltClosureError, ValueError):
    pass


class DesignError(GestaltClosureError, ValueError):
    """ANOVA design is unusable (single-level factor, empty or unbalanced cells)."""


class ConfigError(GestaltClosureError):
    def __init__(self, message: str, field_paths: Sequence[str] = ()):
        super().__init__(message)
        self.field_paths = list(field_paths)


class ArchitectureMismatchError(GestaltClosureError):
    pass


class OutputExistsError(GestaltClosureError):
    pass


class EmptyPlotError(GestaltClosureError, ValueError):
    pass
