"""Exception hierarchy for the uniseg package."""


class UnisegError(Exception):
    """Base class for all package errors."""


class TemplateParseError(UnisegError):
    """Malformed class-template file; message carries the line number."""


class DuplicateIndex(TemplateParseError):
    pass


class DanglingParent(TemplateParseError):
    pass


class ClassNotAnnotated(UnisegError):
    """Requested class is not part of the label space."""


class DegeneratePlane(UnisegError):
    """Splitting plane has a zero normal."""


class ShapeMismatch(UnisegError):
    pass


class EmptyLabelSpace(UnisegError):
    pass


class NonCubicPatch(UnisegError):
    """90-degree rotation requested on a non-cubic patch."""


class BadPatchShape(UnisegError):
    """Patch dims not divisible by the backbone's downsampling factor."""


class GradShapeMismatch(UnisegError):
    pass


class EmbeddingDimMismatch(UnisegError):
    pass


class MissingEmbedding(UnisegError):
    pass


class LpgDimMismatch(UnisegError):
    pass


class DivergedLoss(UnisegError):
    """Training loss became non-finite; message carries diagnostics."""


class CheckpointVersion(UnisegError):
    pass


class TaxonomyMismatch(UnisegError):
    """Checkpoint taxonomy hash differs from the expected one."""


class ClassIndexCollision(UnisegError):
    pass


class WindowTooLarge(UnisegError):
    pass


class InsufficientCases(UnisegError):
    """Detection rates need at least one positive and one negative case."""


class SpecOverlap(UnisegError):
    """Phantom organs of the same tier overlap beyond tolerance."""


class ConfigError(UnisegError):
    """Bad run-config file or flag value."""
