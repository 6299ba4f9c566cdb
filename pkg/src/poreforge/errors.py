"""Exception types shared across the pipeline."""


class ForgeError(Exception):
    """Base class for all pipeline errors."""


class DegenerateGeometryError(ForgeError):
    """Triangulation geometry is degenerate (parallel rays or zero baseline)."""


class BehindCameraError(ForgeError):
    """A reconstructed point lies behind one of its contributing cameras."""


class InsufficientInliersError(ForgeError):
    """Robust estimation could not find enough inliers (or enough input matches)."""


class ImageTooSmallError(ForgeError):
    """Input image is below the minimum supported size."""


class PluginProtocolError(ForgeError):
    """A descriptor plugin sent a malformed frame."""


class PluginCrashedError(ForgeError):
    """A descriptor plugin closed its channel unexpectedly."""


class DimMismatchError(ForgeError):
    """A plugin's reported descriptor dimension disagrees with its handle spec."""


class EmptySparseModelError(ForgeError):
    """Densification was asked to run on an empty sparse model."""


class CorruptContainerError(ForgeError):
    """A patch container's contents disagree with its manifest."""


class InsufficientSamplesError(ForgeError):
    """Too few labeled distances to estimate a verification statistic."""


class EmptyRosterError(ForgeError):
    """Descriptor selection was invoked with no candidates."""


class AllCandidatesFailedError(ForgeError):
    """Every candidate in an iteration failed to train or evaluate."""
