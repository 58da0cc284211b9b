"""Exception types raised across the package.

Every error subclasses :class:`Jule3DError` plus the closest builtin, so
callers can catch either the package base class or e.g. ``ValueError``.
"""


class Jule3DError(Exception):
    """Base class for all package errors."""

    code = "Jule3DError"


def _make(name, *bases, doc=None):
    cls = type(name, (*bases, Jule3DError), {"__doc__": doc, "code": name})
    return cls


# volume / io
BadMagic = _make("BadMagic", ValueError, doc="File does not start with the expected magic bytes.")
TruncatedPayload = _make("TruncatedPayload", ValueError, doc="Payload shorter or longer than the header declares.")
ZeroDim = _make("ZeroDim", ValueError, doc="A volume dimension is zero.")
IoFailure = _make("IoFailure", OSError, doc="File could not be read or written.")
RejectedInvalidLabel = _make("RejectedInvalidLabel", ValueError, doc="Label map holds a label >= its class count.")
InvalidSpec = _make("InvalidSpec", ValueError, doc="Phantom specification violates its invariants.")

# sampler
NoForeground = _make("NoForeground", ValueError, doc="No admissible foreground center exists.")
VolumeTooSmall = _make("VolumeTooSmall", ValueError, doc="Volume is smaller than the patch size.")
DegenerateIntensities = _make("DegenerateIntensities", RuntimeWarning, doc="Patch intensities have (near) zero spread.")

# net3d
ShapeMismatch = _make("ShapeMismatch", ValueError, doc="Tensor shapes are incompatible.")
DegenerateBatch = _make("DegenerateBatch", ValueError, doc="Batch norm needs at least two values per channel.")
LabelOutOfRange = _make("LabelOutOfRange", ValueError, doc="A label is >= the class count.")
WrongPatchSize = _make("WrongPatchSize", ValueError, doc="Patch size does not match the fixed architecture.")
SingleClass = _make("SingleClass", ValueError, doc="Training needs at least two distinct labels.")
BadCheckpoint = _make("BadCheckpoint", ValueError, doc="Checkpoint file is malformed.")

# cluster
DegenerateFeatures = _make("DegenerateFeatures", RuntimeWarning, doc="All feature rows coincide.")
OverlappingClusters = _make("OverlappingClusters", ValueError, doc="Clusters share members.")
BadTarget = _make("BadTarget", ValueError, doc="Requested cluster count is out of range.")
TooFewPoints = _make("TooFewPoints", ValueError, doc="Fewer samples than clusters.")
LengthMismatch = _make("LengthMismatch", ValueError, doc="Label vectors differ in length.")

# jule / segmenter / cli
ConfigInvalid = _make("ConfigInvalid", ValueError, doc="Configuration violates a constraint.")
OverlapDetected = _make("OverlapDetected", RuntimeError, doc="Two subpatches wrote the same voxel.")
NoOverlap = _make("NoOverlap", ValueError, doc="No voxel is labeled in both maps.")
UnknownKey = _make("UnknownKey", KeyError, doc="Configuration key is not recognised.")
ConfigTypeError = _make("ConfigTypeError", TypeError, doc="Configuration value has the wrong type.")
ConstraintViolation = _make("ConstraintViolation", ValueError, doc="Configuration value violates a constraint.")
MissingCheckpoint = _make("MissingCheckpoint", FileNotFoundError, doc="Required checkpoint file is absent.")
ConfigHashMismatch = _make("ConfigHashMismatch", ValueError, doc="Artifacts were produced under different configs.")
