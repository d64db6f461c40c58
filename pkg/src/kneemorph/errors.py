"""Exception hierarchy shared by all kneemorph modules."""


class KneeMorphError(Exception):
    """Base class for every error raised by this package."""


# nifti
class NiftiError(KneeMorphError, ValueError):
    pass


class WrongSize(NiftiError):
    pass


class BadMagic(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class InvalidQuaternion(NiftiError):
    pass


class Truncated(NiftiError):
    pass


class RejectedNonFinite(NiftiError):
    pass


class LabelRangeError(NiftiError):
    pass


# geometry / volumes
class GridMismatch(KneeMorphError, ValueError):
    pass


class SingularAffine(KneeMorphError, ValueError):
    pass


class ObliqueAffine(KneeMorphError, ValueError):
    pass


class EmptyOutput(KneeMorphError, ValueError):
    pass


class ConstantImage(KneeMorphError, ValueError):
    pass


class UnknownLabel(KneeMorphError, KeyError):
    pass


class NotRasOriented(KneeMorphError, ValueError):
    pass


class NonFinite(KneeMorphError, FloatingPointError):
    pass


# optimisation
class CohortTooSmall(KneeMorphError, ValueError):
    pass


class Diverged(KneeMorphError, RuntimeError):
    pass


# meshes and metrics
class EmptyLabel(KneeMorphError, ValueError):
    pass


class EmptyMask(KneeMorphError, ValueError):
    pass


class EmptyPatch(KneeMorphError, ValueError):
    pass


class EmptyRegion(KneeMorphError, ValueError):
    pass


class NoBoneAdjacency(KneeMorphError, ValueError):
    pass


class ZeroPseudoArea(KneeMorphError, ZeroDivisionError):
    pass


class NoTibialCartilage(KneeMorphError, ValueError):
    pass


# pipeline
class MissingInputs(KneeMorphError, FileNotFoundError):
    pass


class ConfigError(KneeMorphError, ValueError):
    pass
