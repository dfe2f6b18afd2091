"""
Typed errors for the CT analysis toolkit.

Every error carries the CLI exit code of its family:
    1 usage / configuration
    2 input-output
    3 degenerate input
"""

from __future__ import annotations


class CtAnalysisError(Exception):
    exit_code = 3


# ------------------------------- usage (1) ------------------------------------


class UsageError(CtAnalysisError):
    exit_code = 1


class ConfigError(UsageError):
    pass


class InvalidPhantomSpec(UsageError):
    pass


# ---------------------------------- I/O (2) ------------------------------------


class DataIOError(CtAnalysisError):
    exit_code = 2


class InputNotFound(DataIOError):
    pass


class MalformedHeader(DataIOError):
    pass


class SizeMismatch(DataIOError):
    pass


class MissingDataFile(DataIOError):
    pass


class UnsupportedElementType(DataIOError):
    pass


class UnwritablePath(DataIOError):
    pass


# --------------------------- degenerate input (3) ------------------------------


class DegenerateInput(CtAnalysisError):
    exit_code = 3


# volume core
class EmptyRegion(DegenerateInput):
    pass


class DegenerateHistogram(DegenerateInput):
    pass


class OutOfBounds(DegenerateInput):
    pass


class GeometryMismatch(DegenerateInput):
    pass


# lung isolation
class NoBoneVoxels(DegenerateInput):
    pass


class NoLungCandidate(DegenerateInput):
    pass


# airways
class TracheaNotFound(DegenerateInput):
    pass


class DegenerateFront(DegenerateInput):
    pass


class DegenerateSegment(DegenerateInput):
    pass


# boundary refinement
class NoVarianceOnBorder(DegenerateInput):
    pass


class NumericalDivergence(DegenerateInput):
    pass


class InvalidLevelSet(DegenerateInput):
    pass


# quantification
class ComponentCollapse(DegenerateInput):
    pass


class DegeneratePartition(DegenerateInput):
    pass


class InvalidVolume(DegenerateInput):
    pass


class MissingBaseline(DegenerateInput):
    pass


# radiomics
class ConstantRoi(DegenerateInput):
    pass


class EmptyGlcm(DegenerateInput):
    pass


# classifier
class SingleClass(DegenerateInput):
    pass


class FeatureArityError(DegenerateInput):
    pass


class StratificationError(DegenerateInput):
    pass


class LengthMismatch(DegenerateInput, ValueError):
    pass


# metrics
class EmptyReference(DegenerateInput):
    pass


class TooFewRaters(DegenerateInput):
    pass


class TooFewSlices(DegenerateInput):
    pass
