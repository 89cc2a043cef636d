"""Exception types shared across the package."""


class DopfError(Exception):
    """Base class for all package errors."""

    code = "DopfError"


class FeederError(DopfError, ValueError):
    code = "FeederError"


class DuplicateBusId(FeederError):
    code = "DuplicateBusId"


class NonTreeTopology(FeederError):
    code = "NonTreeTopology"


class PhaseMismatch(FeederError):
    code = "PhaseMismatch"


class MissingSlack(FeederError):
    code = "MissingSlack"


class NonPositiveResistance(FeederError):
    code = "NonPositiveResistance"


class ConflictingRoles(FeederError):
    code = "ConflictingRoles"


class CapacityError(DopfError, ValueError):
    code = "InfeasibleCapacity"


class ScenarioError(DopfError, ValueError):
    code = "ScenarioError"


class UnknownBus(ScenarioError):
    code = "UnknownBus"


class NonUniformTimestep(ScenarioError):
    code = "NonUniformTimestep"


class NegativeLoad(ScenarioError):
    code = "NegativeLoad"


class InvalidFraction(ScenarioError):
    code = "InvalidFraction"


class BadFractions(ScenarioError):
    code = "BadFractions"


class DimensionMismatch(DopfError, ValueError):
    code = "DimensionMismatch"


class NoConvergence(DopfError, RuntimeError):
    code = "NoConvergence"


class MissingPhaseData(DopfError, ValueError):
    code = "MissingPhaseData"


class InfoError(DopfError, ValueError):
    code = "InfoError"


class EmptyInput(InfoError):
    code = "EmptyInput"


class TooManyCombinations(InfoError):
    code = "TooManyCombinations"


class MissingBaseVariable(DopfError, KeyError):
    code = "MissingBaseVariable"


class SplitMismatch(DopfError, ValueError):
    code = "SplitMismatch"


class MissingStageInput(DopfError, FileNotFoundError):
    code = "MissingStageInput"


class ConfigValidation(DopfError, ValueError):
    code = "ConfigValidation"
