#!/usr/bin/env python3
# errors.py


class RefineLabError(Exception):
    """Base class for all library errors"""


class InputError(RefineLabError, ValueError):
    """Malformed input: wrong length, out-of-range time, bad tokens"""


class ConfigError(RefineLabError, ValueError):
    """Invalid run configuration or missing/mismatched run inputs"""


class GenerationError(RefineLabError):
    """Instance generator gave up after its retry budget"""


class NumericalError(RefineLabError, ArithmeticError):
    """Non-finite or otherwise invalid numerical result"""


class SingularityError(NumericalError):
    """Velocity requested where the schedule has (numerically) reached 1"""


class StepSizeError(NumericalError):
    """Euler step does not give a valid distribution even after clamping"""


class CapacityError(RefineLabError):
    """Dense enumeration requested for a state space that is too large"""


class CheckpointError(RefineLabError):
    """Checkpoint version, shape or checksum mismatch"""


class EvaluationError(RefineLabError):
    """Dataset inconsistent with the oracle or with the model"""
