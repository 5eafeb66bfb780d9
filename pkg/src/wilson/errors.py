"""Exception types raised across the package.

Everything derives from :class:`WilsonError`, which is itself a ``ValueError``
so callers that only care about bad input can catch the builtin.
"""


class WilsonError(ValueError):
    pass


class InvalidDimension(WilsonError):
    pass


class InvalidMatrix(WilsonError):
    pass


class InvalidToken(WilsonError):
    pass


class InvalidWeights(WilsonError):
    pass


class OutOfRange(WilsonError):
    pass


class MaskedEdge(WilsonError):
    pass


class NoUpperEdge(WilsonError):
    pass


class GaugeFixedInput(WilsonError):
    """Curvature was asked to run on gauge-fixed (logging-only) activations."""


class NoScores(WilsonError):
    pass


class IncompatibleSubmodules(WilsonError):
    pass


class UnsupportedIntervention(WilsonError):
    pass


class InsufficientData(WilsonError):
    pass


class InsufficientSamples(WilsonError):
    pass


class InsufficientSeeds(WilsonError):
    pass


class InvalidPermutation(WilsonError):
    pass


class InvalidMix(WilsonError):
    pass


class EmptyOrbit(WilsonError):
    pass


class DegenerateLabels(WilsonError):
    pass


class SchemaMismatch(WilsonError):
    pass


class UnmappedSignal(WilsonError):
    pass


class MeasurementError(WilsonError):
    pass


class CsvParseError(WilsonError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line
