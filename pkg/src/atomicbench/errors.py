"""Exception types shared across the suite."""


class AtomicBenchError(Exception):
    """Base class for all suite errors."""


class TopologyUnavailable(AtomicBenchError):
    """The OS does not expose enough cache/topology metadata."""


class ParseError(AtomicBenchError):
    """A machine-description or params file is malformed."""


class ValidationError(AtomicBenchError):
    """A structural invariant is violated; the message names it."""


class UnknownCore(AtomicBenchError):
    """A core id is not part of the machine description."""


class UnstableClock(AtomicBenchError):
    """Two consecutive timer calibrations disagree by more than 1%."""


class PlacementUnsupported(AtomicBenchError):
    """The requested coherency placement cannot exist on this machine."""


class PinFailure(AtomicBenchError):
    """A worker could not be pinned to its core."""


class RendezvousTimeout(AtomicBenchError):
    """A worker repeatedly missed the common-start deadline."""


class HeterogeneousSpecs(AtomicBenchError):
    """summarize() was given measurements from different specs."""


class InfeasibleStride(AtomicBenchError):
    """No chase cycle satisfies the stride bound for the buffer geometry."""


class CapabilityMissing(AtomicBenchError):
    """The host lacks a required instruction (e.g. 16-byte CAS)."""


class InconsistentQuery(AtomicBenchError):
    """A model query contradicts the machine description."""


class EmptyInput(AtomicBenchError):
    """An operation that needs data received none."""


class ZeroMean(AtomicBenchError):
    """NRMSE is undefined for observations with non-positive mean."""


class MissingCoverage(AtomicBenchError):
    """The measurement set lacks a class needed for fitting."""


class ProtocolViolation(AtomicBenchError):
    """The coherence simulator reached an illegal state (internal bug)."""


class NoOverlap(AtomicBenchError):
    """Results and model parameters share no comparable groups."""


class UnknownFacetKey(AtomicBenchError):
    """A plot facet key is not a result-row field."""


class InvalidRoot(AtomicBenchError):
    """BFS root is out of range."""


class IoError(AtomicBenchError):
    """Result emission failed."""
