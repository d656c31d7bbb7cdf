"""Exception types raised across the library.

Everything derives from HcnnError so callers can catch broadly; the CLI
maps subclasses onto its exit codes.
"""


class HcnnError(Exception):
    """Base class for all library errors."""


class ParameterError(HcnnError):
    """Invalid or inconsistent parameter set."""


class DomainError(HcnnError):
    """Polynomial is in the wrong representation domain for the operation."""


class BasisError(HcnnError):
    """Residue basis mismatch or empty basis."""


class LevelError(HcnnError):
    """Level mismatch between operands, or no level left to consume."""


class ScaleError(HcnnError):
    """Operand scales incompatible, or scale overflowed the modulus budget."""


class KeyError_(HcnnError):
    """A required evaluation key (relinearisation or rotation step) is missing."""


class RefreshError(HcnnError):
    """Debug refresh requested outside test mode or without a plan slot."""


class PackingError(HcnnError):
    """Tensor does not fit the slot budget, or format mismatch between operands."""


class GraphError(HcnnError):
    """Unsupported topology, inconsistent shape chain, or plan/graph mismatch."""


class PlanError(HcnnError):
    """Level planning infeasible for the given budget."""


class SerializationError(HcnnError):
    """Container malformed, wrong kind, or parameter digest mismatch."""
