"""Exception hierarchy shared by all verifier modules."""


class VerifierError(Exception):
    """Base class for every error raised by this package."""


class ParseError(VerifierError, ValueError):
    pass


class ShapeError(VerifierError, ValueError):
    pass


class NonFiniteError(VerifierError, ValueError):
    pass


class PhaseError(VerifierError, ValueError):
    """A neuron required to have a fixed phase is unfixed."""


class LPError(VerifierError):
    pass


class NumericError(LPError):
    """Pivoting broke down (iteration cap hit or ill-conditioned pivot)."""


class NotInfeasibleError(LPError):
    pass


class BaseInfeasibleError(LPError):
    """The program is infeasible even with every candidate constraint removed."""


class SamplingError(VerifierError):
    pass


class EmptySamplesError(VerifierError, ValueError):
    pass


class InconsistentDecisionsError(VerifierError, ValueError):
    pass


class DomainError(VerifierError, ValueError):
    """A relaxation was requested for a neuron that does not straddle zero."""
