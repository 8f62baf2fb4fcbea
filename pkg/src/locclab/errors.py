"""Exception hierarchy.

The three intermediate classes map one-to-one onto CLI exit codes:
``InputError`` -> 2, ``PreconditionError`` -> 3, ``ResourceGuard`` -> 4.
"""


class LocclabError(Exception):
    exit_code = 1


class InputError(LocclabError):
    exit_code = 2


class PreconditionError(LocclabError):
    exit_code = 3


class ResourceGuard(LocclabError):
    exit_code = 4


class MalformedInput(InputError):
    pass


class NormalizationError(InputError):
    pass


class LayoutMismatch(InputError):
    pass


class IncompleteInstrument(InputError):
    def __init__(self, message, max_deviation=None):
        super().__init__(message)
        self.max_deviation = max_deviation


class InvalidSubset(PreconditionError):
    pass


class NotEntangled(PreconditionError):
    pass


class NotIrreducible(PreconditionError):
    pass


class NotFactorizable(PreconditionError):
    pass


class NotACatState(PreconditionError):
    pass


class NoEprAvailable(PreconditionError):
    pass


class UnsupportedDimension(PreconditionError):
    pass


class CopyBudgetExceeded(PreconditionError):
    pass


class BasisSearchExhausted(PreconditionError):
    pass


class BranchExplosion(ResourceGuard):
    pass


class DimensionLimit(ResourceGuard):
    pass


class InvalidParameter(InputError):
    pass
