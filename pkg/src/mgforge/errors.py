"""Exception hierarchy shared by all mgforge modules."""


class MgforgeError(Exception):
    """Base class for every error raised by mgforge."""


# forms / kernel
class MalformedForm(MgforgeError):
    pass


class UnboundConstant(MgforgeError):
    pass


class UnsupportedIntegrand(MgforgeError):
    pass


# mesh
class RankCountExceedsSlabs(MgforgeError):
    pass


class UnknownMarker(MgforgeError):
    pass


# fe
class UnsupportedDegree(MgforgeError):
    pass


# kernel
class DegenerateCell(MgforgeError):
    pass


# la
class StaleGhosts(MgforgeError):
    pass


class LayoutMismatch(MgforgeError):
    pass


class SingularMatrix(MgforgeError):
    pass


class CoarseProblemTooLarge(MgforgeError):
    pass


# solver
class UnknownOption(MgforgeError):
    pass


class InvalidValue(MgforgeError):
    pass


class MissingHierarchy(MgforgeError):
    pass


class BadTelescopeFactor(MgforgeError):
    pass


class DivergedMaxIts(MgforgeError):
    pass


class IndefiniteOperator(MgforgeError):
    pass


class SingularPatch(MgforgeError):
    pass


# runtime
class TeamAborted(MgforgeError):
    def __init__(self, rank, cause):
        self.rank = rank
        self.cause = cause
        super().__init__(f"rank {rank} failed: {type(cause).__name__}: {cause}")


class CollectiveOrderViolation(MgforgeError):
    pass


# bench
class DegenerateFit(MgforgeError):
    pass
