"""Exception hierarchy shared by all modules."""


class GraphGamesError(Exception):
    """Base class for all library errors."""


# -- graph construction ------------------------------------------------------

class SelfLoop(GraphGamesError):
    pass


class NonPositiveWeight(GraphGamesError):
    pass


class NoSpanningTree(GraphGamesError):
    pass


class SingularPinnedLaplacian(GraphGamesError):
    pass


# -- dynamics ----------------------------------------------------------------

class DimensionMismatch(GraphGamesError):
    pass


class UnknownAgent(GraphGamesError):
    pass


class MissingNeighborInput(GraphGamesError):
    pass


class BadNeighborOrder(GraphGamesError):
    pass


class NumericalDivergence(GraphGamesError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


# -- game / weights ----------------------------------------------------------

class WrongMode(GraphGamesError):
    pass


class SingularWeight(GraphGamesError):
    pass


class TailTooLarge(GraphGamesError):
    pass


# -- policy iteration --------------------------------------------------------

class RankDeficient(GraphGamesError):
    pass


class ResidualTooLarge(GraphGamesError):
    pass


class WrongCurvature(GraphGamesError):
    pass


class SingularSchurComplement(GraphGamesError):
    pass


class SingularBlockMatrix(GraphGamesError):
    pass


class NotAdmissible(GraphGamesError):
    pass


class MaxIterations(GraphGamesError):
    pass


class NoConvergence(GraphGamesError):
    pass


class IllPosedSaddle(GraphGamesError):
    pass


# -- online learning ---------------------------------------------------------

class NonFiniteWeights(GraphGamesError):
    pass


class MissingReference(GraphGamesError):
    pass


# -- configuration -----------------------------------------------------------

class ConfigParseError(GraphGamesError):
    pass


class ConfigValidationError(GraphGamesError):
    pass
