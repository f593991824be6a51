"""Exception hierarchy shared by every denserew module.

`ValidationError` marks a violated precondition (bad argument, malformed input);
the CLI turns it into exit code 2. `StateError` marks an operation that cannot
proceed on the current state of a graph, game or match; the CLI exits with 1.
"""

from __future__ import annotations


class DenseRewardError(Exception):
    """Root of all errors raised on purpose by this package."""


class ValidationError(DenseRewardError, ValueError):
    pass


class StateError(DenseRewardError, RuntimeError):
    pass


# state_graph
class InvalidCapacity(ValidationError):
    pass


class InvalidWeights(ValidationError):
    pass


class InvalidTolerance(ValidationError):
    pass


class DimensionError(ValidationError):
    pass


class StaleNodeError(StateError):
    """A node id refers to a slot that is empty (never filled or evicted)."""


class SnapshotVersionError(ValidationError):
    """A graph snapshot was written by an unsupported format version."""


# graph_autoencoder
class EmptySample(ValidationError):
    pass


class InsufficientData(StateError):
    pass


class TrainingDiverged(StateError):
    """Gradient descent produced non-finite encoder parameters."""


# gchrl_shaping
class InvalidEnv(ValidationError):
    pass


# shapley_credit
class EmptySequence(ValidationError):
    pass


class InvalidTree(ValidationError):
    pass


class InvalidPartition(ValidationError):
    pass


class TooManyPlayers(ValidationError):
    pass


class BoundaryError(ValidationError):
    pass


class InvalidAlpha(ValidationError):
    pass


class InvalidMDP(ValidationError):
    pass


class MissingEvaluation(StateError):
    """A replayed game was asked for a coalition that was never recorded."""


# spectral_transfer
class InsufficientGraph(StateError):
    pass


class NotSymmetric(ValidationError):
    pass


class SizeMismatch(ValidationError):
    pass


class NotMatched(StateError):
    pass


# harness
class ConfigError(ValidationError):
    pass
