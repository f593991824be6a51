"""Fixed-capacity online graph of visited state representations.

Every environment step hands the current state feature to `observe_transition`.
The graph either relabels the nearest stored node (when one lies within
`epsilon_d`), fills an empty slot, or evicts a node once full. Transitions
between consecutive observations become symmetric edge weights, and a weighted
change counter decides when the graph encoder-decoder should be retrained.

Snapshots are stored as versioned `.npz` archives (`save_graph` / `load_graph`).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from errors import (
    DimensionError,
    InvalidCapacity,
    InvalidTolerance,
    InvalidWeights,
    SnapshotVersionError,
    StaleNodeError,
)

logger = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1


class EvictionPolicy(str, Enum):
    OLDEST = "oldest"
    WEAKEST_CONNECTED = "weakest_connected"


class OutcomeKind(str, Enum):
    INSERTED_NEW = "inserted_new"
    RELABELED = "relabeled"
    EVICTED_AND_INSERTED = "evicted_and_inserted"
    SKIPPED_BY_INTERVAL = "skipped_by_interval"


@dataclass(frozen=True)
class ObservationOutcome:
    kind: OutcomeKind
    node_id: int | None = None
    evicted_id: int | None = None
    edge_updated: tuple[int, int] | None = None
    # nodes absorbed into `node_id` because a relabel moved it within epsilon_d of them
    merged: tuple[int, ...] = ()


@dataclass(eq=False)
class StateGraph:
    capacity: int
    epsilon_d: float
    eviction_policy: EvictionPolicy
    sample_interval: int
    feature_weights: np.ndarray | None = None
    features: np.ndarray | None = None
    node_labels: np.ndarray = field(init=False)
    labeled: np.ndarray = field(init=False)
    occupied: np.ndarray = field(init=False)
    ages: np.ndarray = field(init=False)
    adjacency: np.ndarray = field(init=False)
    change_counter: float = 0.0
    step_counter: int = 0
    next_age: int = 0

    def __post_init__(self) -> None:
        n = self.capacity
        self.node_labels = np.zeros(n, dtype=np.float64)
        self.labeled = np.zeros(n, dtype=bool)
        self.occupied = np.zeros(n, dtype=bool)
        self.ages = np.full(n, -1, dtype=np.int64)
        self.adjacency = np.zeros((n, n), dtype=np.float64)
        if self.feature_weights is not None and self.features is None:
            self.features = np.zeros((n, self.feature_weights.shape[0]), dtype=np.float64)

    @property
    def dim(self) -> int | None:
        if self.features is not None:
            return int(self.features.shape[1])
        return None

    @property
    def num_occupied(self) -> int:
        return int(self.occupied.sum())

    def tick(self) -> int:
        """Advance the environment-step counter; call once per environment step."""
        self.step_counter += 1
        return self.step_counter

    def occupied_ids(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.occupied)]

    def is_occupied(self, node_id: int) -> bool:
        return 0 <= node_id < self.capacity and bool(self.occupied[node_id])

    def feature(self, node_id: int) -> np.ndarray:
        self._require_occupied(node_id)
        assert self.features is not None
        return self.features[node_id].copy()

    def label(self, node_id: int) -> float | None:
        self._require_occupied(node_id)
        return float(self.node_labels[node_id]) if self.labeled[node_id] else None

    def labels(self) -> dict[int, float]:
        ids = np.flatnonzero(self.occupied & self.labeled)
        return {int(i): float(self.node_labels[i]) for i in ids}

    def set_label(self, node_id: int, value: float) -> None:
        self._require_occupied(node_id)
        self.node_labels[node_id] = float(value)
        self.labeled[node_id] = True

    def nearest(self, feature: Sequence[float] | np.ndarray) -> int | None:
        """Occupied node closest to `feature` (lowest id on ties), or None if empty."""
        x = self._check_feature(feature, allocate=False)
        occ = np.flatnonzero(self.occupied)
        if occ.size == 0 or self.features is None:
            return None
        return int(occ[np.argmin(self._distances(x, occ))])

    def copy(self) -> StateGraph:
        clone = StateGraph(
            capacity=self.capacity,
            epsilon_d=self.epsilon_d,
            eviction_policy=self.eviction_policy,
            sample_interval=self.sample_interval,
            feature_weights=None if self.feature_weights is None else self.feature_weights.copy(),
            features=None if self.features is None else self.features.copy(),
            change_counter=self.change_counter,
            step_counter=self.step_counter,
            next_age=self.next_age,
        )
        clone.node_labels = self.node_labels.copy()
        clone.labeled = self.labeled.copy()
        clone.occupied = self.occupied.copy()
        clone.ages = self.ages.copy()
        clone.adjacency = self.adjacency.copy()
        return clone

    def _require_occupied(self, node_id: int) -> None:
        if not self.is_occupied(node_id):
            raise StaleNodeError(f"node {node_id} is not occupied")

    def _weights(self, dim: int) -> np.ndarray:
        if self.feature_weights is None:
            return np.ones(dim, dtype=np.float64)
        if self.feature_weights.shape[0] != dim:
            raise DimensionError(
                f"feature has dimension {dim}, weights have dimension {self.feature_weights.shape[0]}"
            )
        return self.feature_weights

    def _check_feature(
        self, feature: Sequence[float] | np.ndarray, allocate: bool = True
    ) -> np.ndarray:
        x = np.asarray(feature, dtype=np.float64)
        if x.ndim != 1 or x.size == 0:
            raise DimensionError(f"expected a non-empty vector, got shape {x.shape}")
        if self.features is None:
            self._weights(x.shape[0])
            if not allocate:
                return x
            self.features = np.zeros((self.capacity, x.shape[0]), dtype=np.float64)
        elif x.shape[0] != self.features.shape[1]:
            raise DimensionError(
                f"feature has dimension {x.shape[0]}, graph stores dimension {self.features.shape[1]}"
            )
        return x

    def _distances(self, x: np.ndarray, ids: np.ndarray) -> np.ndarray:
        assert self.features is not None
        diff = self.features[ids] - x
        return np.sqrt((diff * diff) @ self._weights(x.shape[0]))


def create_graph(
    capacity: int,
    epsilon_d: float,
    eviction_policy: EvictionPolicy | str = EvictionPolicy.OLDEST,
    t_c: int = 1,
    feature_weights: Sequence[float] | np.ndarray | None = None,
) -> StateGraph:
    if capacity < 2:
        raise InvalidCapacity(f"capacity must be >= 2, got {capacity}")
    if epsilon_d < 0:
        raise InvalidTolerance(f"epsilon_d must be >= 0, got {epsilon_d}")
    if t_c < 1:
        raise InvalidTolerance(f"t_c must be a positive integer, got {t_c}")
    weights = None
    if feature_weights is not None:
        weights = np.asarray(feature_weights, dtype=np.float64)
        if weights.ndim != 1 or weights.size == 0:
            raise InvalidWeights(f"feature_weights must be a non-empty vector, got shape {weights.shape}")
        if not np.all(weights > 0):
            raise InvalidWeights(f"feature_weights must all be > 0, got {weights.tolist()}")
    return StateGraph(
        capacity=int(capacity),
        epsilon_d=float(epsilon_d),
        eviction_policy=EvictionPolicy(eviction_policy),
        sample_interval=int(t_c),
        feature_weights=weights,
    )


def distance(graph: StateGraph, a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    """Weighted Euclidean distance sqrt(sum_i w_i (a_i - b_i)^2)."""
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if va.ndim != 1 or va.shape != vb.shape:
        raise DimensionError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    diff = va - vb
    return float(np.sqrt(np.sum(graph._weights(va.shape[0]) * diff * diff)))


def observe_transition(
    graph: StateGraph,
    prev_node: int | None,
    current_feature: Sequence[float] | np.ndarray,
) -> ObservationOutcome:
    x = graph._check_feature(current_feature)
    if prev_node is not None and not graph.is_occupied(prev_node):
        raise StaleNodeError(f"previous node {prev_node} is no longer occupied")
    if graph.step_counter % graph.sample_interval != 0:
        return ObservationOutcome(OutcomeKind.SKIPPED_BY_INTERVAL)

    occ = np.flatnonzero(graph.occupied)
    if occ.size:
        dists = graph._distances(x, occ)
        within = dists <= graph.epsilon_d
        if within.any():
            # argmin returns the first minimum, i.e. the lowest node id
            target = int(occ[np.argmin(np.where(within, dists, np.inf))])
            return _relabel(graph, target, x, prev_node)

    n = graph.capacity
    free = np.flatnonzero(~graph.occupied)
    evicted: int | None = None
    if free.size:
        slot = int(free[0])
    else:
        slot = _eviction_victim(graph)
        evicted = slot
        _clear_slot(graph, slot)
        logger.debug("evicted node %d (%s)", slot, graph.eviction_policy.value)

    assert graph.features is not None
    graph.features[slot] = x
    graph.occupied[slot] = True
    graph.ages[slot] = graph.next_age
    graph.next_age += 1
    graph.change_counter += n - 1

    edge: tuple[int, int] | None = None
    # an evicted prev_node is stale: no edge to the slot that replaced it
    if prev_node is not None and prev_node != slot:
        graph.adjacency[prev_node, slot] = 1.0
        graph.adjacency[slot, prev_node] = 1.0
        edge = (prev_node, slot)

    if evicted is None:
        return ObservationOutcome(OutcomeKind.INSERTED_NEW, node_id=slot, edge_updated=edge)
    return ObservationOutcome(
        OutcomeKind.EVICTED_AND_INSERTED, node_id=slot, evicted_id=evicted, edge_updated=edge
    )


def _relabel(graph: StateGraph, target: int, x: np.ndarray, prev_node: int | None) -> ObservationOutcome:
    assert graph.features is not None
    graph.features[target] = x
    merged = _absorb_close_nodes(graph, target)

    edge: tuple[int, int] | None = None
    if prev_node is not None and prev_node != target and graph.occupied[prev_node]:
        graph.adjacency[prev_node, target] += 1.0
        graph.adjacency[target, prev_node] += 1.0
        graph.change_counter += 1
        edge = (prev_node, target)
    return ObservationOutcome(OutcomeKind.RELABELED, node_id=target, edge_updated=edge, merged=merged)


def _absorb_close_nodes(graph: StateGraph, target: int) -> tuple[int, ...]:
    assert graph.features is not None
    others = np.flatnonzero(graph.occupied)
    others = others[others != target]
    if others.size == 0:
        return ()
    close = others[graph._distances(graph.features[target], others) <= graph.epsilon_d]
    adj = graph.adjacency
    for u in close:
        row = adj[u].copy()
        row[u] = 0.0
        row[target] = 0.0
        adj[target] += row
        adj[:, target] += row
        _clear_slot(graph, int(u))
        graph.change_counter += graph.capacity - 1
        logger.debug("merged node %d into %d", u, target)
    adj[target, target] = 0.0
    return tuple(int(u) for u in close)


def _eviction_victim(graph: StateGraph) -> int:
    if graph.eviction_policy is EvictionPolicy.OLDEST:
        ages = np.where(graph.occupied, graph.ages, np.iinfo(np.int64).max)
        return int(np.argmin(ages))
    strength = np.where(graph.occupied, graph.adjacency.sum(axis=1), np.inf)
    return int(np.argmin(strength))


def _clear_slot(graph: StateGraph, slot: int) -> None:
    graph.adjacency[slot, :] = 0.0
    graph.adjacency[:, slot] = 0.0
    graph.occupied[slot] = False
    graph.labeled[slot] = False
    graph.node_labels[slot] = 0.0
    graph.ages[slot] = -1
    if graph.features is not None:
        graph.features[slot] = 0.0


def should_train_and_reset(graph: StateGraph, beta: float) -> bool:
    """Fire the training trigger once c >= beta * (N^2 - N), resetting c to 0."""
    if beta <= 0:
        raise InvalidTolerance(f"beta must be > 0, got {beta}")
    n = graph.capacity
    if graph.change_counter >= beta * (n * n - n):
        logger.debug("training trigger fired at c=%.1f", graph.change_counter)
        graph.change_counter = 0.0
        return True
    return False


def normalized_adjacency(graph: StateGraph) -> np.ndarray:
    adj = graph.adjacency
    off_diagonal = adj[~np.eye(graph.capacity, dtype=bool)]
    peak = float(off_diagonal.max()) if off_diagonal.size else 0.0
    if peak <= 0.0:
        return np.zeros_like(adj)
    return adj / peak


def save_graph(graph: StateGraph, path: Path) -> None:
    occ = np.flatnonzero(graph.occupied)
    dim = graph.dim or 0
    features = graph.features if graph.features is not None else np.zeros((graph.capacity, 0))
    weights = graph.feature_weights if graph.feature_weights is not None else np.zeros(0)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    with tmp_path.open("wb") as fh:
        np.savez(
            fh,
            format_version=np.int64(SNAPSHOT_VERSION),
            capacity=np.int64(graph.capacity),
            dim=np.int64(dim),
            epsilon_d=np.float64(graph.epsilon_d),
            eviction_policy=np.array(graph.eviction_policy.value),
            sample_interval=np.int64(graph.sample_interval),
            step_counter=np.int64(graph.step_counter),
            change_counter=np.float64(graph.change_counter),
            next_age=np.int64(graph.next_age),
            feature_weights=weights,
            slot_ids=occ.astype(np.int64),
            ages=graph.ages[occ],
            features=features[occ],
            labels=graph.node_labels[occ],
            labeled=graph.labeled[occ],
            adjacency=graph.adjacency,
        )
    tmp_path.replace(path)


def load_graph(path: Path) -> StateGraph:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != SNAPSHOT_VERSION:
            raise SnapshotVersionError(f"unsupported graph snapshot version {version} in {path}")
        weights = data["feature_weights"]
        graph = create_graph(
            int(data["capacity"]),
            float(data["epsilon_d"]),
            str(data["eviction_policy"]),
            int(data["sample_interval"]),
            weights if weights.size else None,
        )
        dim = int(data["dim"])
        if dim:
            graph.features = np.zeros((graph.capacity, dim), dtype=np.float64)
        slots = data["slot_ids"]
        graph.occupied[slots] = True
        graph.ages[slots] = data["ages"]
        if dim:
            graph.features[slots] = data["features"]
        graph.node_labels[slots] = data["labels"]
        graph.labeled[slots] = data["labeled"]
        graph.adjacency[:] = data["adjacency"]
        graph.step_counter = int(data["step_counter"])
        graph.change_counter = float(data["change_counter"])
        graph.next_age = int(data["next_age"])
    return graph
