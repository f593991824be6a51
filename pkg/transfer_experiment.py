"""Value transfer between two mazes with isomorphic transition graphs.

1. Learn the source maze with tabular Q-learning and read off V(s) = max_a Q(s, a).
2. Build state graphs of both mazes from the learners' own transitions: the first
   `graph_episodes` episodes of each run feed `observe_transition`, so edge weights
   are traversal counts. The source graph is labelled with V.
3. Match the graphs spectrally; when matched, keep training on the target maze with
   the transferred label as intrinsic reward, and compare with an unshaped learner
   that shares the same graph-building episodes and random stream.

The default target is the source maze with x and y swapped, actions included. Source
and target learners start from the same seed, so their graph-building episodes are
mirror images and the two weighted graphs are isomorphic. `GraphSource.SWEEP`
replaces step 2 with an exhaustive sweep of every free cell and move (each undirected
edge ends with weight 2).
"""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np

from errors import ValidationError
from gchrl_shaping import AgentConfig, EpisodeMetrics, MetricsTable
from gridworld import Cell, GridEnv, cell_of, phi
from spectral_transfer import (
    DEFAULT_EPS_LAMBDA,
    DEFAULT_GAP_TOL,
    MatchKind,
    MatchResult,
    graph_summary,
    label_value,
    match_nodes,
    spectral_distance,
    transfer_intrinsic,
)
from state_graph import StateGraph, create_graph, observe_transition

logger = logging.getLogger(__name__)

TRANSFER_HEADER = [
    "seed",
    "match",
    "spectral_distance",
    "max_row_distance",
    "shaped_episodes_to_target",
    "baseline_episodes_to_target",
    "shaped_auc",
    "baseline_auc",
]


class ShapingMode(str, Enum):
    VALUE = "value"
    POTENTIAL = "potential"


class GraphSource(str, Enum):
    TRAJECTORY = "trajectory"
    SWEEP = "sweep"


@dataclass(frozen=True)
class TransferSettings:
    eps_lambda: float = DEFAULT_EPS_LAMBDA
    eps_v: float = 1e-6
    beta: float = 1.0
    gap_tol: float = DEFAULT_GAP_TOL
    mode: ShapingMode = ShapingMode.POTENTIAL
    source_episodes: int = 300
    target_episodes: int = 200
    # episodes of each run that feed its state graph
    graph_episodes: int = 30
    graph_source: GraphSource = GraphSource.TRAJECTORY
    epsilon_d: float = 0.01
    eigensolver: str = "jacobi"

    def __post_init__(self) -> None:
        for name in ("eps_lambda", "eps_v", "gap_tol", "epsilon_d"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.beta < 0:
            raise ValidationError(f"beta must be >= 0, got {self.beta}")
        if self.source_episodes < 1 or self.target_episodes < 1:
            raise ValidationError("episode counts must be >= 1")
        if not 1 <= self.graph_episodes <= self.source_episodes:
            raise ValidationError(
                f"graph_episodes must lie in [1, source_episodes], got {self.graph_episodes}"
            )
        if self.graph_source is GraphSource.TRAJECTORY and self.graph_episodes >= self.target_episodes:
            raise ValidationError(
                f"graph_episodes ({self.graph_episodes}) must be below target_episodes "
                f"({self.target_episodes})"
            )
        if self.eigensolver not in ("jacobi", "scipy"):
            raise ValidationError(f"unknown eigensolver {self.eigensolver!r}")


Shaper = Callable[[Cell, Cell], float]


@dataclass
class QLearner:
    """Epsilon-greedy tabular Q-learner; epsilon decays linearly over `schedule` episodes."""

    config: AgentConfig
    rng: np.random.Generator
    schedule: int
    q: dict[Cell, np.ndarray] = field(default_factory=dict)
    episodes_done: int = 0

    def row(self, env: GridEnv, cell: Cell) -> np.ndarray:
        if cell not in self.q:
            self.q[cell] = np.zeros(len(env.actions))
        return self.q[cell]

    def epsilon(self) -> float:
        cfg = self.config
        if self.schedule <= 1:
            return cfg.epsilon_end
        frac = min(self.episodes_done / (self.schedule - 1), 1.0)
        return cfg.epsilon_start + frac * (cfg.epsilon_end - cfg.epsilon_start)

    def run_episode(
        self, env: GridEnv, shaper: Shaper | None = None, graph: StateGraph | None = None
    ) -> EpisodeMetrics:
        """One episode; `shaper(cell, next_cell)` is added to each reward, `graph` records the path."""
        started = time.perf_counter()
        eps = self.epsilon()
        cfg = self.config
        cell = env.start
        node = observe_transition(graph, None, phi(env, cell)).node_id if graph is not None else None
        success = int(cell == env.goal)
        ret = 0.0
        steps = 0
        while not success and steps < cfg.max_steps:
            values = self.row(env, cell)
            if self.rng.random() < eps:
                action = int(self.rng.integers(len(env.actions)))
            else:
                best = np.flatnonzero(values == values.max())
                action = int(best[self.rng.integers(best.size)])
            nxt, r_ext, done = env.step(cell, action)
            if graph is not None:
                node = observe_transition(graph, node, phi(env, nxt)).node_id
            reward = r_ext + (shaper(cell, nxt) if shaper is not None else 0.0)
            target = reward if done else reward + cfg.gamma * float(self.row(env, nxt).max())
            values[action] += cfg.learning_rate * (target - values[action])
            ret += r_ext
            steps += 1
            cell = nxt
            success = int(done)
        metrics = EpisodeMetrics(
            self.episodes_done, success, ret, steps, (time.perf_counter() - started) * 1000.0
        )
        self.episodes_done += 1
        return metrics

    def fork(self) -> QLearner:
        """Independent copy: same table, same position in the random stream."""
        return QLearner(
            self.config,
            copy.deepcopy(self.rng),
            self.schedule,
            {cell: row.copy() for cell, row in self.q.items()},
            self.episodes_done,
        )


def q_learning(
    env: GridEnv,
    episodes: int,
    rng: np.random.Generator,
    config: AgentConfig,
    shaper: Shaper | None = None,
    *,
    schedule: int | None = None,
) -> tuple[dict[Cell, np.ndarray], MetricsTable]:
    """Train a fresh learner for `episodes` episodes."""
    learner = QLearner(config, rng, schedule or episodes)
    table = MetricsTable([learner.run_episode(env, shaper) for _ in range(episodes)])
    return learner.q, table


def state_values(env: GridEnv, q: dict[Cell, np.ndarray]) -> dict[Cell, float]:
    values = {cell: float(row.max()) for cell, row in q.items()}
    values[env.goal] = 0.0
    return values


def label_graph(graph: StateGraph, env: GridEnv, values: dict[Cell, float]) -> None:
    for node in graph.occupied_ids():
        cell = cell_of(env, graph.feature(node))
        if cell in values:
            label_value(graph, node, values[cell])


def record_graph(
    env: GridEnv, settings: TransferSettings, seed: int, agent_config: AgentConfig
) -> tuple[StateGraph, QLearner, MetricsTable]:
    """Graph of the first `graph_episodes` episodes of a fresh learner seeded with `seed`.

    Returns the graph, the learner positioned after those episodes, and their metrics.
    """
    graph = create_graph(len(env.free_cells()), settings.epsilon_d)
    learner = QLearner(agent_config, np.random.default_rng(seed), settings.target_episodes)
    played = MetricsTable(
        [learner.run_episode(env, graph=graph) for _ in range(settings.graph_episodes)]
    )
    return graph, learner, played


def sweep_graph(
    env: GridEnv,
    rng: np.random.Generator,
    *,
    epsilon_d: float = 0.01,
    values: dict[Cell, float] | None = None,
) -> StateGraph:
    """Visit every free cell (in shuffled order) and each of its moves once."""
    cells = env.free_cells()
    graph = create_graph(len(cells), epsilon_d)
    order = rng.permutation(len(cells))
    for k in order:
        cell = cells[int(k)]
        node = observe_transition(graph, None, phi(env, cell)).node_id
        for action in range(len(env.actions)):
            nxt = env.move(cell, action)
            if nxt != cell:
                observe_transition(graph, node, phi(env, nxt))
    if values is not None:
        label_graph(graph, env, values)
    return graph


def episodes_to_success(table: MetricsTable, rate: float = 0.9, window: int = 10) -> int:
    """First episode after which the trailing success rate reaches `rate`; len(table) if never."""
    curve = table.success_curve()
    for end in range(window, curve.size + 1):
        if curve[end - window:end].mean() >= rate:
            return end
    return len(table)


def make_shaper(
    env2: GridEnv,
    graph2: StateGraph,
    match: MatchResult,
    labels1: dict[int, float],
    settings: TransferSettings,
    gamma: float = 0.99,
) -> Shaper:
    """Intrinsic reward from transferred labels.

    VALUE pays `beta * y(next)`. POTENTIAL pays `beta * (gamma * y(next) - y(cell))`
    with y(goal) = 0, which leaves the optimal policy of a learner discounting by
    `gamma` unchanged.
    """
    cache: dict[Cell, float] = {}

    def transferred(cell: Cell) -> float:
        if cell not in cache:
            cache[cell] = transfer_intrinsic(graph2, match, labels1, phi(env2, cell), 1.0)
        return cache[cell]

    beta = settings.beta
    if settings.mode is ShapingMode.POTENTIAL:
        def potential(cell: Cell, nxt: Cell) -> float:
            after = 0.0 if nxt == env2.goal else transferred(nxt)
            return beta * (gamma * after - transferred(cell))

        return potential
    return lambda cell, nxt: beta * transferred(nxt)


@dataclass(frozen=True)
class TransferResult:
    seed: int
    match: MatchKind
    spectral_distance: float
    max_row_distance: float
    shaped: MetricsTable
    baseline: MetricsTable

    def row(self) -> list[object]:
        return [
            self.seed,
            self.match.value,
            repr(self.spectral_distance),
            repr(self.max_row_distance),
            episodes_to_success(self.shaped),
            episodes_to_success(self.baseline),
            repr(self.shaped.auc()),
            repr(self.baseline.auc()),
        ]


def build_graphs(
    source: GridEnv,
    target: GridEnv,
    settings: TransferSettings,
    seed: int,
    agent_config: AgentConfig,
) -> tuple[StateGraph, StateGraph, QLearner, MetricsTable]:
    """Labelled source graph, target graph, and the target learner positioned after graph building.

    The returned table holds the target episodes already played while building the
    target graph (empty for a sweep).
    """
    schedule = settings.target_episodes
    if settings.graph_source is GraphSource.SWEEP:
        rng = np.random.default_rng(seed)
        q_src, _ = q_learning(source, settings.source_episodes, rng, agent_config, schedule=schedule)
        values = state_values(source, q_src)
        graph1 = sweep_graph(source, rng, epsilon_d=settings.epsilon_d, values=values)
        graph2 = sweep_graph(target, rng, epsilon_d=settings.epsilon_d)
        return graph1, graph2, QLearner(agent_config, rng, schedule), MetricsTable()

    graph1, source_learner, _ = record_graph(source, settings, seed, agent_config)
    for _ in range(settings.source_episodes - settings.graph_episodes):
        source_learner.run_episode(source)
    label_graph(graph1, source, state_values(source, source_learner.q))
    graph2, learner, played = record_graph(target, settings, seed, agent_config)
    return graph1, graph2, learner, played


def run_transfer(
    source: GridEnv,
    settings: TransferSettings,
    seed: int,
    agent_config: AgentConfig | None = None,
    target: GridEnv | None = None,
) -> TransferResult:
    source.validate()
    target = target or source.transposed()
    target.validate()
    agent_config = agent_config or AgentConfig()

    graph1, graph2, learner, played = build_graphs(source, target, settings, seed, agent_config)
    s1 = graph_summary(graph1, settings.gap_tol, eigensolver=settings.eigensolver)
    s2 = graph_summary(graph2, settings.gap_tol, eigensolver=settings.eigensolver)
    distance = spectral_distance(s1, s2) if s1.size == s2.size else float("inf")
    match = match_nodes(s1, s2, settings.eps_v, eps_lambda=settings.eps_lambda)
    logger.debug(
        "seed %d: graphs of %d and %d nodes, spectral distance %.3g",
        seed,
        graph1.num_occupied,
        graph2.num_occupied,
        distance,
    )

    shaper = None
    if match.matched and settings.beta > 0:
        shaper = make_shaper(target, graph2, match, graph1.labels(), settings, agent_config.gamma)
    else:
        logger.warning("seed %d: no transfer (%s), shaped run is unshaped", seed, match.kind.value)

    baseline_learner = learner.fork()
    remaining = settings.target_episodes - len(played)
    shaped = MetricsTable(list(played.rows))
    baseline = MetricsTable(list(played.rows))
    for _ in range(remaining):
        shaped.rows.append(learner.run_episode(target, shaper))
        baseline.rows.append(baseline_learner.run_episode(target))
    return TransferResult(seed, match.kind, distance, match.max_row_distance, shaped, baseline)


def write_transfer_csv(path: Path, results: list[TransferResult]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRANSFER_HEADER)
        for result in sorted(results, key=lambda r: r.seed):
            writer.writerow(result.row())
