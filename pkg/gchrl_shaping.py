"""Graph-guided subgoal shaping for a two-level tabular agent.

The high level proposes a subgoal every K steps from the cells currently stored
in the state graph (plus the task goal, minus the cell it stands on; greedy ties
go to the task goal) and is rewarded with the extrinsic reward
plus `alpha_h` times the decoder similarity between the current state and the
subgoal. The low level is rewarded with the negative squared distance to the
subgoal plus `alpha_l` times the same similarity measured from the next state.
Every environment step also feeds the state graph, and the adaptive trigger
decides when the encoder gets another training phase.

`run_experiment` returns a `MetricsTable` (CSV header
`episode,success,return,steps,wallclock_ms`).
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import binomtest

from errors import DimensionError, StaleNodeError, ValidationError
from graph_autoencoder import (
    DEFAULT_HIDDEN,
    EncoderParams,
    TrainConfig,
    decode,
    default_layer_dims,
    encode,
    init_params,
    train_phase,
)
from gridworld import ACTIONS, Cell, GridEnv, cell_of, phi
from state_graph import (
    EvictionPolicy,
    OutcomeKind,
    StateGraph,
    create_graph,
    observe_transition,
    should_train_and_reset,
)

logger = logging.getLogger(__name__)

METRICS_HEADER = ["episode", "success", "return", "steps", "wallclock_ms"]


class Variant(str, Enum):
    BOTH = "both"
    HIGH_ONLY = "high_only"
    LOW_ONLY = "low_only"
    VANILLA = "vanilla"


@dataclass(frozen=True)
class ShapingConfig:
    alpha_h: float = 0.01
    alpha_l: float = 0.01
    K: int = 5
    beta: float = 1.0

    def __post_init__(self) -> None:
        if self.alpha_h < 0 or self.alpha_l < 0:
            raise ValidationError(f"alpha_h and alpha_l must be >= 0, got {self.alpha_h}, {self.alpha_l}")
        if self.K < 1:
            raise ValidationError(f"K must be a positive integer, got {self.K}")
        if not self.beta > 0:
            raise ValidationError(f"beta must be > 0, got {self.beta}")

    def masked(self, variant: Variant) -> tuple[float, float]:
        """(alpha_h, alpha_l) with the terms switched off by `variant` set to 0."""
        alpha_h = self.alpha_h if variant in (Variant.BOTH, Variant.HIGH_ONLY) else 0.0
        alpha_l = self.alpha_l if variant in (Variant.BOTH, Variant.LOW_ONLY) else 0.0
        return alpha_h, alpha_l


@dataclass(frozen=True)
class GraphSettings:
    capacity: int = 72
    epsilon_d: float = 0.05
    eviction_policy: EvictionPolicy = EvictionPolicy.OLDEST
    t_c: int = 1
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    embedding_dim: int | None = None


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.99
    learning_rate: float = 0.1
    epsilon_start: float = 0.1
    epsilon_end: float = 0.01
    max_steps: int = 100

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValidationError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValidationError(f"learning_rate must lie in (0, 1], got {self.learning_rate}")
        for name in ("epsilon_start", "epsilon_end"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {value}")
        if self.max_steps < 1:
            raise ValidationError(f"max_steps must be >= 1, got {self.max_steps}")


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"state and subgoal differ in shape: {a.shape} vs {b.shape}")


def high_level_reward(
    r_ext: float,
    phi_s: Sequence[float] | np.ndarray,
    g: Sequence[float] | np.ndarray,
    params: EncoderParams,
    alpha_h: float,
) -> float:
    s = np.asarray(phi_s, dtype=np.float64)
    goal = np.asarray(g, dtype=np.float64)
    _check_pair(s, goal)
    if alpha_h == 0.0:
        return float(r_ext)
    return float(r_ext) + alpha_h * decode(encode(params, s), encode(params, goal))


def low_level_reward(
    phi_next: Sequence[float] | np.ndarray,
    g: Sequence[float] | np.ndarray,
    params: EncoderParams,
    alpha_l: float,
) -> float:
    s = np.asarray(phi_next, dtype=np.float64)
    goal = np.asarray(g, dtype=np.float64)
    _check_pair(s, goal)
    diff = s - goal
    if alpha_l == 0.0:
        return -float(diff @ diff)
    return -float(diff @ diff) + alpha_l * decode(encode(params, s), encode(params, goal))


def _argmax_ties(values: np.ndarray) -> np.ndarray:
    """Indices of the maximal entries; NaN never wins, all-NaN keeps every index."""
    clean = np.where(np.isnan(values), -np.inf, values)
    return np.flatnonzero(clean == clean.max())


@dataclass
class HierAgent:
    """Tabular two-level agent: high-level Q over (cell, subgoal), low-level Q over (cell, subgoal, action)."""

    config: AgentConfig
    high_q: dict[tuple[Cell, Cell], float] = field(default_factory=dict)
    low_q: dict[tuple[Cell, Cell], np.ndarray] = field(default_factory=dict)

    def epsilon(self, episode: int, episodes: int) -> float:
        if episodes <= 1:
            return self.config.epsilon_end
        frac = episode / (episodes - 1)
        return self.config.epsilon_start + frac * (self.config.epsilon_end - self.config.epsilon_start)

    def _low(self, cell: Cell, subgoal: Cell) -> np.ndarray:
        key = (cell, subgoal)
        q = self.low_q.get(key)
        if q is None:
            q = np.zeros(len(ACTIONS))
            self.low_q[key] = q
        return q

    def select_subgoal(
        self,
        cell: Cell,
        candidates: Sequence[Cell],
        eps: float,
        rng: np.random.Generator,
        prefer: Cell | None = None,
    ) -> Cell:
        """Epsilon-greedy subgoal; greedy ties go to `prefer` when it is among them."""
        if rng.random() < eps:
            return candidates[int(rng.integers(len(candidates)))]
        values = np.array([self.high_q.get((cell, g), 0.0) for g in candidates])
        best = _argmax_ties(values)
        if prefer is not None:
            for i in best:
                if candidates[int(i)] == prefer:
                    return prefer
        return candidates[int(best[rng.integers(best.size)])]

    def select_action(self, cell: Cell, subgoal: Cell, eps: float, rng: np.random.Generator) -> int:
        if rng.random() < eps:
            return int(rng.integers(len(ACTIONS)))
        best = _argmax_ties(self._low(cell, subgoal))
        return int(best[rng.integers(best.size)])

    def update_low(
        self, cell: Cell, subgoal: Cell, action: int, reward: float, next_cell: Cell, terminal: bool
    ) -> None:
        q = self._low(cell, subgoal)
        target = reward if terminal else reward + self.config.gamma * float(self._low(next_cell, subgoal).max())
        q[action] += self.config.learning_rate * (target - q[action])

    def update_high(
        self,
        cell: Cell,
        subgoal: Cell,
        reward_sum: float,
        steps: int,
        next_cell: Cell,
        candidates: Sequence[Cell],
        terminal: bool,
    ) -> None:
        key = (cell, subgoal)
        old = self.high_q.get(key, 0.0)
        target = reward_sum
        if not terminal:
            best = max(self.high_q.get((next_cell, g), 0.0) for g in candidates)
            target += self.config.gamma**steps * best
        self.high_q[key] = old + self.config.learning_rate * (target - old)


@dataclass(frozen=True)
class EpisodeMetrics:
    episode: int
    success: int
    ret: float
    steps: int
    wallclock_ms: float


@dataclass
class MetricsTable:
    rows: list[EpisodeMetrics] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def deterministic_rows(self) -> list[tuple[int, int, float, int]]:
        """Rows without the wall-clock column, which is the only non-reproducible field."""
        return [(r.episode, r.success, r.ret, r.steps) for r in self.rows]

    def success_curve(self) -> np.ndarray:
        return np.array([r.success for r in self.rows], dtype=np.float64)

    def final_success(self, window: int = 50) -> float:
        curve = self.success_curve()
        return float(curve[-window:].mean()) if curve.size else 0.0

    def auc(self) -> float:
        curve = self.success_curve()
        return float(curve.mean()) if curve.size else 0.0

    def to_csv(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_HEADER)
            for r in self.rows:
                writer.writerow([r.episode, r.success, repr(r.ret), r.steps, f"{r.wallclock_ms:.3f}"])


@dataclass(frozen=True)
class StepRecord:
    episode: int
    t: int
    cell: Cell
    next_cell: Cell
    subgoal: Cell
    reselected: bool
    r_ext: float
    r_high: float
    r_low: float


def _candidates(env: GridEnv, graph: StateGraph, current: Cell) -> list[Cell]:
    """Stored cells plus the task goal, without the cell the agent stands on."""
    cells = {env.goal}
    if graph.features is not None:
        for node in np.flatnonzero(graph.occupied):
            cells.add(cell_of(env, graph.features[node]))
    cells.discard(current)
    return sorted(cells)


def run_experiment(
    env: GridEnv,
    shaping: ShapingConfig,
    variant: Variant | str,
    episodes: int,
    seed: int,
    *,
    graph_settings: GraphSettings | None = None,
    train_config: TrainConfig | None = None,
    agent_config: AgentConfig | None = None,
    trace: list[StepRecord] | None = None,
) -> MetricsTable:
    """Train a fresh agent for `episodes` episodes; deterministic given `seed`."""
    if episodes < 1:
        raise ValidationError(f"episodes must be >= 1, got {episodes}")
    env.validate()
    variant = Variant(variant)
    graph_settings = graph_settings or GraphSettings()
    train_config = train_config or TrainConfig()
    agent_config = agent_config or AgentConfig()
    alpha_h, alpha_l = shaping.masked(variant)

    rng = np.random.default_rng(seed)
    graph = create_graph(
        graph_settings.capacity,
        graph_settings.epsilon_d,
        graph_settings.eviction_policy,
        graph_settings.t_c,
    )
    params = init_params(
        default_layer_dims(2, graph_settings.embedding_dim, graph_settings.hidden), rng
    )
    agent = HierAgent(agent_config)
    table = MetricsTable()
    phases = 0

    def feed_graph(prev_node: int | None, cell: Cell) -> int | None:
        nonlocal params, phases
        try:
            outcome = observe_transition(graph, prev_node, phi(env, cell))
        except StaleNodeError:
            outcome = observe_transition(graph, None, phi(env, cell))
        node = prev_node if outcome.kind is OutcomeKind.SKIPPED_BY_INTERVAL else outcome.node_id
        if graph.num_occupied >= 2 and should_train_and_reset(graph, shaping.beta):
            params = train_phase(params, graph, train_config, rng)
            phases += 1
        return node

    for episode in range(episodes):
        started = time.perf_counter()
        eps = agent.epsilon(episode, episodes)
        cell = env.start
        prev_node = feed_graph(None, cell)
        success = int(cell == env.goal)
        ret = 0.0
        steps = 0
        subgoal = env.goal
        window_start, window_reward, window_len = cell, 0.0, 0
        candidates = _candidates(env, graph, cell)

        while not success and steps < agent_config.max_steps:
            reselect = steps % shaping.K == 0
            if reselect:
                candidates = _candidates(env, graph, cell)
                if steps > 0:
                    agent.update_high(
                        window_start, subgoal, window_reward, window_len, cell, candidates, False
                    )
                subgoal = agent.select_subgoal(cell, candidates, eps, rng, prefer=env.goal)
                window_start, window_reward, window_len = cell, 0.0, 0

            action = agent.select_action(cell, subgoal, eps, rng)
            next_cell, r_ext, done = env.step(cell, action)
            graph.tick()
            prev_node = feed_graph(prev_node, next_cell)

            phi_goal = phi(env, subgoal)
            r_high = high_level_reward(r_ext, phi(env, cell), phi_goal, params, alpha_h)
            r_low = low_level_reward(phi(env, next_cell), phi_goal, params, alpha_l)
            agent.update_low(cell, subgoal, action, r_low, next_cell, done or next_cell == subgoal)
            window_reward += r_high
            window_len += 1

            if trace is not None:
                trace.append(
                    StepRecord(episode, steps, cell, next_cell, subgoal, reselect, r_ext, r_high, r_low)
                )
            ret += r_ext
            steps += 1
            cell = next_cell
            if done:
                success = 1

        if window_len:
            if not success:
                candidates = _candidates(env, graph, cell)
            agent.update_high(
                window_start, subgoal, window_reward, window_len, cell, candidates, bool(success)
            )
        table.rows.append(
            EpisodeMetrics(episode, success, ret, steps, (time.perf_counter() - started) * 1000.0)
        )

    logger.info(
        "variant=%s seed=%d: %d training phases, final success %.2f",
        variant.value,
        seed,
        phases,
        table.final_success(),
    )
    return table


def compare_variants(
    tables_a: Sequence[MetricsTable], tables_b: Sequence[MetricsTable], *, window: int = 50
) -> dict[str, float]:
    """Seed-aligned comparison of two variants: final success, AUC win rate, sign test."""
    if len(tables_a) != len(tables_b) or not tables_a:
        raise ValidationError("both variants need the same, non-zero number of seeds")
    final_a = float(np.mean([t.final_success(window) for t in tables_a]))
    final_b = float(np.mean([t.final_success(window) for t in tables_b]))
    auc_diff = np.array([a.auc() - b.auc() for a, b in zip(tables_a, tables_b)])
    wins = int(np.sum(auc_diff > 0))
    losses = int(np.sum(auc_diff < 0))
    p_value = binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue if wins + losses else 1.0
    return {
        "final_success_a": final_a,
        "final_success_b": final_b,
        "auc_win_fraction": wins / len(tables_a),
        "sign_test_p": float(p_value),
    }
