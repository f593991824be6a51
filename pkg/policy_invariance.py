"""Numerical check that dense Shapley credit leaves optimal policies unchanged.

A `TerminalRewardMDP` pays its reward only after the last step. Each complete
trajectory is treated as a coalition game over its steps; the credits of that
game, mixed with the terminal reward by `alpha`, give the per-step rewards.
Because the rewards depend on the whole trajectory, optimal actions are computed
by exhaustive expectimax over the history tree, maximising the expected
trajectory return.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from errors import InvalidMDP
from shapley_credit import CoalitionGame, check_alpha, exact_shapley

logger = logging.getLogger(__name__)

MAX_STATE_ACTIONS = 10_000

History = tuple[int, ...]  # s0, a0, s1, a1, ..., s_t
# (states, actions, terminal_reward) -> per-step credits, one per action taken
Decomposition = Callable[[tuple[int, ...], tuple[int, ...], float], np.ndarray]


@dataclass(frozen=True)
class TerminalRewardMDP:
    transitions: np.ndarray  # (S, A, S), rows sum to 1
    terminal_rewards: np.ndarray  # (S,), paid on the final state
    horizon: int | None
    start_state: int = 0

    def __post_init__(self) -> None:
        if self.horizon is None:
            raise InvalidMDP("undiscounted value iteration needs a finite horizon")
        if self.horizon < 1:
            raise InvalidMDP(f"horizon must be >= 1, got {self.horizon}")
        p = np.asarray(self.transitions, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise InvalidMDP(f"transitions must have shape (S, A, S), got {p.shape}")
        if np.any(p < 0) or not np.allclose(p.sum(axis=2), 1.0):
            raise InvalidMDP("every transition row must be a probability distribution")
        if np.shape(self.terminal_rewards) != (p.shape[0],):
            raise InvalidMDP(f"terminal_rewards must have length {p.shape[0]}")
        if not 0 <= self.start_state < p.shape[0]:
            raise InvalidMDP(f"start_state {self.start_state} out of range")

    @property
    def n_states(self) -> int:
        return int(self.transitions.shape[0])

    @property
    def n_actions(self) -> int:
        return int(self.transitions.shape[1])

    def successors(self, state: int, action: int) -> list[tuple[int, float]]:
        row = self.transitions[state, action]
        return [(int(s), float(row[s])) for s in np.flatnonzero(row > 0)]

    def state_action_count(self) -> int:
        """Number of (history, action) pairs the expectimax visits."""
        frontier = {self.start_state: 1}
        total = 0
        for _ in range(self.horizon or 0):
            total += sum(frontier.values()) * self.n_actions
            nxt: dict[int, int] = {}
            for s, count in frontier.items():
                for a in range(self.n_actions):
                    for s2, _ in self.successors(s, a):
                        nxt[s2] = nxt.get(s2, 0) + count
            frontier = nxt
            if total > MAX_STATE_ACTIONS:
                break
        return total


def chain_mdp(n_states: int = 5) -> TerminalRewardMDP:
    """Deterministic chain: action 0 moves left, action 1 right; reward 1 on the last state."""
    p = np.zeros((n_states, 2, n_states))
    for s in range(n_states):
        p[s, 0, max(s - 1, 0)] = 1.0
        p[s, 1, min(s + 1, n_states - 1)] = 1.0
    rewards = np.zeros(n_states)
    rewards[-1] = 1.0
    return TerminalRewardMDP(p, rewards, horizon=n_states - 1)


def random_terminal_mdp(
    n_states: int = 6,
    n_actions: int = 2,
    horizon: int = 3,
    branching: int = 2,
    seed: int = 0,
) -> TerminalRewardMDP:
    rng = np.random.default_rng(seed)
    p = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            succ = rng.choice(n_states, size=min(branching, n_states), replace=False)
            p[s, a, succ] = rng.dirichlet(np.ones(succ.size))
    rewards = rng.uniform(-1.0, 1.0, n_states)
    return TerminalRewardMDP(p, rewards, horizon=horizon)


def shapley_decomposition(
    states: tuple[int, ...], actions: tuple[int, ...], terminal_reward: float
) -> np.ndarray:
    """Exact Shapley credits of a non-additive game over the steps of one trajectory.

    v(S) = r * f(S) / f(all steps) with f(S) = (sum of step weights in S)^2; step
    weights are drawn from a generator seeded by the trajectory itself.
    """
    n = len(actions)
    w = np.random.default_rng([*states, *actions, 7919]).uniform(0.5, 1.5, n)
    full = float(w.sum()) ** 2

    def oracle(mask: int) -> float:
        total = sum(w[i] for i in range(n) if mask >> i & 1)
        return terminal_reward * total**2 / full

    return exact_shapley(CoalitionGame(n, oracle)).values


def broken_decomposition(offset: float = 2.0) -> Decomposition:
    """Shapley credits plus `offset * action` per step: breaks efficiency on purpose."""

    def decompose(states: tuple[int, ...], actions: tuple[int, ...], terminal_reward: float) -> np.ndarray:
        return shapley_decomposition(states, actions, terminal_reward) + offset * np.asarray(actions)

    return decompose


def trajectory_return(
    mdp: TerminalRewardMDP,
    history: History,
    decomposition: Decomposition,
    alpha: float,
) -> float:
    states = history[0::2]
    actions = history[1::2]
    r = float(mdp.terminal_rewards[states[-1]])
    if alpha == 0.0:
        return r
    credits = np.asarray(decomposition(states, actions, r), dtype=np.float64)
    return alpha * float(credits.sum()) + (1.0 - alpha) * r


def optimal_action_sets(
    mdp: TerminalRewardMDP,
    decomposition: Decomposition,
    alpha: float,
    *,
    tol: float = 1e-9,
) -> dict[History, frozenset[int]]:
    """Greedy action set of every reachable non-terminal history."""
    check_alpha(alpha)
    visits = mdp.state_action_count()
    if visits > MAX_STATE_ACTIONS:
        raise InvalidMDP(f"history tree has {visits} state-action pairs, limit is {MAX_STATE_ACTIONS}")
    horizon = int(mdp.horizon or 0)
    best: dict[History, frozenset[int]] = {}

    def value(history: History) -> float:
        if len(history) // 2 == horizon:
            return trajectory_return(mdp, history, decomposition, alpha)
        state = history[-1]
        q = np.array([
            sum(p * value((*history, a, s2)) for s2, p in mdp.successors(state, a))
            for a in range(mdp.n_actions)
        ])
        top = float(q.max())
        best[history] = frozenset(int(a) for a in np.flatnonzero(q >= top - tol * max(1.0, abs(top))))
        return top

    value((mdp.start_state,))
    return best


def verify_policy_invariance(
    mdp: TerminalRewardMDP,
    alphas: Sequence[float],
    decomposition: Decomposition = shapley_decomposition,
    *,
    tol: float = 1e-9,
) -> bool:
    """True iff the optimal action sets under every alpha equal those of the sparse reward."""
    reference = optimal_action_sets(mdp, decomposition, 0.0, tol=tol)
    for alpha in alphas:
        sets = optimal_action_sets(mdp, decomposition, alpha, tol=tol)
        if sets != reference:
            differing = sum(1 for h in reference if sets.get(h) != reference[h])
            logger.info("alpha=%s changes the optimal actions of %d histories", alpha, differing)
            return False
    return True
