from __future__ import annotations

import numpy as np
import pytest

from errors import InvalidAlpha, InvalidMDP
from policy_invariance import (
    TerminalRewardMDP,
    broken_decomposition,
    chain_mdp,
    optimal_action_sets,
    random_terminal_mdp,
    shapley_decomposition,
    trajectory_return,
    verify_policy_invariance,
)


def test_chain_policy_is_invariant():
    assert verify_policy_invariance(chain_mdp(5), [0.0, 0.25, 0.5, 0.75, 1.0])


def test_chain_optimal_start_action_is_right():
    sets = optimal_action_sets(chain_mdp(5), shapley_decomposition, 0.5)
    assert sets[(0,)] == frozenset({1})
    # after one step left the goal is out of reach and every action ties
    assert sets[(0, 0, 0)] == frozenset({0, 1})


def test_zero_alpha_compares_equal_to_itself():
    mdp = chain_mdp(4)
    assert optimal_action_sets(mdp, shapley_decomposition, 0.0) == optimal_action_sets(
        mdp, broken_decomposition(), 0.0
    )


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_random_mdps_are_invariant(seed):
    mdp = random_terminal_mdp(n_states=5, n_actions=2, horizon=3, branching=2, seed=seed)
    assert verify_policy_invariance(mdp, [0.3, 0.7, 1.0])


def test_broken_decomposition_changes_the_policy():
    assert not verify_policy_invariance(chain_mdp(5), [0.5], broken_decomposition(2.0))


def test_shapley_decomposition_sums_to_terminal_reward():
    credits = shapley_decomposition((0, 1, 2, 3), (1, 1, 0), 0.8)
    assert credits.shape == (3,)
    assert credits.sum() == pytest.approx(0.8)


def test_trajectory_return_mixes_with_alpha():
    mdp = chain_mdp(3)
    history = (0, 1, 1, 1, 2)
    assert trajectory_return(mdp, history, shapley_decomposition, 0.0) == 1.0
    assert trajectory_return(mdp, history, shapley_decomposition, 0.6) == pytest.approx(1.0)
    assert trajectory_return(mdp, history, broken_decomposition(1.0), 1.0) == pytest.approx(3.0)


def test_invalid_mdps():
    p = np.zeros((2, 1, 2))
    p[:, 0, 0] = 1.0
    with pytest.raises(InvalidMDP):
        TerminalRewardMDP(p, np.zeros(2), horizon=None)
    with pytest.raises(InvalidMDP):
        TerminalRewardMDP(p * 0.5, np.zeros(2), horizon=2)
    with pytest.raises(InvalidMDP):
        TerminalRewardMDP(p, np.zeros(3), horizon=2)


def test_history_tree_size_is_capped():
    with pytest.raises(InvalidMDP):
        optimal_action_sets(
            random_terminal_mdp(n_states=8, n_actions=4, horizon=8, branching=3, seed=0),
            shapley_decomposition,
            0.5,
        )


def test_alpha_outside_unit_interval():
    with pytest.raises(InvalidAlpha):
        optimal_action_sets(chain_mdp(3), shapley_decomposition, 1.5)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(20))
def test_six_state_mdps_are_invariant_at_acceptance_alphas(seed):
    mdp = random_terminal_mdp(n_states=6, n_actions=2, horizon=3, branching=2, seed=100 + seed)
    assert verify_policy_invariance(mdp, [0.0, 0.25, 0.5, 1.0])
