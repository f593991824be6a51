from __future__ import annotations

import csv

import numpy as np
import pytest

from errors import (
    BoundaryError,
    DimensionError,
    EmptySequence,
    InvalidAlpha,
    InvalidPartition,
    InvalidTree,
    MissingEvaluation,
    TooManyPlayers,
    ValidationError,
)
from shapley_credit import (
    CoalitionGame,
    CoalitionStructure,
    CreditVector,
    RewardTrace,
    Segmentation,
    balanced_tree,
    dump_game,
    exact_shapley,
    hierarchical_owen,
    kl_penalty,
    load_game,
    owen_value,
    place_rewards,
    render_coalition,
    segment,
    sentence_partition,
    total_reward,
    uniform_credit,
    units_from_tokens,
    write_credit_csv,
)


def _bits(mask: int) -> int:
    return bin(mask).count("1")


def _additive(weights, baseline=0.0) -> CoalitionGame:
    def oracle(mask: int) -> float:
        return baseline + sum(w for i, w in enumerate(weights) if mask >> i & 1)

    return CoalitionGame(len(weights), oracle)


def _random_game(n: int, seed: int) -> CoalitionGame:
    table = np.random.default_rng(seed).normal(size=1 << n)
    return CoalitionGame(n, lambda mask: float(table[mask]))


def _all_methods(game: CoalitionGame, structure: CoalitionStructure):
    return {
        "exact": exact_shapley(game).values,
        "owen": owen_value(game, structure).values,
        "hierarchical": hierarchical_owen(game, structure).values,
    }


def test_two_player_example():
    table = {0: 0.0, 1: 1.0, 2: 2.0, 3: 4.0}
    game = CoalitionGame(2, table.__getitem__)
    np.testing.assert_allclose(exact_shapley(game).values, [1.5, 2.5])
    np.testing.assert_allclose(hierarchical_owen(game, CoalitionStructure.singletons(2)).values, [1.5, 2.5])


def test_empty_coalition_is_worth_zero():
    game = _additive([1.0, 2.0], baseline=5.0)
    assert game.value(0) == 0.0
    assert game.value(game.grand) == pytest.approx(3.0)
    assert game.baseline == 5.0


def test_additive_game_returns_weights():
    weights = [0.5, -1.0, 2.0, 0.25, 3.0]
    game = _additive(weights, baseline=1.0)
    structure = CoalitionStructure(((0, 1), (2,), (3, 4)))
    for name, credits in _all_methods(game, structure).items():
        np.testing.assert_allclose(credits, weights, atol=1e-12, err_msg=name)


def test_null_player_gets_nothing():
    def oracle(mask: int) -> float:
        return float((mask & 1) * (mask >> 1 & 1)) * 3.0 + (mask & 1)

    game = CoalitionGame(3, oracle)
    structure = CoalitionStructure(((0, 2), (1,)))
    for name, credits in _all_methods(game, structure).items():
        assert credits[2] == pytest.approx(0.0, abs=1e-12), name


def test_symmetric_players_share_equally():
    game = CoalitionGame(4, lambda mask: float(_bits(mask)) ** 2)
    structure = CoalitionStructure(((0, 1), (2, 3)))
    for name, credits in _all_methods(game, structure).items():
        np.testing.assert_allclose(credits, np.full(4, 4.0), err_msg=name)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_efficiency(seed):
    game = _random_game(5, seed)
    structure = CoalitionStructure(((0, 3), (1, 2, 4)))
    for name, credits in _all_methods(game, structure).items():
        assert credits.sum() == pytest.approx(game.value(game.grand), abs=1e-10), name


def test_linearity():
    a, b = _random_game(4, 10), _random_game(4, 11)
    combined = CoalitionGame(4, lambda mask: a.raw(mask) + 2.0 * b.raw(mask))
    np.testing.assert_allclose(
        exact_shapley(combined).values,
        exact_shapley(a).values + 2.0 * exact_shapley(b).values,
        atol=1e-12,
    )


def test_owen_reduces_to_shapley_for_trivial_partitions():
    game = _random_game(5, 3)
    exact = exact_shapley(game).values
    np.testing.assert_allclose(owen_value(game, CoalitionStructure.singletons(5)).values, exact, atol=1e-12)
    grand = CoalitionStructure((tuple(range(5)),))
    np.testing.assert_allclose(owen_value(game, grand).values, exact, atol=1e-12)


def test_hierarchical_call_budget_on_balanced_tree():
    n = 32
    weights = np.linspace(-1.0, 1.0, n)
    game = _additive(weights)
    structure = CoalitionStructure(CoalitionStructure.singletons(n).unions, balanced_tree(range(n)))
    credits = hierarchical_owen(game, structure)
    assert game.evaluations <= 4 * n * n
    np.testing.assert_allclose(credits.values, weights, atol=1e-9)


def test_exact_shapley_is_capped_before_any_oracle_call():
    game = _additive([1.0] * 21)
    with pytest.raises(TooManyPlayers):
        exact_shapley(game)
    assert game.evaluations == 0


def test_oracle_results_are_memoised():
    calls = []

    def oracle(mask: int) -> float:
        calls.append(mask)
        return float(_bits(mask))

    game = CoalitionGame(4, oracle)
    first = exact_shapley(game).values
    second = exact_shapley(game).values
    np.testing.assert_array_equal(first, second)
    assert sorted(calls) == list(range(16))
    assert game.evaluations == 16


def test_parallel_prefetch_matches_serial():
    serial = _random_game(6, 5)
    parallel = _random_game(6, 5)
    np.testing.assert_array_equal(
        exact_shapley(serial).values, exact_shapley(parallel, max_workers=4).values
    )
    assert parallel.evaluations == 1 << 6


def test_uniform_credit():
    game = _additive([1.0, 2.0, 3.0])
    np.testing.assert_allclose(uniform_credit(game).values, [2.0, 2.0, 2.0])


def test_invalid_structures():
    with pytest.raises(InvalidPartition):
        owen_value(_additive([1.0, 1.0]), CoalitionStructure(((0,), (0, 1))))
    with pytest.raises(InvalidPartition):
        owen_value(_additive([1.0, 1.0]), CoalitionStructure(((0,), ())))
    with pytest.raises(InvalidTree):
        hierarchical_owen(_additive([1.0, 1.0]), CoalitionStructure(((0,), (1,)), (0, (0, 1))))


def test_segment_tokens_and_sentences():
    tokens = ["a", "b", ".", "c", "d", "?"]
    units, structure = segment(tokens, Segmentation.TOKEN)
    assert len(units) == 6 and units[4].start_t == units[4].end_t == 5
    assert structure.unions == tuple((i,) for i in range(6))

    units, _ = segment(tokens, "sentence")
    assert [(u.start_t, u.end_t) for u in units] == [(1, 3), (4, 6)]
    assert units[1].tokens == ("c", "d", "?")

    units, _ = segment(["a", ".", "b"], Segmentation.SENTENCE)
    assert [u.tokens for u in units] == [("a", "."), ("b",)]


def test_segment_spans():
    _, structure = segment(["w", "x", "y", "z"], Segmentation.SPAN, tree=[[0, 1], [2, 3]])
    assert structure.hierarchy == ((0, 1), (2, 3))
    _, balanced = segment(["w", "x", "y"], Segmentation.SPAN)
    assert balanced.hierarchy == ((0, 1), 2)
    with pytest.raises(InvalidTree):
        segment(["w", "x"], Segmentation.SPAN, tree=[0, 0])
    with pytest.raises(EmptySequence):
        segment([], Segmentation.TOKEN)


def test_sentence_partition():
    structure = sentence_partition(["a", "b", ".", "c", "!"])
    assert structure.unions == ((0, 1, 2), (3, 4))
    structure.validate(5)


def test_render_coalition():
    units = units_from_tokens([["the", "cat"], ["sat"], ["down", "."]])
    assert render_coalition(units, 0b101, "_") == ["the", "cat", "_", "down", "."]
    assert render_coalition(units, [1], "_") == ["_", "_", "sat", "_", "_"]


def test_place_rewards():
    trace = RewardTrace(7, (3, 7), np.zeros(7), terminal_reward=1.0, alpha=0.5)
    out = place_rewards(CreditVector(np.array([0.5, -0.2])), trace)
    np.testing.assert_array_equal(out, [0.0, 0.0, 0.5, 0.0, 0.0, 0.0, -0.2])
    with pytest.raises(BoundaryError):
        place_rewards(CreditVector(np.array([1.0])), trace)


@pytest.mark.parametrize(
    "T, ends",
    [(7, (3, 6)), (7, (4, 3, 7)), (7, ()), (0, (0,))],
)
def test_reward_trace_rejects_bad_boundaries(T, ends):
    with pytest.raises(BoundaryError):
        RewardTrace(T, ends, np.zeros(max(T, 0)), terminal_reward=0.0, alpha=0.5)


def test_reward_trace_checks_alpha_and_kl_length():
    with pytest.raises(InvalidAlpha):
        RewardTrace(2, (2,), np.zeros(2), terminal_reward=0.0, alpha=1.5)
    with pytest.raises(DimensionError):
        RewardTrace(2, (2,), np.zeros(3), terminal_reward=0.0, alpha=0.5)


@pytest.mark.parametrize("alpha", [0.0, 0.3, 1.0])
def test_total_reward_preserves_episode_return(alpha):
    units = units_from_tokens([["a", "b"], ["c"], ["d", "e", "f"]])
    game = CoalitionGame.from_scorer(
        units, lambda toks: 2.0 + sum(len(t) for t in toks if t != "<pad>") * 0.1 + ("c" in toks)
    )
    kl = np.linspace(-0.1, 0.1, 6)
    trace = RewardTrace.for_game(game, alpha, kl_terms=kl)
    credits = exact_shapley(game)
    rewards = total_reward(trace, place_rewards(credits, trace))
    assert rewards.shape == (6,)
    assert rewards.sum() == pytest.approx(kl.sum() + game.raw(game.grand))
    if alpha == 0.0:
        np.testing.assert_allclose(rewards[:-1], kl[:-1])


def test_kl_penalty():
    np.testing.assert_allclose(kl_penalty([-1.0, -2.0], [-1.5, -1.7], 0.1), [-0.05, 0.03])
    with pytest.raises(DimensionError):
        kl_penalty([0.0], [0.0, 0.0], 0.1)


def test_game_dump_round_trip(tmp_path):
    units = units_from_tokens([["good"], ["story"], ["."]])
    scores = {"good": 1.0, "story": 0.5}
    game = CoalitionGame.from_scorer(units, lambda toks: sum(scores.get(t, 0.0) for t in toks))
    expected = exact_shapley(game).values

    path = tmp_path / "game.json"
    dump_game(game, path)
    replayed = load_game(path)
    assert [u.tokens for u in replayed.units] == [("good",), ("story",), (".",)]
    np.testing.assert_array_equal(exact_shapley(replayed).values, expected)


def test_replay_of_partial_dump_reports_missing_coalitions(tmp_path):
    game = _additive_units_game()
    uniform_credit(game)
    path = tmp_path / "partial.json"
    dump_game(game, path)
    with pytest.raises(MissingEvaluation):
        exact_shapley(load_game(path))


def _additive_units_game() -> CoalitionGame:
    units = units_from_tokens([["x"], ["y"]])
    return CoalitionGame.from_scorer(units, lambda toks: float(toks.count("x")))


def test_credit_csv(tmp_path):
    units = units_from_tokens([["a", "b"], ["c"]])
    path = tmp_path / "credit.csv"
    write_credit_csv(path, units, CreditVector(np.array([0.25, -1.0])))
    with path.open(encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows == [
        ["unit_index", "start_t", "end_t", "credit"],
        ["0", "1", "2", "0.25"],
        ["1", "3", "3", "-1.0"],
    ]


def test_random_games_satisfy_efficiency_and_owen_consistency():
    rng = np.random.default_rng(123)
    for _ in range(40):
        n = int(rng.integers(1, 7))
        game = _random_game(n, int(rng.integers(1 << 30)))
        exact = exact_shapley(game).values
        assert abs(exact.sum() - game.value(game.grand)) < 1e-9
        singles = owen_value(game, CoalitionStructure.singletons(n)).values
        grand = owen_value(game, CoalitionStructure((tuple(range(n)),))).values
        np.testing.assert_allclose(singles, exact, atol=1e-9)
        np.testing.assert_allclose(grand, exact, atol=1e-9)


def test_hierarchy_accepts_numpy_integer_leaves():
    weights = [1.0, -2.0, 0.5]
    game = _additive(weights)
    leaves = np.arange(3)
    structure = CoalitionStructure(((0,), (1, 2)), (leaves[0], (leaves[1], leaves[2])))
    np.testing.assert_allclose(hierarchical_owen(game, structure).values, weights, atol=1e-12)


def test_reward_trace_scales_log_probs_by_kl_coefficient():
    game = CoalitionGame.from_scorer(units_from_tokens([["a"], ["b"]]), lambda toks: float("a" in toks))
    trace = RewardTrace.for_game(game, 0.5, kl_coefficient=0.1, log_probs=([-1.0, -2.0], [-1.5, -1.7]))
    assert trace.kl_coefficient == 0.1
    np.testing.assert_allclose(trace.kl_terms, [-0.05, 0.03])
    with pytest.raises(ValidationError):
        RewardTrace.for_game(game, 0.5, kl_terms=np.zeros(2), log_probs=([0.0, 0.0], [0.0, 0.0]))


def _swap_first_two(mask: int) -> int:
    return (mask & ~3) | (mask & 1) << 1 | (mask >> 1 & 1)


@pytest.mark.slow
def test_axioms_hold_on_random_games_up_to_eight_players():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        n = int(rng.integers(1, 9))
        table = rng.normal(size=1 << n)
        null_bit = 1 << (n - 1) if n >= 3 else 0

        def oracle(mask: int, table=table, null_bit=null_bit, n=n) -> float:
            mask &= ~null_bit
            return float(table[mask] + table[_swap_first_two(mask)]) if n >= 2 else float(table[mask])

        game = CoalitionGame(n, oracle)
        label = rng.integers(0, 3, size=n)
        if n >= 2:
            label[1] = label[0]
        unions = tuple(
            tuple(int(i) for i in np.flatnonzero(label == k)) for k in np.unique(label)
        )
        structure = CoalitionStructure(unions)
        for name, credits in _all_methods(game, structure).items():
            assert credits.sum() == pytest.approx(game.value(game.grand), abs=1e-9), name
            if n >= 3:
                assert credits[n - 1] == pytest.approx(0.0, abs=1e-9), name
                assert credits[0] == pytest.approx(credits[1], abs=1e-9), name


@pytest.mark.slow
def test_hierarchical_owen_at_sixty_four_players():
    n = 64
    rng = np.random.default_rng(5)
    weights = rng.normal(size=n)
    links = rng.normal(size=n - 1)

    def oracle(mask: int) -> float:
        total = sum(w for i, w in enumerate(weights) if mask >> i & 1)
        return total + sum(c for i, c in enumerate(links) if mask >> i & 3 == 3)

    game = CoalitionGame(n, oracle)
    structure = CoalitionStructure(CoalitionStructure.singletons(n).unions, balanced_tree(range(n)))
    credits = hierarchical_owen(game, structure)
    expected = weights.copy()
    expected[:-1] += links / 2
    expected[1:] += links / 2
    np.testing.assert_allclose(credits.values, expected, atol=1e-9)
    assert game.evaluations <= 4 * n * n
