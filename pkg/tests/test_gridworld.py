from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from errors import InvalidEnv
from gridworld import GridEnv, RewardMode, cell_of, load_map, phi

DATA = Path(__file__).resolve().parents[1] / "data"

RIGHT, LEFT, DOWN = 3, 2, 1


def test_parse_map():
    env = GridEnv.from_map_text("S.#\n..G\n")
    assert (env.width, env.height) == (3, 2)
    assert env.walls == frozenset({(2, 0)})
    assert env.start == (0, 0) and env.goal == (2, 1)


def test_short_rows_are_padded_with_walls():
    env = GridEnv.from_map_text("S..\n.G\n")
    assert (2, 1) in env.walls


def test_walls_and_bounds_block_moves():
    env = GridEnv.from_map_text("S#\n.G\n")
    assert env.move((0, 0), RIGHT) == (0, 0)
    assert env.move((0, 0), LEFT) == (0, 0)
    assert env.move((0, 0), DOWN) == (0, 1)


def test_sparse_and_dense_rewards():
    sparse = GridEnv.from_map_text("S.G\n")
    assert sparse.step((0, 0), RIGHT) == ((1, 0), 0.0, False)
    assert sparse.step((1, 0), RIGHT) == ((2, 0), 1.0, True)

    dense = GridEnv.from_map_text("S.G\n", RewardMode.DENSE)
    nxt, r, done = dense.step((0, 0), RIGHT)
    assert nxt == (1, 0) and not done
    assert r == pytest.approx(-0.5)
    assert dense.step((1, 0), RIGHT) == ((2, 0), 0.0, True)


def test_one_way_door():
    env = GridEnv.from_map_text("S>G\n")
    assert env.move((0, 0), RIGHT) == (1, 0)
    assert env.move((2, 0), LEFT) == (2, 0)
    # leaving a door cell is unrestricted
    assert env.move((1, 0), LEFT) == (0, 0)
    env.validate()


def test_unreachable_goal_is_rejected():
    with pytest.raises(InvalidEnv):
        GridEnv.from_map_text("S#G\n").validate()
    with pytest.raises(InvalidEnv):
        GridEnv.from_map_text("S<G\n").validate()


@pytest.mark.parametrize(
    "text",
    ["S.\n..\n", "#G\n..\n", "SXG\n", "", "S.S\n..G\n", "S.G\n..G\n"],
)
def test_malformed_maps(text):
    with pytest.raises(InvalidEnv):
        GridEnv.from_map_text(text)


def test_start_on_wall_is_rejected():
    with pytest.raises(InvalidEnv):
        GridEnv(3, 3, frozenset({(0, 0)}), (0, 0), (2, 2))


def test_phi_and_cell_of_are_inverse():
    env = load_map(DATA / "four_rooms.map")
    for cell in env.free_cells():
        assert cell_of(env, phi(env, cell)) == cell
    np.testing.assert_array_equal(phi(env, (8, 8)), [1.0, 1.0])


def test_transposed_maze_is_isomorphic():
    env = load_map(DATA / "corridors.map")
    t = env.transposed()
    assert (t.width, t.height) == (env.height, env.width)
    assert t.start == env.start[::-1] and t.goal == env.goal[::-1]
    assert len(t.reachable()) == len(env.reachable())
    for cell in env.free_cells():
        for action in range(4):
            # the same action index moves along the mirrored direction
            assert t.move(cell[::-1], action) == env.move(cell, action)[::-1]


def test_transposed_run_mirrors_the_original():
    env = load_map(DATA / "pillars.map", RewardMode.DENSE)
    t = env.transposed()
    actions = np.random.default_rng(0).integers(4, size=200)
    cell, mirrored = env.start, t.start
    for action in actions:
        cell, r, done = env.step(cell, int(action))
        mirrored, r_t, done_t = t.step(mirrored, int(action))
        assert mirrored == cell[::-1]
        assert r_t == pytest.approx(r) and done_t == done
        if done:
            break


@pytest.mark.parametrize("name", ["four_rooms.map", "pillars.map", "corridors.map"])
def test_shipped_maps_are_solvable(name):
    env = load_map(DATA / name)
    env.validate()
    assert env.reachable() == set(env.free_cells())
