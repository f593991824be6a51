"""Deterministic grid mazes for the desk-scale shaping experiments.

Map files are plain text, one row per line:

    #  wall          .  free cell
    S  start         G  goal
    >  <  ^  v       one-way door: the cell can only be entered moving in the arrow direction

Cells are `(x, y)` with `x` the column and `y` the row, both from the top-left corner.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from errors import InvalidEnv

Cell = tuple[int, int]

# up, down, left, right
ACTIONS: tuple[Cell, ...] = ((0, -1), (0, 1), (-1, 0), (1, 0))
DOOR_DIRECTIONS: dict[str, Cell] = {"^": (0, -1), "v": (0, 1), "<": (-1, 0), ">": (1, 0)}


class RewardMode(str, Enum):
    DENSE = "dense"
    SPARSE = "sparse"


@dataclass(frozen=True)
class GridEnv:
    width: int
    height: int
    walls: frozenset[Cell]
    start: Cell
    goal: Cell
    reward_mode: RewardMode = RewardMode.SPARSE
    # allowed (from, to) moves into door cells; any other move into a door cell is blocked
    one_way_doors: frozenset[tuple[Cell, Cell]] = frozenset()
    # displacement of each action index
    actions: tuple[Cell, ...] = ACTIONS

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise InvalidEnv(f"grid must be at least 1x1, got {self.width}x{self.height}")
        for name, cell in (("start", self.start), ("goal", self.goal)):
            if not self.in_bounds(cell):
                raise InvalidEnv(f"{name} {cell} lies outside the grid")
            if cell in self.walls:
                raise InvalidEnv(f"{name} {cell} is a wall")

    @property
    def door_cells(self) -> frozenset[Cell]:
        return frozenset(to for _, to in self.one_way_doors)

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def free_cells(self) -> list[Cell]:
        return [
            (x, y) for y in range(self.height) for x in range(self.width) if (x, y) not in self.walls
        ]

    def move(self, cell: Cell, action: int) -> Cell:
        dx, dy = self.actions[action]
        target = (cell[0] + dx, cell[1] + dy)
        if not self.in_bounds(target) or target in self.walls:
            return cell
        if target in self.door_cells and (cell, target) not in self.one_way_doors:
            return cell
        return target

    def step(self, cell: Cell, action: int) -> tuple[Cell, float, bool]:
        """Return (next_cell, extrinsic_reward, done)."""
        nxt = self.move(cell, action)
        done = nxt == self.goal
        if self.reward_mode is RewardMode.SPARSE:
            return nxt, (1.0 if done else 0.0), done
        return nxt, (0.0 if done else -float(np.linalg.norm(phi(self, nxt) - phi(self, self.goal)))), done

    def reachable(self) -> set[Cell]:
        """Flood fill from the start cell along permitted moves."""
        seen = {self.start}
        queue = deque([self.start])
        while queue:
            cell = queue.popleft()
            for action in range(len(self.actions)):
                nxt = self.move(cell, action)
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        return seen

    def validate(self) -> None:
        if self.goal not in self.reachable():
            raise InvalidEnv(f"goal {self.goal} is unreachable from start {self.start}")

    def transposed(self) -> GridEnv:
        """Same maze with x and y swapped, action directions included.

        Action k here moves along the mirror image of action k in `self`, so a run
        driven by the same random stream is the mirror image of the original run.
        """
        def swap(cell: Cell) -> Cell:
            return (cell[1], cell[0])

        return GridEnv(
            width=self.height,
            height=self.width,
            walls=frozenset(swap(c) for c in self.walls),
            start=swap(self.start),
            goal=swap(self.goal),
            reward_mode=self.reward_mode,
            one_way_doors=frozenset((swap(a), swap(b)) for a, b in self.one_way_doors),
            actions=tuple(swap(a) for a in self.actions),
        )

    @classmethod
    def from_map_text(cls, text: str, reward_mode: RewardMode | str = RewardMode.SPARSE) -> GridEnv:
        rows = [line.rstrip("\n") for line in text.splitlines() if line.strip()]
        if not rows:
            raise InvalidEnv("empty map")
        width = max(len(r) for r in rows)
        walls: set[Cell] = set()
        doors: set[tuple[Cell, Cell]] = set()
        start: Cell | None = None
        goal: Cell | None = None
        for y, row in enumerate(rows):
            for x in range(width):
                ch = row[x] if x < len(row) else "#"
                if ch == "#":
                    walls.add((x, y))
                elif ch == "S":
                    if start is not None:
                        raise InvalidEnv(f"second S at ({x}, {y}); map needs exactly one S and one G")
                    start = (x, y)
                elif ch == "G":
                    if goal is not None:
                        raise InvalidEnv(f"second G at ({x}, {y}); map needs exactly one S and one G")
                    goal = (x, y)
                elif ch in DOOR_DIRECTIONS:
                    dx, dy = DOOR_DIRECTIONS[ch]
                    doors.add(((x - dx, y - dy), (x, y)))
                elif ch not in ". ":
                    raise InvalidEnv(f"unknown map character {ch!r} at ({x}, {y})")
        if start is None or goal is None:
            raise InvalidEnv("map needs exactly one S and one G")
        return cls(
            width=width,
            height=len(rows),
            walls=frozenset(walls),
            start=start,
            goal=goal,
            reward_mode=RewardMode(reward_mode),
            one_way_doors=frozenset(doors),
        )


def load_map(path: Path, reward_mode: RewardMode | str = RewardMode.SPARSE) -> GridEnv:
    return GridEnv.from_map_text(path.read_text(encoding="utf-8"), reward_mode)


def phi(env: GridEnv, cell: Cell) -> np.ndarray:
    """State representation: (x, y) scaled into [0, 1]."""
    sx = env.width - 1 if env.width > 1 else 1
    sy = env.height - 1 if env.height > 1 else 1
    return np.array([cell[0] / sx, cell[1] / sy], dtype=np.float64)


def cell_of(env: GridEnv, feature: np.ndarray) -> Cell:
    """Inverse of `phi`, rounding to the nearest in-bounds cell."""
    sx = env.width - 1 if env.width > 1 else 1
    sy = env.height - 1 if env.height > 1 else 1
    x = int(np.clip(round(float(feature[0]) * sx), 0, env.width - 1))
    y = int(np.clip(round(float(feature[1]) * sy), 0, env.height - 1))
    return (x, y)
