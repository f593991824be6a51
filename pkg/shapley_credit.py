"""Shapley-style credit for sequence-level rewards.

A generated sequence is cut into units (tokens, sentences, or spans of a bracketing
tree). Each unit is a player in a coalition game whose value is the reward of the
sequence with every absent unit replaced by placeholder tokens, minus the reward of
the all-placeholder sequence. Credits come from exact Shapley values, Owen values
over a flat partition, or a recursive split over a hierarchy tree, and are then
placed at the timestep that completes each unit.

Coalitions are bitmasks: bit `i` set means unit `i` is present.

Game dumps are JSON: `{"units": [[token, ...], ...], "placeholder": str,
"evaluations": {"<mask>": raw_value}}`. Credit CSV: `unit_index,start_t,end_t,credit`.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, Union

import numpy as np

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

logger = logging.getLogger(__name__)

DEFAULT_PLACEHOLDER = "<pad>"
DEFAULT_DELIMITERS = (".", "!", "?")
EXACT_SHAPLEY_CAP = 20

# a hierarchy node is either a player index or a tuple of child nodes
Tree = Union[int, tuple["Tree", ...]]


class Segmentation(str, Enum):
    TOKEN = "token"
    SENTENCE = "sentence"
    SPAN = "span"


@dataclass(frozen=True)
class Unit:
    """A contiguous token span; `start_t`/`end_t` are 1-based timesteps, inclusive."""

    index: int
    start_t: int
    end_t: int
    tokens: tuple[str, ...]


def _tree_leaves(tree: Tree) -> list[int]:
    if isinstance(tree, (int, np.integer)):
        return [int(tree)]
    if not isinstance(tree, (tuple, list)) or len(tree) == 0:
        raise InvalidTree(f"hierarchy nodes must be player indices or non-empty tuples, got {tree!r}")
    leaves: list[int] = []
    for child in tree:
        leaves.extend(_tree_leaves(child))
    return leaves


def _as_tuple_tree(tree: Any) -> Tree:
    if isinstance(tree, (int, np.integer)):
        return int(tree)
    return tuple(_as_tuple_tree(child) for child in tree)


def balanced_tree(players: Sequence[int]) -> Tree:
    """Balanced binary bracketing over `players` in order."""
    if len(players) == 0:
        raise InvalidTree("cannot bracket an empty player list")
    if len(players) == 1:
        return int(players[0])
    mid = (len(players) + 1) // 2
    return (balanced_tree(players[:mid]), balanced_tree(players[mid:]))


@dataclass(frozen=True)
class CoalitionStructure:
    unions: tuple[tuple[int, ...], ...]
    hierarchy: Tree | None = None

    def validate(self, n_players: int) -> None:
        seen: list[int] = []
        for union in self.unions:
            if len(union) == 0:
                raise InvalidPartition("unions must be non-empty")
            seen.extend(union)
        if sorted(seen) != list(range(n_players)):
            raise InvalidPartition(
                f"unions must partition players 0..{n_players - 1}, got {list(self.unions)}"
            )
        if self.hierarchy is not None and sorted(_tree_leaves(self.hierarchy)) != list(range(n_players)):
            raise InvalidTree(f"hierarchy leaves must be players 0..{n_players - 1} exactly once")

    def tree(self) -> Tree:
        """The hierarchy, or a balanced tree over the unions with each union bracketed inside."""
        if self.hierarchy is not None:
            return self.hierarchy
        return balanced_tree_of([balanced_tree(u) for u in self.unions])

    @classmethod
    def singletons(cls, n_players: int) -> CoalitionStructure:
        return cls(tuple((i,) for i in range(n_players)))


def balanced_tree_of(subtrees: Sequence[Tree]) -> Tree:
    if len(subtrees) == 1:
        return subtrees[0]
    mid = (len(subtrees) + 1) // 2
    return (balanced_tree_of(subtrees[:mid]), balanced_tree_of(subtrees[mid:]))


def _split_sentences(tokens: Sequence[str], delimiters: Iterable[str]) -> list[list[int]]:
    delims = set(delimiters)
    groups: list[list[int]] = [[]]
    for i, tok in enumerate(tokens):
        groups[-1].append(i)
        if tok in delims and i != len(tokens) - 1:
            groups.append([])
    return groups


def _make_units(tokens: Sequence[str], groups: Sequence[Sequence[int]]) -> list[Unit]:
    return [
        Unit(k, g[0] + 1, g[-1] + 1, tuple(tokens[i] for i in g)) for k, g in enumerate(groups)
    ]


def segment(
    tokens: Sequence[str],
    strategy: Segmentation | str = Segmentation.TOKEN,
    *,
    delimiters: Iterable[str] = DEFAULT_DELIMITERS,
    tree: Any = None,
) -> tuple[list[Unit], CoalitionStructure]:
    if len(tokens) == 0:
        raise EmptySequence("cannot segment an empty token sequence")
    strategy = Segmentation(strategy)
    if strategy is Segmentation.SENTENCE:
        units = _make_units(tokens, _split_sentences(tokens, delimiters))
        return units, CoalitionStructure.singletons(len(units))

    units = _make_units(tokens, [[i] for i in range(len(tokens))])
    if strategy is Segmentation.TOKEN:
        return units, CoalitionStructure.singletons(len(units))

    if tree is None:
        hierarchy = balanced_tree(range(len(units)))
    else:
        try:
            hierarchy = _as_tuple_tree(tree)
        except TypeError as exc:
            raise InvalidTree(f"malformed bracketing tree: {exc}") from exc
    structure = CoalitionStructure(CoalitionStructure.singletons(len(units)).unions, hierarchy)
    structure.validate(len(units))
    return units, structure


def sentence_partition(
    tokens: Sequence[str], delimiters: Iterable[str] = DEFAULT_DELIMITERS
) -> CoalitionStructure:
    """Token players grouped into one union per sentence (one token per player)."""
    if len(tokens) == 0:
        raise EmptySequence("cannot partition an empty token sequence")
    groups = _split_sentences(tokens, delimiters)
    unions = tuple(tuple(g) for g in groups)
    return CoalitionStructure(unions, balanced_tree_of([balanced_tree(u) for u in unions]))


def render_coalition(
    units: Sequence[Unit], members: Iterable[int] | int, placeholder: str = DEFAULT_PLACEHOLDER
) -> list[str]:
    """Full-length token sequence with every unit outside `members` blanked out."""
    if isinstance(members, (int, np.integer)):
        mask = int(members)
        present = {i for i in range(len(units)) if mask >> i & 1}
    else:
        present = set(members)
    out: list[str] = []
    for unit in units:
        if unit.index in present:
            out.extend(unit.tokens)
        else:
            out.extend([placeholder] * len(unit.tokens))
    return out


@dataclass(eq=False)
class CoalitionGame:
    """Characteristic function over bitmasks with a write-once memo.

    `value(mask)` is the raw oracle value minus the empty-coalition baseline, so
    `value(0) == 0.0` exactly.
    """

    n_players: int
    oracle: Callable[[int], float]
    units: list[Unit] | None = None
    placeholder: str = DEFAULT_PLACEHOLDER
    evaluations: int = 0
    _cache: dict[int, float] = field(default_factory=dict, repr=False)
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    def __post_init__(self) -> None:
        if self.n_players < 1:
            raise EmptySequence("a coalition game needs at least one player")

    @classmethod
    def from_scorer(
        cls,
        units: Sequence[Unit],
        scorer: Callable[[list[str]], float],
        placeholder: str = DEFAULT_PLACEHOLDER,
    ) -> CoalitionGame:
        units = list(units)

        def oracle(mask: int) -> float:
            return float(scorer(render_coalition(units, mask, placeholder)))

        return cls(len(units), oracle, units=units, placeholder=placeholder)

    @property
    def grand(self) -> int:
        return (1 << self.n_players) - 1

    def raw(self, mask: int) -> float:
        with self._lock:
            cached = self._cache.get(mask)
            if cached is not None:
                return cached
            value = float(self.oracle(mask))
            self.evaluations += 1
            self._cache[mask] = value
            return value

    @property
    def baseline(self) -> float:
        return self.raw(0)

    def value(self, mask: int) -> float:
        if mask == 0:
            return 0.0
        return self.raw(mask) - self.baseline

    def prefetch(self, masks: Iterable[int], max_workers: int = 1) -> int:
        """Evaluate every uncached mask, in parallel threads when `max_workers > 1`."""
        with self._lock:
            todo = sorted({int(m) for m in masks} - self._cache.keys())
        if not todo:
            return 0
        if max_workers <= 1:
            for mask in todo:
                self.raw(mask)
            return len(todo)
        with ThreadPoolExecutor(max_workers=max_workers) as ex:
            futures = {ex.submit(self.oracle, mask): mask for mask in todo}
            for fut in as_completed(futures):
                value = float(fut.result())
                with self._lock:
                    if futures[fut] not in self._cache:
                        self._cache[futures[fut]] = value
                        self.evaluations += 1
        return len(todo)

    def recorded(self) -> dict[int, float]:
        with self._lock:
            return dict(self._cache)


@dataclass(frozen=True)
class CreditVector:
    values: np.ndarray

    @property
    def total(self) -> float:
        return float(np.sum(self.values))

    def __len__(self) -> int:
        return int(self.values.shape[0])


def _popcounts(n_bits: int) -> np.ndarray:
    masks = np.arange(1 << n_bits, dtype=np.int64)
    counts = np.zeros_like(masks)
    for b in range(n_bits):
        counts += (masks >> b) & 1
    return counts


def _shapley_weights(n: int) -> np.ndarray:
    # weight of a coalition of size s that excludes the player: s!(n-s-1)!/n!
    return np.array([1.0 / (n * math.comb(n - 1, s)) for s in range(n)])


def exact_shapley(
    game: CoalitionGame, *, max_players: int = EXACT_SHAPLEY_CAP, max_workers: int = 1
) -> CreditVector:
    n = game.n_players
    if n > max_players:
        raise TooManyPlayers(f"exact Shapley is capped at {max_players} players, game has {n}")
    size = 1 << n
    game.prefetch(range(1, size), max_workers)
    values = np.array([game.value(m) for m in range(size)])
    masks = np.arange(size, dtype=np.int64)
    weights = _shapley_weights(n)[np.minimum(_popcounts(n), n - 1)]
    credits = np.empty(n)
    for i in range(n):
        without = masks[(masks >> i & 1) == 0]
        credits[i] = float(np.sum(weights[without] * (values[without | (1 << i)] - values[without])))
    logger.debug("exact shapley over %d players used %d oracle calls", n, game.evaluations)
    return CreditVector(credits)


def _union_mask(members: Iterable[int]) -> int:
    mask = 0
    for i in members:
        mask |= 1 << i
    return mask


def owen_value(
    game: CoalitionGame, structure: CoalitionStructure, *, max_players: int = EXACT_SHAPLEY_CAP
) -> CreditVector:
    """Two-level Owen value: Shapley over unions outside, Shapley within the player's union inside."""
    n = game.n_players
    structure.validate(n)
    unions = structure.unions
    m = len(unions)
    if m > max_players or max(len(u) for u in unions) > max_players:
        raise TooManyPlayers(f"Owen enumeration is capped at {max_players} unions / union members")
    union_masks = [_union_mask(u) for u in unions]
    outer_w = _shapley_weights(m)
    credits = np.zeros(n)
    for k, union in enumerate(unions):
        others = [union_masks[j] for j in range(m) if j != k]
        inner_w = _shapley_weights(len(union))
        for r_bits in range(1 << len(others)):
            q = 0
            r_size = 0
            for j, um in enumerate(others):
                if r_bits >> j & 1:
                    q |= um
                    r_size += 1
            w_out = outer_w[r_size]
            for i in union:
                mates = [p for p in union if p != i]
                for s_bits in range(1 << len(mates)):
                    s = q
                    s_size = 0
                    for j, p in enumerate(mates):
                        if s_bits >> j & 1:
                            s |= 1 << p
                            s_size += 1
                    credits[i] += w_out * inner_w[s_size] * (game.value(s | 1 << i) - game.value(s))
    return CreditVector(credits)


def hierarchical_owen(game: CoalitionGame, structure: CoalitionStructure) -> CreditVector:
    """Recursive split down a hierarchy tree.

    At every internal node the credit of the node is shared among its children by
    their Shapley values as indivisible blocks, conditioned on the coalitions formed
    outside the node. Balanced binary trees need O(N^2) oracle calls.
    """
    n = game.n_players
    structure.validate(n)
    tree = structure.tree()
    if sorted(_tree_leaves(tree)) != list(range(n)):
        raise InvalidTree(f"hierarchy leaves must be players 0..{n - 1} exactly once")
    credits = np.zeros(n)

    def block_mask(node: Tree) -> int:
        return _union_mask(_tree_leaves(node))

    def visit(node: Tree, contexts: dict[int, float]) -> None:
        if isinstance(node, (int, np.integer)):
            bit = 1 << int(node)
            credits[int(node)] = sum(w * (game.value(q | bit) - game.value(q)) for q, w in contexts.items())
            return
        children = list(node)
        masks = [block_mask(c) for c in children]
        k = len(children)
        weights = _shapley_weights(k)
        for j, child in enumerate(children):
            others = [masks[x] for x in range(k) if x != j]
            nested: dict[int, float] = {}
            for r_bits in range(1 << len(others)):
                extra = 0
                size = 0
                for x, om in enumerate(others):
                    if r_bits >> x & 1:
                        extra |= om
                        size += 1
                for q, w in contexts.items():
                    key = q | extra
                    nested[key] = nested.get(key, 0.0) + w * weights[size]
            visit(child, nested)

    visit(tree, {0: 1.0})
    logger.debug("hierarchical owen over %d players used %d oracle calls", n, game.evaluations)
    return CreditVector(credits)


def uniform_credit(game: CoalitionGame) -> CreditVector:
    """Comparison baseline: the grand-coalition value split evenly."""
    return CreditVector(np.full(game.n_players, game.value(game.grand) / game.n_players))


def check_alpha(alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise InvalidAlpha(f"alpha must lie in [0, 1], got {alpha}")
    return float(alpha)


@dataclass(frozen=True)
class RewardTrace:
    T: int
    unit_end_times: tuple[int, ...]
    kl_terms: np.ndarray
    terminal_reward: float
    alpha: float
    kl_coefficient: float = 0.0
    # raw reward of the all-placeholder rendering, re-emitted at T
    baseline: float = 0.0

    def __post_init__(self) -> None:
        check_alpha(self.alpha)
        if self.kl_coefficient < 0:
            raise ValidationError(f"kl_coefficient must be >= 0, got {self.kl_coefficient}")
        if self.T < 1:
            raise BoundaryError(f"horizon T must be >= 1, got {self.T}")
        ends = self.unit_end_times
        if len(ends) == 0 or ends[0] < 1 or any(b <= a for a, b in zip(ends, ends[1:])):
            raise BoundaryError(f"unit end times must be strictly increasing from 1, got {ends}")
        if ends[-1] != self.T:
            raise BoundaryError(f"last unit must end at T={self.T}, got {ends[-1]}")
        if np.shape(self.kl_terms) != (self.T,):
            raise DimensionError(f"kl_terms must have length {self.T}, got shape {np.shape(self.kl_terms)}")

    @classmethod
    def for_game(
        cls,
        game: CoalitionGame,
        alpha: float,
        *,
        kl_terms: np.ndarray | None = None,
        kl_coefficient: float = 0.0,
        log_probs: tuple[Sequence[float], Sequence[float]] | None = None,
    ) -> RewardTrace:
        """Trace for the grand-coalition rendering of `game`.

        `log_probs` is a (policy, reference) pair of per-token log-probabilities; the
        KL terms are then `kl_penalty` of the pair scaled by `kl_coefficient`.
        """
        if game.units is None:
            raise BoundaryError("the game carries no unit boundaries")
        if log_probs is not None:
            if kl_terms is not None:
                raise ValidationError("pass either kl_terms or log_probs, not both")
            kl_terms = kl_penalty(log_probs[0], log_probs[1], kl_coefficient)
        ends = tuple(u.end_t for u in game.units)
        T = ends[-1]
        return cls(
            T=T,
            unit_end_times=ends,
            kl_terms=np.zeros(T) if kl_terms is None else np.asarray(kl_terms, dtype=np.float64),
            terminal_reward=game.raw(game.grand),
            alpha=alpha,
            kl_coefficient=kl_coefficient,
            baseline=game.baseline,
        )


def place_rewards(credits: CreditVector, trace: RewardTrace) -> np.ndarray:
    """Per-timestep credit vector; element `t - 1` holds the reward of timestep `t`."""
    if len(credits) != len(trace.unit_end_times):
        raise BoundaryError(
            f"{len(credits)} credits for {len(trace.unit_end_times)} unit boundaries"
        )
    out = np.zeros(trace.T)
    out[np.asarray(trace.unit_end_times) - 1] = credits.values
    return out


def total_reward(trace: RewardTrace, shap_rewards: Sequence[float] | np.ndarray) -> np.ndarray:
    alpha = check_alpha(trace.alpha)
    shap = np.asarray(shap_rewards, dtype=np.float64)
    if shap.shape != (trace.T,):
        raise DimensionError(f"shap_rewards must have length {trace.T}, got shape {shap.shape}")
    rewards = np.asarray(trace.kl_terms, dtype=np.float64) + alpha * shap
    rewards[-1] += (1.0 - alpha) * trace.terminal_reward + alpha * trace.baseline
    return rewards


def kl_penalty(
    logp_policy: Sequence[float] | np.ndarray,
    logp_ref: Sequence[float] | np.ndarray,
    beta_kl: float,
) -> np.ndarray:
    policy = np.asarray(logp_policy, dtype=np.float64)
    ref = np.asarray(logp_ref, dtype=np.float64)
    if policy.shape != ref.shape:
        raise DimensionError(f"log-prob vectors differ in shape: {policy.shape} vs {ref.shape}")
    if beta_kl < 0:
        raise ValidationError(f"beta_kl must be >= 0, got {beta_kl}")
    return -beta_kl * (policy - ref)


def dump_game(game: CoalitionGame, path: Path) -> None:
    if game.units is None:
        raise ValidationError("only games built from units can be dumped")
    data = {
        "units": [list(u.tokens) for u in game.units],
        "placeholder": game.placeholder,
        "evaluations": {str(mask): value for mask, value in sorted(game.recorded().items())},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    tmp_path.write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    tmp_path.replace(path)


def units_from_tokens(groups: Sequence[Sequence[str]]) -> list[Unit]:
    units: list[Unit] = []
    t = 0
    for k, toks in enumerate(groups):
        if len(toks) == 0:
            raise EmptySequence(f"unit {k} holds no tokens")
        units.append(Unit(k, t + 1, t + len(toks), tuple(str(x) for x in toks)))
        t += len(toks)
    return units


def load_game(path: Path) -> CoalitionGame:
    """Replay a dumped game; coalitions absent from the dump raise `MissingEvaluation`."""
    data = json.loads(path.read_text(encoding="utf-8"))
    try:
        units = units_from_tokens(data["units"])
        table = {int(k): float(v) for k, v in data["evaluations"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{path} is not a game dump: {exc}") from exc
    if not units:
        raise EmptySequence(f"{path} holds no units")

    def oracle(mask: int) -> float:
        try:
            return table[mask]
        except KeyError:
            raise MissingEvaluation(f"coalition {mask:#x} was not recorded in {path}") from None

    return CoalitionGame(
        len(units), oracle, units=units, placeholder=str(data.get("placeholder", DEFAULT_PLACEHOLDER))
    )


def write_credit_csv(path: Path, units: Sequence[Unit], credits: CreditVector) -> None:
    if len(units) != len(credits):
        raise BoundaryError(f"{len(credits)} credits for {len(units)} units")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit_index", "start_t", "end_t", "credit"])
        for unit, credit in zip(units, credits.values):
            writer.writerow([unit.index, unit.start_t, unit.end_t, repr(float(credit))])
