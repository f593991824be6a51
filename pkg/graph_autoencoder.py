"""Feed-forward graph encoder with an inner-product decoder.

The encoder maps a state feature to a subgoal embedding; the decoder scores two
embeddings by their dot product. Training regresses decoder scores onto the
normalized adjacency of a `StateGraph`, one unordered node pair at a time, with
plain gradient descent and hand-written backpropagation.

Parameters are plain numpy arrays in a frozen dataclass; checkpoints are `.npz`
archives holding the layer dims and the row-major float64 tensors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from errors import (
    DimensionError,
    EmptySample,
    InsufficientData,
    StaleNodeError,
    TrainingDiverged,
    ValidationError,
)
from state_graph import StateGraph, normalized_adjacency

logger = logging.getLogger(__name__)

DEFAULT_HIDDEN = (64, 64)


@dataclass(frozen=True)
class EncoderParams:
    layer_dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        dims = self.layer_dims
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise DimensionError(f"layer_dims must hold at least two positive sizes, got {dims}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise DimensionError("one weight matrix and one bias vector per layer required")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[k + 1], dims[k]) or b.shape != (dims[k + 1],):
                raise DimensionError(
                    f"layer {k}: expected W{(dims[k + 1], dims[k])} and b{(dims[k + 1],)}, "
                    f"got W{w.shape} and b{b.shape}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValidationError(f"layer {k} holds non-finite parameters")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> EncoderParams:
        return EncoderParams(
            self.layer_dims,
            tuple(w.copy() for w in self.weights),
            tuple(b.copy() for b in self.biases),
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    steps_per_phase: int = 1
    pair_sample_fraction: float = 1.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.steps_per_phase < 1:
            raise ValidationError(f"steps_per_phase must be >= 1, got {self.steps_per_phase}")
        if not 0.0 < self.pair_sample_fraction <= 1.0:
            raise ValidationError(
                f"pair_sample_fraction must lie in (0, 1], got {self.pair_sample_fraction}"
            )


def default_layer_dims(input_dim: int, embedding_dim: int | None = None,
                       hidden: Sequence[int] = DEFAULT_HIDDEN) -> tuple[int, ...]:
    return (int(input_dim), *(int(h) for h in hidden), int(embedding_dim or input_dim))


def init_params(layer_dims: Sequence[int], rng: np.random.Generator) -> EncoderParams:
    """Gaussian weights scaled by 1/sqrt(fan_in), zero biases."""
    dims = tuple(int(d) for d in layer_dims)
    weights = tuple(
        rng.standard_normal((dims[k + 1], dims[k])) / np.sqrt(dims[k]) for k in range(len(dims) - 1)
    )
    biases = tuple(np.zeros(dims[k + 1]) for k in range(len(dims) - 1))
    return EncoderParams(dims, weights, biases)


def _forward(params: EncoderParams, inputs: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    activations = [inputs]
    h = inputs
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        h = z if k == last else np.tanh(z)
        activations.append(h)
    return h, activations


def _backward(
    params: EncoderParams, activations: list[np.ndarray], d_out: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    n_layers = len(params.weights)
    grad_w: list[np.ndarray] = [np.empty(0)] * n_layers
    grad_b: list[np.ndarray] = [np.empty(0)] * n_layers
    delta = d_out
    for k in reversed(range(n_layers)):
        grad_w[k] = delta.T @ activations[k]
        grad_b[k] = delta.sum(axis=0)
        if k > 0:
            # activations[k] = tanh(z_{k-1})
            delta = (delta @ params.weights[k]) * (1.0 - activations[k] ** 2)
    return grad_w, grad_b


def encode(params: EncoderParams, feature: Sequence[float] | np.ndarray) -> np.ndarray:
    x = np.asarray(feature, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != params.input_dim:
        raise DimensionError(f"encoder expects a vector of size {params.input_dim}, got shape {x.shape}")
    out, _ = _forward(params, x[None, :])
    return out[0]


def embed_all(params: EncoderParams, features: np.ndarray) -> np.ndarray:
    """Encode a (n, d) batch of features in one pass."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise DimensionError(f"encoder expects shape (n, {params.input_dim}), got {x.shape}")
    out, _ = _forward(params, x)
    return out


def decode(g_u: Sequence[float] | np.ndarray, g_v: Sequence[float] | np.ndarray) -> float:
    a = np.asarray(g_u, dtype=np.float64)
    b = np.asarray(g_v, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"decoder inputs differ in shape: {a.shape} vs {b.shape}")
    return float(a @ b)


def _check_pairs(graph: StateGraph, pairs: Sequence[tuple[int, int]] | np.ndarray) -> np.ndarray:
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if arr.shape[0] == 0:
        raise EmptySample("no node pairs to evaluate")
    if np.any(arr[:, 0] == arr[:, 1]):
        raise ValidationError("pairs must join two distinct nodes")
    for node in np.unique(arr):
        if not graph.is_occupied(int(node)):
            raise StaleNodeError(f"pair references unoccupied node {node}")
    return arr


def loss_and_gradients(
    params: EncoderParams,
    graph: StateGraph,
    pairs: Sequence[tuple[int, int]] | np.ndarray,
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Squared reconstruction error over `pairs` and its gradient w.r.t. all parameters."""
    arr = _check_pairs(graph, pairs)
    assert graph.features is not None
    ids = np.unique(arr)
    embeddings, activations = _forward(params, graph.features[ids])
    pos = np.searchsorted(ids, arr)
    z_u = embeddings[pos[:, 0]]
    z_v = embeddings[pos[:, 1]]
    target = normalized_adjacency(graph)[arr[:, 0], arr[:, 1]]
    residual = np.sum(z_u * z_v, axis=1) - target
    loss = float(residual @ residual)

    d_emb = np.zeros_like(embeddings)
    np.add.at(d_emb, pos[:, 0], 2.0 * residual[:, None] * z_v)
    np.add.at(d_emb, pos[:, 1], 2.0 * residual[:, None] * z_u)
    grad_w, grad_b = _backward(params, activations, d_emb)
    return loss, grad_w, grad_b


def reconstruction_loss(
    params: EncoderParams,
    graph: StateGraph,
    pairs: Sequence[tuple[int, int]] | np.ndarray,
) -> float:
    arr = _check_pairs(graph, pairs)
    assert graph.features is not None
    ids = np.unique(arr)
    embeddings, _ = _forward(params, graph.features[ids])
    pos = np.searchsorted(ids, arr)
    target = normalized_adjacency(graph)[arr[:, 0], arr[:, 1]]
    residual = np.sum(embeddings[pos[:, 0]] * embeddings[pos[:, 1]], axis=1) - target
    return float(residual @ residual)


def all_pairs(graph: StateGraph) -> np.ndarray:
    ids = np.flatnonzero(graph.occupied)
    upper = np.triu_indices(ids.size, k=1)
    return np.stack([ids[upper[0]], ids[upper[1]]], axis=1)


def sample_pairs(graph: StateGraph, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Unordered occupied pairs; a random subset of size round(fraction * total) when fraction < 1."""
    pairs = all_pairs(graph)
    if fraction >= 1.0 or pairs.shape[0] <= 1:
        return pairs
    k = max(1, int(round(fraction * pairs.shape[0])))
    chosen = np.sort(rng.choice(pairs.shape[0], size=k, replace=False))
    return pairs[chosen]


def train_phase(
    params: EncoderParams,
    graph: StateGraph,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> EncoderParams:
    """Run `steps_per_phase` gradient-descent steps starting from `params` (warm start).

    Each step descends the mean squared error over the sampled pairs, so the step
    size does not grow with the number of nodes in the graph.
    """
    if graph.num_occupied < 2:
        raise InsufficientData(f"training needs >= 2 occupied nodes, graph has {graph.num_occupied}")
    rng = rng if rng is not None else np.random.default_rng(config.rng_seed)
    current = params
    loss = 0.0
    for step in range(config.steps_per_phase):
        pairs = sample_pairs(graph, config.pair_sample_fraction, rng)
        loss, grad_w, grad_b = loss_and_gradients(current, graph, pairs)
        lr = config.learning_rate / pairs.shape[0]
        weights = tuple(w - lr * g for w, g in zip(current.weights, grad_w))
        biases = tuple(b - lr * g for b, g in zip(current.biases, grad_b))
        if not all(np.all(np.isfinite(a)) for a in (*weights, *biases)):
            raise TrainingDiverged(
                f"encoder parameters became non-finite at step {step} "
                f"(sampled loss {loss:.3g}, learning rate {config.learning_rate})"
            )
        current = EncoderParams(params.layer_dims, weights, biases)
    logger.debug("train phase done: %d steps, last sampled loss %.6f", config.steps_per_phase, loss)
    return current


def save_params(params: EncoderParams, path: Path) -> None:
    arrays: dict[str, np.ndarray] = {"layer_dims": np.asarray(params.layer_dims, dtype=np.int64)}
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"w{k}"] = np.ascontiguousarray(w, dtype=np.float64)
        arrays[f"b{k}"] = np.ascontiguousarray(b, dtype=np.float64)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    with tmp_path.open("wb") as fh:
        np.savez(fh, **arrays)
    tmp_path.replace(path)


def load_params(path: Path) -> EncoderParams:
    with np.load(path, allow_pickle=False) as data:
        dims = tuple(int(d) for d in data["layer_dims"])
        n_layers = len(dims) - 1
        weights = tuple(data[f"w{k}"] for k in range(n_layers))
        biases = tuple(data[f"b{k}"] for k in range(n_layers))
    return EncoderParams(dims, weights, biases)
