"""Spectral comparison of state graphs and value transfer between matched nodes.

Two state graphs are compared through the eigendecomposition of their Laplacians
`L = D - A`. When the spectra agree and every eigenvalue is simple, rows of the
sign-normalised eigenvector matrices identify corresponding nodes, and the value
labels of the first graph can shape rewards on the second.

Exports:
- summary CSV: one row per graph node, `row,node_id,eigenvalue,v0..v{n-1}`, where
  `eigenvalue` in row i is the i-th largest eigenvalue (paired with column `vi`).
- pairing CSV: `node2_id,node1_id`.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from errors import (
    DimensionError,
    InsufficientGraph,
    NotMatched,
    NotSymmetric,
    SizeMismatch,
    ValidationError,
)
from state_graph import StateGraph

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
DEFAULT_GAP_TOL = 1e-6
DEFAULT_EPS_LAMBDA = 1e-6


def laplacian(graph: StateGraph) -> np.ndarray:
    """D - A over the occupied nodes, in ascending node-id order."""
    ids = np.asarray(graph.occupied_ids(), dtype=np.int64)
    if ids.size < 2:
        raise InsufficientGraph(f"a Laplacian needs >= 2 occupied nodes, graph has {ids.size}")
    adj = graph.adjacency[np.ix_(ids, ids)]
    return np.diag(adj.sum(axis=1)) - adj


def jacobi_eigh(
    matrix: np.ndarray, *, tol: float = 1e-12, max_sweeps: int = 100
) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix: (eigenvalues, eigenvectors)."""
    a = np.array(matrix, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(float(np.linalg.norm(a)), np.finfo(float).tiny)
    sweeps = 0
    for _ in range(max_sweeps):
        off = float(np.linalg.norm(a - np.diag(np.diag(a))))
        if off <= tol * scale:
            break
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = 1.0 if theta == 0.0 else np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    else:
        logger.warning("jacobi did not converge in %d sweeps", max_sweeps)
    logger.debug("jacobi finished after %d sweeps for n=%d", sweeps, n)
    return np.diag(a).copy(), v


def normalize_signs(vectors: np.ndarray, rel_tol: float = 1e-12) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive; ties go to the lowest index."""
    out = np.array(vectors, dtype=np.float64)
    for j in range(out.shape[1]):
        mags = np.abs(out[:, j])
        peak = mags.max()
        first = int(np.flatnonzero(mags >= peak * (1.0 - rel_tol))[0])
        if out[first, j] < 0:
            out[:, j] = -out[:, j]
    return out


@dataclass(frozen=True)
class SpectralSummary:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # column i pairs with eigenvalues[i]
    distinct_flag: bool
    node_ids: tuple[int, ...] = ()

    @property
    def size(self) -> int:
        return int(self.eigenvalues.shape[0])


def spectral_summary(
    L: np.ndarray,
    gap_tol: float = DEFAULT_GAP_TOL,
    *,
    node_ids: Sequence[int] | None = None,
    eigensolver: str = "jacobi",
) -> SpectralSummary:
    """Sorted, sign-normalised eigendecomposition; `gap_tol` is relative to the spectral radius."""
    mat = np.asarray(L, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {mat.shape}")
    if not gap_tol > 0:
        raise ValidationError(f"gap_tol must be > 0, got {gap_tol}")
    if np.max(np.abs(mat - mat.T), initial=0.0) > SYMMETRY_TOL:
        raise NotSymmetric("matrix is not symmetric within 1e-10")
    if eigensolver == "jacobi":
        values, vectors = jacobi_eigh(mat)
    elif eigensolver == "scipy":
        values, vectors = scipy.linalg.eigh(mat)
    else:
        raise ValidationError(f"unknown eigensolver {eigensolver!r} (expected 'jacobi' or 'scipy')")

    order = np.argsort(-values, kind="stable")
    values = values[order]
    vectors = normalize_signs(vectors[:, order])
    radius = float(np.max(np.abs(values), initial=0.0))
    gaps = values[:-1] - values[1:]
    distinct = bool(np.all(gaps > gap_tol * radius)) if radius > 0 else mat.shape[0] <= 1
    ids = tuple(int(i) for i in node_ids) if node_ids is not None else tuple(range(mat.shape[0]))
    if len(ids) != mat.shape[0]:
        raise SizeMismatch(f"{len(ids)} node ids for a {mat.shape[0]}x{mat.shape[0]} matrix")
    return SpectralSummary(values, vectors, distinct, ids)


def graph_summary(
    graph: StateGraph, gap_tol: float = DEFAULT_GAP_TOL, *, eigensolver: str = "jacobi"
) -> SpectralSummary:
    return spectral_summary(
        laplacian(graph), gap_tol, node_ids=graph.occupied_ids(), eigensolver=eigensolver
    )


def spectral_distance(s1: SpectralSummary, s2: SpectralSummary) -> float:
    if s1.size != s2.size:
        raise SizeMismatch(f"spectra have different sizes: {s1.size} vs {s2.size}")
    diff = s1.eigenvalues - s2.eigenvalues
    return float(diff @ diff)


def spectra_match(s1: SpectralSummary, s2: SpectralSummary, eps_lambda: float) -> bool:
    return spectral_distance(s1, s2) <= eps_lambda


class MatchKind(str, Enum):
    MATCHED = "matched"
    SPECTRA_MISMATCH = "spectra_mismatch"
    ROW_MATCH_FAILED = "row_match_failed"
    REPEATED_EIGENVALUES = "repeated_eigenvalues"


@dataclass(frozen=True)
class MatchResult:
    kind: MatchKind
    # graph-2 node id -> graph-1 node id
    pairing: Mapping[int, int] = field(default_factory=dict)
    failed_node: int | None = None
    # largest row distance accepted (or the failing one)
    max_row_distance: float = 0.0

    @property
    def matched(self) -> bool:
        return self.kind is MatchKind.MATCHED

    def require_matched(self) -> Mapping[int, int]:
        if not self.matched:
            raise NotMatched(f"graphs are not matched: {self.kind.value}")
        return self.pairing


def match_nodes(
    s1: SpectralSummary,
    s2: SpectralSummary,
    eps_v: float,
    *,
    eps_lambda: float = DEFAULT_EPS_LAMBDA,
) -> MatchResult:
    """Greedy injective row matching of the sign-normalised eigenvector matrices.

    The spectra must first agree within `eps_lambda` (pass `math.inf` to compare rows
    of unrelated graphs). Rows of `s2` are visited in order; each takes the nearest
    unmatched row of `s1`.
    """
    if s1.size != s2.size:
        return MatchResult(MatchKind.SPECTRA_MISMATCH)
    if not spectra_match(s1, s2, eps_lambda):
        return MatchResult(MatchKind.SPECTRA_MISMATCH)
    if not (s1.distinct_flag and s2.distinct_flag):
        logger.info("repeated eigenvalues: row matching is ambiguous, skipping")
        return MatchResult(MatchKind.REPEATED_EIGENVALUES)

    free = np.ones(s1.size, dtype=bool)
    pairing: dict[int, int] = {}
    worst = 0.0
    for row in range(s2.size):
        candidates = np.flatnonzero(free)
        dists = np.linalg.norm(s1.eigenvectors[candidates] - s2.eigenvectors[row], axis=1)
        k = int(np.argmin(dists))
        dist = float(dists[k])
        if dist > eps_v:
            return MatchResult(
                MatchKind.ROW_MATCH_FAILED, failed_node=s2.node_ids[row], max_row_distance=dist
            )
        free[candidates[k]] = False
        pairing[s2.node_ids[row]] = s1.node_ids[int(candidates[k])]
        worst = max(worst, dist)
    return MatchResult(MatchKind.MATCHED, pairing, max_row_distance=worst)


def label_value(graph: StateGraph, node_id: int, value: float) -> None:
    graph.set_label(node_id, value)


def transfer_intrinsic(
    graph2: StateGraph,
    match: MatchResult,
    labels1: Mapping[int, float],
    phi_next: Sequence[float] | np.ndarray,
    beta_transfer: float,
) -> float:
    """beta * (label of the graph-1 node paired with the graph-2 node nearest to `phi_next`)."""
    pairing = match.require_matched()
    if beta_transfer < 0:
        raise ValidationError(f"beta_transfer must be >= 0, got {beta_transfer}")
    node2 = graph2.nearest(phi_next)
    if node2 is None:
        raise InsufficientGraph("graph 2 has no occupied nodes")
    if beta_transfer == 0.0:
        return 0.0
    node1 = pairing.get(node2)
    label = labels1.get(node1) if node1 is not None else None
    if label is None:
        return 0.0
    return beta_transfer * float(label)


def write_summary_csv(path: Path, summary: SpectralSummary) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    n = summary.size
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "node_id", "eigenvalue", *(f"v{j}" for j in range(n))])
        for i in range(n):
            writer.writerow([
                i,
                summary.node_ids[i],
                repr(float(summary.eigenvalues[i])),
                *(repr(float(x)) for x in summary.eigenvectors[i]),
            ])


def write_pairing_csv(path: Path, match: MatchResult) -> None:
    pairing = match.require_matched()
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node2_id", "node1_id"])
        for node2, node1 in sorted(pairing.items()):
            writer.writerow([node2, node1])
