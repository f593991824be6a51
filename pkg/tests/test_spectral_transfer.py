from __future__ import annotations

import csv
import math

import numpy as np
import pytest

from errors import DimensionError, InsufficientGraph, NotMatched, NotSymmetric, SizeMismatch
from spectral_transfer import (
    MatchKind,
    MatchResult,
    graph_summary,
    jacobi_eigh,
    label_value,
    laplacian,
    match_nodes,
    normalize_signs,
    spectral_distance,
    spectra_match,
    spectral_summary,
    transfer_intrinsic,
    write_pairing_csv,
    write_summary_csv,
)
from state_graph import create_graph, observe_transition


def _random_laplacian(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    w = np.triu(rng.uniform(0.5, 3.0, size=(n, n)), 1)
    adj = w + w.T
    return np.diag(adj.sum(axis=1)) - adj


def _path_graph():
    graph = create_graph(4, 0.1)
    prev = None
    for x in (0.0, 1.0, 2.0):
        prev = observe_transition(graph, prev, (x, 0.0)).node_id
    return graph


def test_laplacian_of_path():
    np.testing.assert_array_equal(
        laplacian(_path_graph()), [[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]]
    )
    single = create_graph(4, 0.1)
    observe_transition(single, None, (0.0, 0.0))
    with pytest.raises(InsufficientGraph):
        laplacian(single)


def test_path_spectrum():
    summary = graph_summary(_path_graph())
    np.testing.assert_allclose(summary.eigenvalues, [3.0, 1.0, 0.0], atol=1e-12)
    assert summary.distinct_flag
    assert summary.node_ids == (0, 1, 2)


def test_diagonal_matrix():
    summary = spectral_summary(np.diag([2.0, 0.0, 5.0]))
    np.testing.assert_array_equal(summary.eigenvalues, [5.0, 2.0, 0.0])
    np.testing.assert_array_equal(summary.eigenvectors, [[0, 1, 0], [0, 0, 1], [1, 0, 0]])


def test_laplacian_spectrum_is_psd_and_reconstructs():
    lap = _random_laplacian(7, 0)
    summary = spectral_summary(lap)
    assert np.all(summary.eigenvalues >= -1e-10)
    assert np.all(np.diff(summary.eigenvalues) <= 0)
    v = summary.eigenvectors
    np.testing.assert_allclose(v @ np.diag(summary.eigenvalues) @ v.T, lap, atol=1e-9)
    np.testing.assert_allclose(v.T @ v, np.eye(7), atol=1e-10)


def test_jacobi_agrees_with_scipy():
    lap = _random_laplacian(8, 3)
    ours = spectral_summary(lap, eigensolver="jacobi")
    ref = spectral_summary(lap, eigensolver="scipy")
    np.testing.assert_allclose(ours.eigenvalues, ref.eigenvalues, atol=1e-9)
    np.testing.assert_allclose(ours.eigenvectors, ref.eigenvectors, atol=1e-7)


def test_jacobi_handles_already_diagonal_input():
    values, vectors = jacobi_eigh(np.diag([1.0, 2.0]))
    np.testing.assert_array_equal(values, [1.0, 2.0])
    np.testing.assert_array_equal(vectors, np.eye(2))


def test_normalize_signs():
    out = normalize_signs(np.array([[0.6, -0.8], [-0.8, 0.6]]))
    np.testing.assert_array_equal(out, [[-0.6, 0.8], [0.8, -0.6]])


def test_summary_input_checks():
    with pytest.raises(NotSymmetric):
        spectral_summary(np.array([[0.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(DimensionError):
        spectral_summary(np.zeros((2, 3)))


def test_permuted_graph_is_recovered():
    lap1 = _random_laplacian(6, 1)
    perm = np.array([3, 0, 5, 1, 4, 2])
    lap2 = lap1[np.ix_(perm, perm)]
    s1 = spectral_summary(lap1, node_ids=[10, 11, 12, 13, 14, 15])
    s2 = spectral_summary(lap2)
    assert spectral_distance(s1, s2) < 1e-18
    result = match_nodes(s1, s2, 1e-6, eps_lambda=1e-9)
    assert result.kind is MatchKind.MATCHED
    assert result.pairing == {i: 10 + int(perm[i]) for i in range(6)}
    assert result.max_row_distance < 1e-6


def test_spectra_match_threshold():
    lap = _random_laplacian(5, 2)
    s1 = spectral_summary(lap)
    assert spectra_match(s1, s1, 1e-12)
    other = spectral_summary(_random_laplacian(5, 7))
    gap = spectral_distance(s1, other)
    assert gap > 0
    assert spectra_match(s1, other, gap)
    assert not spectra_match(s1, other, gap / 2)
    with pytest.raises(SizeMismatch):
        spectra_match(s1, spectral_summary(_random_laplacian(3, 2)), 1.0)


def test_repeated_eigenvalues_are_not_matched():
    # 4-cycle: spectrum 4, 2, 2, 0
    adj = np.array([[0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0]], dtype=float)
    lap = np.diag(adj.sum(axis=1)) - adj
    summary = spectral_summary(lap)
    np.testing.assert_allclose(summary.eigenvalues, [4.0, 2.0, 2.0, 0.0], atol=1e-12)
    assert not summary.distinct_flag
    assert match_nodes(summary, summary, 1e-6).kind is MatchKind.REPEATED_EIGENVALUES


def test_different_graphs_do_not_match():
    s1 = spectral_summary(_random_laplacian(5, 4))
    s2 = spectral_summary(_random_laplacian(5, 5))
    assert match_nodes(s1, s2, 1e-6, eps_lambda=1e-6).kind is MatchKind.SPECTRA_MISMATCH
    failed = match_nodes(s1, s2, 1e-6, eps_lambda=math.inf)
    assert failed.kind is MatchKind.ROW_MATCH_FAILED
    assert failed.failed_node == 0
    assert failed.max_row_distance > 1e-6

    small = spectral_summary(_random_laplacian(4, 4))
    assert match_nodes(s1, small, 1.0).kind is MatchKind.SPECTRA_MISMATCH
    with pytest.raises(SizeMismatch):
        spectral_distance(s1, small)


def test_match_rechecks_spectra_by_default():
    s1 = spectral_summary(_random_laplacian(5, 4))
    s2 = spectral_summary(_random_laplacian(5, 5))
    # any row distance is accepted, so only the spectral check can refuse
    assert match_nodes(s1, s2, math.inf).kind is MatchKind.SPECTRA_MISMATCH
    assert match_nodes(s1, s2, math.inf, eps_lambda=math.inf).kind is MatchKind.MATCHED
    assert match_nodes(s1, s1, 1e-9).kind is MatchKind.MATCHED


def _two_node_graph():
    graph = create_graph(4, 0.01)
    observe_transition(graph, None, (0.0, 0.0))
    observe_transition(graph, 0, (1.0, 0.0))
    return graph


def test_transfer_intrinsic():
    graph2 = _two_node_graph()
    match = MatchResult(MatchKind.MATCHED, {0: 7, 1: 8})
    labels1 = {8: 1.4}
    assert transfer_intrinsic(graph2, match, labels1, (0.9, 0.0), 0.5) == pytest.approx(0.7)
    assert transfer_intrinsic(graph2, match, labels1, (0.1, 0.0), 0.5) == 0.0
    assert transfer_intrinsic(graph2, match, labels1, (0.9, 0.0), 0.0) == 0.0
    with pytest.raises(NotMatched):
        transfer_intrinsic(graph2, MatchResult(MatchKind.ROW_MATCH_FAILED), labels1, (0.9, 0.0), 0.5)
    with pytest.raises(InsufficientGraph):
        transfer_intrinsic(create_graph(4, 0.01), match, labels1, (0.9, 0.0), 0.5)


def test_label_value():
    graph = _two_node_graph()
    label_value(graph, 1, 0.25)
    label_value(graph, 1, 0.5)
    assert graph.labels() == {1: 0.5}


def test_summary_and_pairing_csv(tmp_path):
    summary = spectral_summary(np.diag([2.0, 0.0, 5.0]), node_ids=[4, 6, 9])
    path = tmp_path / "summary.csv"
    write_summary_csv(path, summary)
    with path.open(encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["row", "node_id", "eigenvalue", "v0", "v1", "v2"]
    assert rows[1][:3] == ["0", "4", "5.0"]
    assert len(rows) == 4

    pairing = tmp_path / "pairing.csv"
    write_pairing_csv(pairing, MatchResult(MatchKind.MATCHED, {1: 0, 0: 1}))
    assert pairing.read_text(encoding="utf-8").splitlines() == ["node2_id,node1_id", "0,1", "1,0"]


@pytest.mark.slow
@pytest.mark.parametrize("n", [10, 25, 50])
def test_permutation_is_recovered_at_scale(n):
    lap1 = _random_laplacian(n, 100 + n)
    perm = np.random.default_rng(n).permutation(n)
    lap2 = lap1[np.ix_(perm, perm)]
    s1 = spectral_summary(lap1)
    s2 = spectral_summary(lap2)
    assert s1.distinct_flag and s2.distinct_flag
    assert spectral_distance(s1, s2) < 1e-12
    result = match_nodes(s1, s2, 1e-6, eps_lambda=1e-9)
    assert result.kind is MatchKind.MATCHED
    assert result.pairing == {i: int(perm[i]) for i in range(n)}
