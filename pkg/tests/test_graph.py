"""Multi-modal graph construction against brute-force neighbor oracles."""
import json

import numpy as np
import pytest

from oracles import cross_brute, knn_brute
from promptood.errors import DimensionMismatch, FormatError
from promptood.graph import (
    NodeKind,
    TopKConfig,
    build_graph,
    inter_neighbors,
    intra_neighbors,
)


class TestIntraNeighbors:
    def test_points_on_a_line(self):
        features = np.array([[0.0], [1.0], [3.0]])
        assert intra_neighbors(features, 1) == [[1], [0], [1]]

    def test_saturation(self):
        features = np.random.default_rng(0).standard_normal((4, 3))
        neigh = intra_neighbors(features, 10)
        for i, lst in enumerate(neigh):
            assert sorted(lst) == [j for j in range(4) if j != i]

    def test_single_node(self):
        assert intra_neighbors(np.array([[1.0, 2.0]]), 3) == [[]]

    def test_tie_breaks_to_lower_index(self):
        features = np.array([[0.0], [1.0], [-1.0]])  # nodes 1 and 2 equidistant from 0
        assert intra_neighbors(features, 1)[0] == [1]

    def test_monotone_in_k(self):
        rng = np.random.default_rng(5)
        features = rng.standard_normal((12, 4))
        for k in range(1, 11):
            small = intra_neighbors(features, k)
            large = intra_neighbors(features, k + 1)
            for s, l in zip(small, large):
                assert s == l[: len(s)]


class TestInterNeighbors:
    def test_single_pair(self):
        pairs = inter_neighbors(np.array([[0.0, 0.0]]), np.array([[1.0, 1.0]]), 1)
        assert pairs == [(0, 0)]

    def test_two_by_two_nearest(self):
        patches = np.array([[0.0], [10.0]])
        prompts = np.array([[1.0], [11.0]])
        assert inter_neighbors(patches, prompts, 1) == [(0, 0), (1, 1)]

    def test_saturation_gives_complete_bipartite(self):
        rng = np.random.default_rng(1)
        patches = rng.standard_normal((3, 2))
        prompts = rng.standard_normal((4, 2))
        pairs = inter_neighbors(patches, prompts, 99)
        assert set(pairs) == {(i, j) for i in range(3) for j in range(4)}


class TestBuildGraph:
    def test_node_count(self):
        rng = np.random.default_rng(2)
        graph = build_graph(
            rng.standard_normal((4, 6)), rng.standard_normal((6, 6)), TopKConfig()
        )
        assert graph.num_nodes == 10
        assert graph.num_patches == 4
        assert graph.node_ref(0).kind == NodeKind.PATCH
        assert graph.node_ref(4).kind == NodeKind.PROMPT
        assert graph.node_ref(4).position == 0

    def test_zero_prompts(self):
        rng = np.random.default_rng(3)
        graph = build_graph(rng.standard_normal((5, 4)), np.zeros((0, 4)), TopKConfig())
        assert graph.inter_edges == ()
        assert graph.num_prompts == 0
        assert len(graph.intra_edges) == 5 * 4  # k saturates at M-1

    def test_determinism(self):
        rng = np.random.default_rng(4)
        patches = rng.standard_normal((5, 3))
        prompts = rng.standard_normal((4, 3))
        g1 = build_graph(patches, prompts, TopKConfig(2, 2, 2))
        g2 = build_graph(patches, prompts, TopKConfig(2, 2, 2))
        assert g1.intra_edges == g2.intra_edges
        assert g1.inter_edges == g2.inter_edges

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            build_graph(np.ones((2, 3)), np.ones((2, 4)), TopKConfig())

    def test_needs_a_patch(self):
        with pytest.raises(FormatError):
            build_graph(np.ones((0, 3)), np.ones((2, 3)), TopKConfig())

    def test_in_degree_invariant(self):
        rng = np.random.default_rng(6)
        m, p = 7, 5
        cfg = TopKConfig(k_text=2, k_patch=3, k_cross=2)
        graph = build_graph(rng.standard_normal((m, 4)), rng.standard_normal((p, 4)), cfg)
        intra_in = [0] * graph.num_nodes
        for src, dst in graph.intra_edges:
            assert (src < m) == (dst < m)  # intra edges stay within one modality
            assert src != dst
            intra_in[dst] += 1
        for i in range(m):
            assert intra_in[i] == min(cfg.k_patch, m - 1)
        for i in range(m, m + p):
            assert intra_in[i] == min(cfg.k_text, p - 1)
        for src, dst in graph.inter_edges:
            assert (src < m) != (dst < m)  # inter edges cross modalities
        assert len(set(graph.intra_edges)) == len(graph.intra_edges)
        assert len(set(graph.inter_edges)) == len(graph.inter_edges)

    def test_inter_edges_come_in_both_directions(self):
        rng = np.random.default_rng(7)
        graph = build_graph(
            rng.standard_normal((4, 3)), rng.standard_normal((3, 3)), TopKConfig(1, 1, 1)
        )
        edges = set(graph.inter_edges)
        assert all((dst, src) in edges for src, dst in edges)

    def test_json_dump(self):
        rng = np.random.default_rng(8)
        graph = build_graph(
            rng.standard_normal((2, 3)), rng.standard_normal((2, 3)), TopKConfig(1, 1, 1)
        )
        payload = json.loads(graph.to_json())
        assert payload["num_patches"] == 2
        assert payload["node_kinds"] == ["patch", "patch", "prompt", "prompt"]
        assert payload["node_positions"] == [0, 1, 0, 1]
        assert all(len(e) == 2 for e in payload["intra_edges"])


class TestBruteForceEquivalence:
    def test_intra_matches_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            count = int(rng.integers(1, 20))
            dim = int(rng.integers(1, 6))
            k = int(rng.integers(1, 6))
            features = rng.standard_normal((count, dim))
            assert intra_neighbors(features, k) == knn_brute(features, k)

    def test_inter_matches_oracle(self):
        rng = np.random.default_rng(12)
        for _ in range(30):
            m = int(rng.integers(1, 12))
            p = int(rng.integers(1, 12))
            k = int(rng.integers(1, 5))
            patches = rng.standard_normal((m, 3))
            prompts = rng.standard_normal((p, 3))
            assert set(inter_neighbors(patches, prompts, k)) == cross_brute(patches, prompts, k)


def test_permutation_covariance():
    rng = np.random.default_rng(13)
    patches = rng.standard_normal((6, 4))
    prompts = rng.standard_normal((5, 4))
    cfg = TopKConfig(2, 2, 2)
    base = build_graph(patches, prompts, cfg)

    perm_p = rng.permutation(6)
    perm_t = rng.permutation(5)
    permuted = build_graph(patches[perm_p], prompts[perm_t], cfg)

    # old patch index i now sits at position inv_p[i]
    inv_p = np.argsort(perm_p)
    inv_t = np.argsort(perm_t)

    def remap(idx: int) -> int:
        if idx < 6:
            return int(inv_p[idx])
        return 6 + int(inv_t[idx - 6])

    assert {(remap(s), remap(d)) for s, d in base.intra_edges} == set(permuted.intra_edges)
    assert {(remap(s), remap(d)) for s, d in base.inter_edges} == set(permuted.inter_edges)
