"""Per-sample multi-modal graph construction.

Nodes are the M image patches (global indices 0..M-1) followed by the s*N
prompt representations of one category block. Similarity is negative
Euclidean distance, so Top-K picks the smallest distances; ties break toward
the lower node index. Intra-modal edges point neighbor -> node; every
selected cross-modal pair is materialized in both directions so messages
flow both ways.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DimensionMismatch, FormatError


class NodeKind(Enum):
    PATCH = "patch"
    PROMPT = "prompt"


@dataclass(frozen=True)
class NodeRef:
    kind: NodeKind
    position: int  # index within the modality's own list


@dataclass(frozen=True)
class TopKConfig:
    k_text: int = 2
    k_patch: int = 10
    k_cross: int = 8

    def __post_init__(self):
        if min(self.k_text, self.k_patch, self.k_cross) < 1:
            raise FormatError("all Top-K values must be at least 1")


@dataclass(frozen=True)
class MultiModalGraph:
    """Typed node features plus directed intra- and inter-modal edge lists."""

    patch_features: np.ndarray  # (M, d)
    prompt_features: np.ndarray  # (P, d); P may be 0
    intra_edges: tuple[tuple[int, int], ...]  # (src, dst) global indices
    inter_edges: tuple[tuple[int, int], ...]

    @property
    def num_patches(self) -> int:
        return int(self.patch_features.shape[0])

    @property
    def num_prompts(self) -> int:
        return int(self.prompt_features.shape[0])

    @property
    def num_nodes(self) -> int:
        return self.num_patches + self.num_prompts

    @property
    def dim(self) -> int:
        return int(self.patch_features.shape[1])

    def node_ref(self, index: int) -> NodeRef:
        if index < self.num_patches:
            return NodeRef(NodeKind.PATCH, index)
        return NodeRef(NodeKind.PROMPT, index - self.num_patches)

    def node_features(self) -> np.ndarray:
        if self.num_prompts == 0:
            return np.asarray(self.patch_features, dtype=np.float64)
        return np.concatenate(
            [self.patch_features, self.prompt_features], axis=0
        ).astype(np.float64)

    def in_neighbors(self) -> list[list[int]]:
        """Per-node in-neighbor lists over the union of both edge sets."""
        neigh: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for src, dst in self.intra_edges:
            neigh[dst].append(src)
        for src, dst in self.inter_edges:
            neigh[dst].append(src)
        return neigh

    def to_json_dict(self) -> dict:
        refs = [self.node_ref(i) for i in range(self.num_nodes)]
        return {
            "num_patches": self.num_patches,
            "num_prompts": self.num_prompts,
            "dim": self.dim,
            "node_kinds": [ref.kind.value for ref in refs],
            "node_positions": [ref.position for ref in refs],
            "intra_edges": [list(e) for e in self.intra_edges],
            "inter_edges": [list(e) for e in self.inter_edges],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2) + "\n"


def intra_neighbors(features: np.ndarray, k: int) -> list[list[int]]:
    """For each node, the min(k, count-1) other nodes at smallest distance.

    Neighbor lists are ordered by (distance, index); ties break to the lower
    index, so construction is deterministic and monotone in k.
    """
    features = np.asarray(features, dtype=np.float64)
    count = features.shape[0]
    if count == 0:
        raise FormatError("intra_neighbors needs at least one vector")
    take = min(k, count - 1)
    if take == 0:
        return [[] for _ in range(count)]
    diffs = features[:, None, :] - features[None, :, :]
    dist2 = np.einsum("ijk,ijk->ij", diffs, diffs)
    np.fill_diagonal(dist2, np.inf)
    order = np.argsort(dist2, axis=1, kind="stable")  # stable sort: ties to lower index
    return [order[i, :take].tolist() for i in range(count)]


def inter_neighbors(
    patches: np.ndarray, prompts: np.ndarray, k: int
) -> list[tuple[int, int]]:
    """Deduplicated union of top-k prompts per patch and top-k patches per prompt.

    Returns (patch_index, prompt_index) pairs sorted lexicographically; both
    direction edges are materialized later by build_graph.
    """
    patches = np.asarray(patches, dtype=np.float64)
    prompts = np.asarray(prompts, dtype=np.float64)
    if patches.shape[0] == 0 or prompts.shape[0] == 0:
        raise FormatError("inter_neighbors needs both modalities non-empty")
    diffs = patches[:, None, :] - prompts[None, :, :]
    dist2 = np.einsum("ijk,ijk->ij", diffs, diffs)  # (M, P)

    pairs: set[tuple[int, int]] = set()
    k_patch_side = min(k, prompts.shape[0])
    order = np.argsort(dist2, axis=1, kind="stable")
    for i in range(patches.shape[0]):
        for j in order[i, :k_patch_side]:
            pairs.add((i, int(j)))
    k_prompt_side = min(k, patches.shape[0])
    order_t = np.argsort(dist2.T, axis=1, kind="stable")
    for j in range(prompts.shape[0]):
        for i in order_t[j, :k_prompt_side]:
            pairs.add((int(i), j))
    return sorted(pairs)


def build_graph(
    patches: np.ndarray, prompts: np.ndarray, config: TopKConfig
) -> MultiModalGraph:
    """Assemble the fixed per-sample graph from patch and prompt vectors.

    An empty prompt side yields a patch-only graph with no inter edges.

    Raises:
        DimensionMismatch: the two feature sets disagree on dimension.
        FormatError: no patches.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2 or patches.shape[0] < 1:
        raise FormatError("build_graph needs at least one patch vector")
    prompts = np.asarray(prompts, dtype=np.float64)
    if prompts.size == 0:
        prompts = np.zeros((0, patches.shape[1]))
    if prompts.ndim != 2 or prompts.shape[1] != patches.shape[1]:
        raise DimensionMismatch(
            f"patch dim {patches.shape[1]} != prompt dim "
            f"{prompts.shape[1] if prompts.ndim == 2 else prompts.shape}"
        )
    m = patches.shape[0]

    intra: list[tuple[int, int]] = []
    for i, neigh in enumerate(intra_neighbors(patches, config.k_patch)):
        intra.extend((j, i) for j in neigh)
    if prompts.shape[0] > 0:
        for i, neigh in enumerate(intra_neighbors(prompts, config.k_text)):
            intra.extend((m + j, m + i) for j in neigh)

    inter: list[tuple[int, int]] = []
    if prompts.shape[0] > 0:
        for patch_idx, prompt_idx in inter_neighbors(patches, prompts, config.k_cross):
            inter.append((patch_idx, m + prompt_idx))
            inter.append((m + prompt_idx, patch_idx))

    return MultiModalGraph(
        patch_features=patches,
        prompt_features=prompts,
        intra_edges=tuple(intra),
        inter_edges=tuple(inter),
    )
