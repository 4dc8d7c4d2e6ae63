"""
Skeleton graphs, partitioned adjacency, graph convolution and hand pooling
"""

import json
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

logger = logging.getLogger(__name__)

LAYOUT_PATH = Path(__file__).parent / "assets" / "skeleton_layout.json"
LAYOUT_SCHEMA_VERSION = 1
NORMALIZATION_MODES = ("symmetric", "asymmetric")
# self, centripetal, centrifugal
NUM_PARTITIONS = 3


def load_skeleton_layout(path: Optional[Path] = None) -> Dict[str, Any]:
    path = Path(path) if path else LAYOUT_PATH
    layout = json.loads(path.read_text())
    if layout.get("schema_version") != LAYOUT_SCHEMA_VERSION:
        raise ValueError(f"Unsupported skeleton layout version in {path}: {layout.get('schema_version')!r}")
    return layout


@dataclass(frozen=True)
class SkeletonGraph:
    """Joints, undirected edges, root-relative partitions and pooling clusters"""
    joint_names: Tuple[str, ...]
    edges: Tuple[Tuple[int, int], ...]
    root: int
    clusters: Tuple[Tuple[int, ...], ...]

    @property
    def num_nodes(self) -> int:
        return len(self.joint_names)

    def hop_distance(self) -> np.ndarray:
        """Breadth-first hop count from the root; unreachable nodes get -1"""
        neighbors: List[List[int]] = [[] for _ in range(self.num_nodes)]
        for i, j in self.edges:
            neighbors[i].append(j)
            neighbors[j].append(i)
        hops = np.full(self.num_nodes, -1, dtype=np.int64)
        hops[self.root] = 0
        queue = deque([self.root])
        while queue:
            node = queue.popleft()
            for other in neighbors[node]:
                if hops[other] < 0:
                    hops[other] = hops[node] + 1
                    queue.append(other)
        return hops

    def is_connected(self) -> bool:
        return bool(np.all(self.hop_distance() >= 0))

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    def partitions(self) -> np.ndarray:
        """
        Split identity + edges into (self, centripetal, centrifugal) matrices.

        Row i of the centripetal matrix marks neighbors closer to the root than
        i; centrifugal marks neighbors farther away; equal-hop neighbors and
        self-loops form the self partition.
        """
        hops = self.hop_distance()
        n = self.num_nodes
        parts = np.zeros((NUM_PARTITIONS, n, n))
        parts[0] += np.eye(n)
        for i, j in self.edges:
            for a, b in ((i, j), (j, i)):
                if hops[b] == hops[a]:
                    parts[0, a, b] = 1.0
                elif hops[b] < hops[a]:
                    parts[1, a, b] = 1.0
                else:
                    parts[2, a, b] = 1.0
        return parts


def _graph_from_layout(section: Dict[str, Any], with_clusters: bool) -> SkeletonGraph:
    edges = [tuple(e) for e in section["bones"]] + [tuple(e) for e in section.get("symmetric", [])]
    names = tuple(section["joints"])
    if with_clusters:
        clusters = tuple(tuple(c) for c in section["clusters"].values())
    else:
        clusters = (tuple(range(len(names))),)
    graph = SkeletonGraph(joint_names=names, edges=tuple(edges), root=section["root"], clusters=clusters)
    if not graph.is_connected():
        raise ValueError("skeleton graph must be connected")
    members = sorted(j for c in graph.clusters for j in c)
    if members != list(range(graph.num_nodes)):
        raise ValueError("every joint must belong to exactly one pooling cluster")
    return graph


def build_hand_graph(layout: Optional[Dict[str, Any]] = None) -> SkeletonGraph:
    layout = layout or load_skeleton_layout()
    return _graph_from_layout(layout["hand"], with_clusters=True)


def build_arm_graph(layout: Optional[Dict[str, Any]] = None) -> SkeletonGraph:
    layout = layout or load_skeleton_layout()
    return _graph_from_layout(layout["arms"], with_clusters=False)


def normalize_adjacency(adjacency: np.ndarray, mode: str = "symmetric") -> np.ndarray:
    """
    Degree-normalize one (N, N) matrix or a stack (P, N, N).

    symmetric:  D^-1/2 A D^-1/2
    asymmetric: D^-1/2 A D^+1/2
    Row degrees are used; isolated rows stay zero.
    """
    if mode not in NORMALIZATION_MODES:
        raise ValueError(f"unknown normalization mode {mode!r}")
    a = np.asarray(adjacency, dtype=np.float64)
    degree = a.sum(axis=-1)
    inv_sqrt = np.where(degree > 0, 1.0 / np.sqrt(np.where(degree > 0, degree, 1.0)), 0.0)
    right = inv_sqrt if mode == "symmetric" else np.sqrt(degree)
    return inv_sqrt[..., :, None] * a * right[..., None, :]


def gcn_layer(features: torch.Tensor, adjacency: torch.Tensor, weights: torch.Tensor,
              activation: Optional[Callable[[torch.Tensor], torch.Tensor]] = None) -> torch.Tensor:
    """
    f_out = act(sum_p A_p f_in W_p)

    features (..., N, C_in); adjacency (P, N, N), already normalized;
    weights (P, C_in, C_out).
    """
    if adjacency.dim() == 2:
        adjacency = adjacency.unsqueeze(0)
    if weights.dim() == 2:
        weights = weights.unsqueeze(0)
    if adjacency.shape[0] != weights.shape[0]:
        raise ValueError(f"{adjacency.shape[0]} partitions but {weights.shape[0]} weight maps")
    if features.shape[-2] != adjacency.shape[-1]:
        raise ValueError(f"features have {features.shape[-2]} nodes, graph has {adjacency.shape[-1]}")
    if features.shape[-1] != weights.shape[-2]:
        raise ValueError(f"features have {features.shape[-1]} channels, weights expect {weights.shape[-2]}")

    out = torch.einsum("pnm,...mc,pcd->...nd", adjacency, features, weights)
    return activation(out) if activation is not None else out


class GraphConv(nn.Module):
    """One partitioned graph convolution over a fixed skeleton"""

    def __init__(self, in_channels: int, out_channels: int, graph: SkeletonGraph,
                 normalization_mode: str = "symmetric", bias: bool = True,
                 activation: bool = True):
        super().__init__()
        adjacency = normalize_adjacency(graph.partitions(), normalization_mode)
        self.register_buffer("adjacency", torch.tensor(adjacency, dtype=torch.float32))
        self.weight = nn.Parameter(torch.empty(NUM_PARTITIONS, in_channels, out_channels))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        self.activation = activation
        for p in range(NUM_PARTITIONS):
            nn.init.xavier_uniform_(self.weight.data[p])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = gcn_layer(x, self.adjacency.to(x.dtype), self.weight)
        if self.bias is not None:
            out = out + self.bias
        return torch.relu(out) if self.activation else out


def pool_hand(features: torch.Tensor, clusters: Sequence[Sequence[int]]) -> torch.Tensor:
    """Max within each cluster (21 -> 6), then max across clusters (6 -> 1)"""
    per_cluster = [features[..., list(c), :].amax(dim=-2) for c in clusters]
    return torch.stack(per_cluster, dim=-2).amax(dim=-2)
