"""
Attention graph (EWR edge weights + edge regularization) and the
feature-based neighboring graph with centrality indices
"""
from typing import Dict, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from . import numerics as nx
from .exceptions import ContractError, ShapeError
from .numerics import Tensor
from .utils import node_count, round_half_up


class SemanticField:
    """Per-head EWR outputs, one value in (0, 1) per node"""

    def __init__(self, per_head: Sequence[Tensor], grid: Tuple[int, int]):
        self.per_head = list(per_head)
        self.grid = grid
        n = node_count(grid)
        # S x N, stacked so the regularizer sees every head at once
        self.values = nx.concat([nx.reshape(f, (1, n)) for f in self.per_head], axis=0)

    @property
    def heads(self) -> int:
        return len(self.per_head)

    @property
    def node_count(self) -> int:
        return node_count(self.grid)

    def row_of(self, node: int) -> int:
        """y_i = i div W"""
        return node // self.grid[0]

    def __repr__(self):
        return f"SemanticField(heads={self.heads}, grid={self.grid})"


class AttentionGraph:
    """Per-head N x N modulation matrices E^s"""

    def __init__(self, matrices: Sequence[Tensor]):
        self.matrices = list(matrices)

    @property
    def heads(self) -> int:
        return len(self.matrices)

    @property
    def node_count(self) -> int:
        return self.matrices[0].shape[0] if self.matrices else 0

    def as_array(self) -> np.ndarray:
        """S x N x N copy of the edge weights"""
        return np.stack([m.data for m in self.matrices])

    def __getitem__(self, head: int) -> Tensor:
        return self.matrices[head]


class CentralityState:
    """q-NN neighbor sets, in-degrees and bounded centrality indices of one layer"""

    def __init__(self, neighbors: np.ndarray, occurrences: np.ndarray, indices: np.ndarray, bound: int):
        self.neighbors = neighbors
        self.occurrences = occurrences
        self.indices = indices
        self.bound = bound

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    def edges(self) -> Tuple[np.ndarray, np.ndarray]:
        """Directed edge list (i -> j for j in N(v_i)) as source/target arrays"""
        n, k = self.neighbors.shape
        return np.repeat(np.arange(n), k), self.neighbors.reshape(-1)


def nodes_to_grid(nodes: Tensor, grid: Tuple[int, int]) -> Tensor:
    """Row-major N x C node matrix -> C x H x W feature map"""
    width, height = grid
    if nodes.shape[0] != width * height:
        raise ShapeError(f"grid {width}x{height} needs {width * height} nodes, got {nodes.shape[0]}")
    return nx.reshape(nx.transpose(nodes), (nodes.shape[1], height, width))


# ---------------------------------------------------------------- attention graph

def ewr_forward(nodes: Tensor, grid: Tuple[int, int], heads: int,
                ewr_params: Sequence[Dict[str, Tensor]]) -> SemanticField:
    """Head-specific edge weight regression: conv3x3 -> ReLU -> conv3x3 -> sigmoid"""
    if len(ewr_params) != heads:
        raise ContractError(f"EWR has {len(ewr_params)} heads of parameters, {heads} requested")
    feature_map = nodes_to_grid(nodes, grid)
    n = node_count(grid)

    per_head = []
    for params in ewr_params:
        hidden = nx.relu(nx.conv2d_3x3(feature_map, params["conv1.weight"], params["conv1.bias"]))
        score = nx.conv2d_3x3(hidden, params["conv2.weight"], params["conv2.bias"])
        per_head.append(nx.sigmoid(nx.reshape(score, (n,))))
    return SemanticField(per_head, grid)


def build_attention_graph(field: SemanticField) -> AttentionGraph:
    """E^s_ij = |f^s_i - f^s_j|"""
    return AttentionGraph([nx.pairwise_abs_diff(f) for f in field.per_head])


def edge_regularization(field: SemanticField) -> Tensor:
    """Mean squared deviation of each head's field from its grid-row mean"""
    width, height = field.grid
    rows = nx.reshape(field.values, (field.heads * height, width))
    return nx.row_variance(rows)


# ---------------------------------------------------------------- neighboring graph

def neighbor_count(n: int, q: float) -> int:
    """k = max(1, round(q * N)), never more than the N - 1 other nodes"""
    return min(max(1, round_half_up(q * n)), n - 1)


def knn_neighbors(nodes, q: float) -> np.ndarray:
    """Exact Euclidean q-NN of every node (self excluded), ties by ascending index"""
    features = nodes.data if isinstance(nodes, Tensor) else np.asarray(nodes, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError(f"knn_neighbors expects N x C features, got shape {features.shape}")
    n = features.shape[0]
    if n < 2:
        raise ContractError(f"knn_neighbors needs at least 2 nodes, got {n}")
    if not 0.0 < q <= 1.0:
        raise ContractError(f"neighbor fraction q must lie in (0, 1], got {q}")

    k = neighbor_count(n, q)
    distances = cdist(features, features, metric="euclidean")
    np.fill_diagonal(distances, np.inf)
    # stable sort keeps equal distances in index order
    order = np.argsort(distances, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def centrality_indices(neighbors: np.ndarray, m: int) -> Tuple[np.ndarray, np.ndarray]:
    """In-degree of every node, then floor-scaled into [0, m] when it exceeds m"""
    if m < 1:
        raise ContractError(f"in-degree bound m must be >= 1, got {m}")
    n = neighbors.shape[0]
    occurrences = np.bincount(neighbors.reshape(-1), minlength=n).astype(np.int64)
    peak = int(occurrences.max()) if occurrences.size else 0
    if peak <= m:
        return occurrences, occurrences.copy()
    return occurrences, (occurrences * m) // peak


def build_centrality(nodes, q: float, m: int) -> CentralityState:
    """knn_neighbors followed by centrality_indices"""
    neighbors = knn_neighbors(nodes, q)
    return centrality_from_neighbors(neighbors, m)


def centrality_from_neighbors(neighbors: np.ndarray, m: int) -> CentralityState:
    occurrences, indices = centrality_indices(neighbors, m)
    return CentralityState(neighbors, occurrences, indices, m)


def centrality_embed(nodes: Tensor, indices: np.ndarray, bank: Tensor) -> Tensor:
    """v_hat_i = v_i + p_{idx_i}"""
    return nx.embed_add(nodes, indices, bank)
