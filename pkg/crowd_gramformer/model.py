"""
Gramformer model: patch encoder, graph-modulated transformer layers,
density regression head, losses and the two attention baselines
"""
import math
from collections import OrderedDict
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .config import LAYER_NORM_EPS, ModelConfig
from .exceptions import ConfigError, ContractError, ShapeError
from .graphs import (AttentionGraph, CentralityState, build_attention_graph, centrality_embed,
                     centrality_from_neighbors, edge_regularization, ewr_forward, knn_neighbors,
                     nodes_to_grid)
from .numerics import Tensor


class ForwardTrace:
    """Everything a forward pass leaves behind for diagnostics"""

    def __init__(self, grid: Tuple[int, int]):
        self.grid = grid
        self.attention: List[np.ndarray] = []    # per layer, S x N x N
        self.features: List[np.ndarray] = []     # per layer input V^l
        self.neighbors: List[Optional[np.ndarray]] = []
        self.indices: List[Optional[np.ndarray]] = []
        self.graph: Optional[np.ndarray] = None  # E from v0, S x N x N
        self.density: Optional[np.ndarray] = None

    @property
    def layers(self) -> int:
        return len(self.attention)

    @property
    def node_count(self) -> int:
        return self.grid[0] * self.grid[1]

    def selections(self) -> List[Optional[np.ndarray]]:
        """Neighbor sets per layer, for replaying a forward with frozen selections"""
        return [None if n is None else n.copy() for n in self.neighbors]

    def record_layer(self, features: Tensor, maps: Sequence[Tensor],
                     centrality: Optional[CentralityState]):
        self.features.append(features.data.copy())
        self.attention.append(np.stack([m.data for m in maps]))
        self.neighbors.append(None if centrality is None else centrality.neighbors.copy())
        self.indices.append(None if centrality is None else centrality.indices.copy())


# ---------------------------------------------------------------- building blocks

def patch_encode(image: np.ndarray, params: Dict[str, Tensor], patch: int) -> Tuple[Tensor, Tuple[int, int]]:
    """Non-overlapping patches -> affine map -> ReLU; returns nodes and grid (W, H)"""
    pixels = np.asarray(image, dtype=np.float64)
    if pixels.ndim == 3 and pixels.shape[0] == 1:
        pixels = pixels[0]
    if pixels.ndim != 2:
        raise ShapeError(f"patch_encode expects a 1 x H x W or H x W image, got shape {np.shape(image)}")
    height, width = pixels.shape
    if height % patch or width % patch:
        raise ContractError(f"image {height}x{width} is not divisible by patch stride {patch}")

    grid = (width // patch, height // patch)
    patches = (pixels.reshape(grid[1], patch, grid[0], patch)
               .transpose(0, 2, 1, 3)
               .reshape(grid[0] * grid[1], patch * patch))
    nodes = nx.relu(nx.add_bias(nx.matmul(nx.constant(patches), params["patch.weight"]), params["patch.bias"]))
    return nodes, grid


def attention_block(nodes: Tensor, params: Dict[str, Tensor], prefix: str, heads: int,
                    modulation: Optional[AttentionGraph] = None,
                    indices: Optional[np.ndarray] = None,
                    bank: Optional[Tensor] = None,
                    edge_bias: Optional[Tensor] = None) -> Tuple[Tensor, List[Tensor]]:
    """Shared multi-head attention + W_o + residual + LayerNorm.

    Queries and keys see the centrality-modulated nodes, values see the raw
    nodes. The optional edge bias is added before the softmax, the optional
    attention graph multiplies the softmax output (no renormalization).
    """
    channels = nodes.shape[1]
    modulated = centrality_embed(nodes, indices, bank) if indices is not None else nodes
    inv_sqrt_c = 1.0 / math.sqrt(channels)

    head_outputs = []
    maps = []
    for s in range(heads):
        head = f"{prefix}.head.{s}"
        query = nx.matmul(modulated, params[f"{head}.query"])
        key = nx.matmul(modulated, params[f"{head}.key"])
        logits = nx.scale(nx.matmul(query, nx.transpose(key)), inv_sqrt_c)
        if edge_bias is not None:
            logits = nx.add(logits, edge_bias)
        attention = nx.softmax_rows(logits)
        if modulation is not None:
            attention = nx.mul(modulation[s], attention)
        value = nx.matmul(nodes, params[f"{head}.value"])
        head_outputs.append(nx.matmul(attention, value))
        maps.append(attention)

    mixed = nx.matmul(nx.concat(head_outputs, axis=1), params[f"{prefix}.out"])
    updated = nx.layer_norm(nx.add(nodes, mixed), params[f"{prefix}.norm1.gain"],
                            params[f"{prefix}.norm1.bias"], LAYER_NORM_EPS)
    return updated, maps


def modulated_attention_layer(nodes: Tensor, graph: AttentionGraph, indices: Optional[np.ndarray],
                              bank: Optional[Tensor], params: Dict[str, Tensor], prefix: str,
                              heads: int) -> Tuple[Tensor, List[Tensor]]:
    """Gramformer attention: R^s = E^s * softmax(q k^T / sqrt(C))"""
    if graph.heads != heads:
        raise ShapeError(f"attention graph has {graph.heads} heads, layer has {heads}")
    return attention_block(nodes, params, prefix, heads, modulation=graph, indices=indices, bank=bank)


def vanilla_layer(nodes: Tensor, params: Dict[str, Tensor], prefix: str, heads: int) -> Tuple[Tensor, List[Tensor]]:
    """Plain multi-head softmax attention"""
    return attention_block(nodes, params, prefix, heads)


def graphormer_edge_bias(nodes: Tensor, centrality: CentralityState, params: Dict[str, Tensor],
                         prefix: str) -> Tensor:
    """e_ij = MLP([v_i, v_j]) on q-NN edges, zero elsewhere"""
    n = nodes.shape[0]
    sources, targets = centrality.edges()
    pairs = nx.concat([nx.gather_rows(nodes, sources), nx.gather_rows(nodes, targets)], axis=1)
    hidden = nx.relu(nx.add_bias(nx.matmul(pairs, params[f"{prefix}.edge.w1"]), params[f"{prefix}.edge.b1"]))
    weights = nx.add_bias(nx.matmul(hidden, params[f"{prefix}.edge.w2"]), params[f"{prefix}.edge.b2"])
    return nx.scatter_matrix(weights, sources, targets, (n, n))


def graphormer_layer(nodes: Tensor, edge_bias: Tensor, indices: Optional[np.ndarray], bank: Optional[Tensor],
                     params: Dict[str, Tensor], prefix: str, heads: int) -> Tuple[Tensor, List[Tensor]]:
    """Graph-transformer baseline: softmax(q k^T / sqrt(C) + e)"""
    return attention_block(nodes, params, prefix, heads, indices=indices, bank=bank, edge_bias=edge_bias)


def feed_forward(nodes: Tensor, params: Dict[str, Tensor], prefix: str) -> Tensor:
    """V^{l+1} = LN(V~ + K(V~)), K = Linear(C, 2C) -> ReLU -> Linear(2C, C)"""
    hidden = nx.relu(nx.add_bias(nx.matmul(nodes, params[f"{prefix}.ffn.w1"]), params[f"{prefix}.ffn.b1"]))
    fused = nx.add_bias(nx.matmul(hidden, params[f"{prefix}.ffn.w2"]), params[f"{prefix}.ffn.b2"])
    return nx.layer_norm(nx.add(nodes, fused), params[f"{prefix}.norm2.gain"],
                         params[f"{prefix}.norm2.bias"], LAYER_NORM_EPS)


def ewr_parameters(params: Dict[str, Tensor], heads: int) -> List[Dict[str, Tensor]]:
    """Per-head EWR parameter dicts with the 'ewr.<s>.' prefix stripped"""
    views = []
    for s in range(heads):
        prefix = f"ewr.{s}."
        views.append({name[len(prefix):]: p for name, p in params.items() if name.startswith(prefix)})
    return views


def transformer_forward(v0: Tensor, grid: Tuple[int, int], config: ModelConfig, params: Dict[str, Tensor],
                        frozen: Optional[Sequence[Optional[np.ndarray]]] = None
                        ) -> Tuple[Tensor, ForwardTrace, Optional[Tensor]]:
    """Run the L layers; returns V^L, the trace and the edge regularization (or None).

    The attention graph is built once from v0 (static) or from each layer's
    input (dynamic); centrality is recomputed per layer (dynamic) or reused
    from layer 0 (static). `frozen` replays recorded neighbor sets instead
    of searching, which keeps the discrete selections fixed.
    """
    trace = ForwardTrace(grid)
    heads = config.heads
    ewr = ewr_parameters(params, heads) if config.uses_graph else None
    bank = params["centrality.bank"] if config.uses_centrality else None

    fields = []
    graph = None
    if config.uses_graph:
        field = ewr_forward(v0, grid, heads, ewr)
        graph = build_attention_graph(field)
        fields.append(field)
        trace.graph = graph.as_array()

    nodes = v0
    for layer in range(config.layers):
        prefix = f"layer.{layer}"
        if config.uses_graph and config.graph_mode == "dynamic" and layer > 0:
            field = ewr_forward(nodes, grid, heads, ewr)
            graph = build_attention_graph(field)
            fields.append(field)

        centrality = None
        if config.needs_neighbors:
            if frozen is not None and frozen[layer] is not None:
                neighbors = frozen[layer]
            elif config.centrality_mode == "static" and layer > 0:
                neighbors = trace.neighbors[0]
            else:
                neighbors = knn_neighbors(nodes, config.q)
            centrality = centrality_from_neighbors(neighbors, config.m)
        indices = centrality.indices if config.uses_centrality else None

        if config.uses_edge_bias:
            edge_bias = graphormer_edge_bias(nodes, centrality, params, prefix)
            attended, maps = graphormer_layer(nodes, edge_bias, indices, bank, params, prefix, heads)
        elif graph is not None:
            attended, maps = modulated_attention_layer(nodes, graph, indices, bank, params, prefix, heads)
        else:
            attended, maps = attention_block(nodes, params, prefix, heads, indices=indices, bank=bank)

        trace.record_layer(nodes, maps, centrality)
        nodes = feed_forward(attended, params, prefix)

    regularization = None
    if fields:
        terms = [edge_regularization(f) for f in fields]
        regularization = terms[0]
        for term in terms[1:]:
            regularization = nx.add(regularization, term)
        if len(terms) > 1:
            regularization = nx.scale(regularization, 1.0 / len(terms))
    return nodes, trace, regularization


def regression_head(nodes: Tensor, grid: Tuple[int, int], params: Dict[str, Tensor]) -> Tensor:
    """upsample2x -> conv3x3 + ReLU -> conv3x3 + ReLU -> conv1x1 -> ReLU, output 1 x 2H x 2W"""
    width, height = grid
    feature_map = nx.upsample2x(nodes_to_grid(nodes, grid))
    hidden = nx.relu(nx.conv2d_3x3(feature_map, params["head.conv1.weight"], params["head.conv1.bias"]))
    hidden = nx.relu(nx.conv2d_3x3(hidden, params["head.conv2.weight"], params["head.conv2.bias"]))

    # 1x1 convolution as a matmul over flattened positions
    pixels = nx.transpose(nx.reshape(hidden, (hidden.shape[0], 4 * width * height)))
    density = nx.add_bias(nx.matmul(pixels, params["head.conv3.weight"]), params["head.conv3.bias"])
    return nx.relu(nx.reshape(density, (1, 2 * height, 2 * width)))


# ---------------------------------------------------------------- losses

LossFn = Callable[[Tensor, np.ndarray], Tensor]
LOSSES: Dict[str, LossFn] = {}


def register_loss(name: str):
    """Decorator adding a density loss under a config-selectable name"""
    def decorator(fn: LossFn) -> LossFn:
        LOSSES[name] = fn
        return fn
    return decorator


def get_loss(name: str) -> LossFn:
    try:
        return LOSSES[name]
    except KeyError:
        raise ConfigError(f"unknown loss '{name}' (registered: {', '.join(sorted(LOSSES))})")


def _target(pred: Tensor, gt) -> np.ndarray:
    target = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if target.size != pred.size or target.shape[-2:] != pred.shape[-2:]:
        raise ShapeError(f"density loss: prediction {pred.shape} and ground truth {target.shape} differ")
    return target.reshape(pred.shape)


@register_loss("mse_count")
def density_loss(pred: Tensor, gt) -> Tensor:
    """Pixel MSE + |sum(pred) - sum(gt)| / (sum(gt) + 1)"""
    target = _target(pred, gt)
    diff = nx.sub(pred, nx.constant(target))
    mse = nx.mean_all(nx.mul(diff, diff))
    gt_count = float(target.sum())
    count_gap = nx.absolute(nx.sub(nx.sum_all(pred), nx.constant(np.array(gt_count))))
    return nx.add(mse, nx.scale(count_gap, 1.0 / (gt_count + 1.0)))


@register_loss("mse")
def pixel_mse_loss(pred: Tensor, gt) -> Tensor:
    """Pixel MSE only"""
    diff = nx.sub(pred, nx.constant(_target(pred, gt)))
    return nx.mean_all(nx.mul(diff, diff))


def total_loss(density_term: Tensor, regularization: Optional[Tensor], reg_weight: float) -> Tensor:
    """L = L_sub + lambda * Q"""
    if reg_weight < 0:
        raise ContractError(f"regularization weight must be >= 0, got {reg_weight}")
    if regularization is None:
        return density_term
    return nx.add(density_term, nx.scale(regularization, reg_weight))


# ---------------------------------------------------------------- model

class GramformerModel:
    """Parameter store plus forward pass for one architecture config"""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config.validate()
        self.params: Dict[str, Tensor] = OrderedDict()
        self._init_parameters(np.random.default_rng(seed))

    def _add(self, name: str, data: np.ndarray):
        self.params[name] = nx.parameter(data, name)

    def _init_parameters(self, rng: np.random.Generator):
        """Every variant creates the full set in this order so shared weights match across variants"""
        c = self.config.channels
        s = self.config.heads
        d = c // s
        half = c // 2
        quarter = c // 4
        patch_size = self.config.patch * self.config.patch

        def dense(fan_in: int, *shape: int) -> np.ndarray:
            return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)

        self._add("patch.weight", dense(patch_size, patch_size, c))
        self._add("patch.bias", np.zeros(c))

        for head in range(s):
            self._add(f"ewr.{head}.conv1.weight", dense(9 * c, half, c, 3, 3))
            self._add(f"ewr.{head}.conv1.bias", np.zeros(half))
            self._add(f"ewr.{head}.conv2.weight", dense(9 * half, 1, half, 3, 3))
            self._add(f"ewr.{head}.conv2.bias", np.zeros(1))

        for layer in range(self.config.layers):
            prefix = f"layer.{layer}"
            for head in range(s):
                for role in ("query", "key", "value"):
                    self._add(f"{prefix}.head.{head}.{role}", dense(c, c, d))
            self._add(f"{prefix}.out", dense(c, c, c))
            self._add(f"{prefix}.norm1.gain", np.ones(c))
            self._add(f"{prefix}.norm1.bias", np.zeros(c))
            self._add(f"{prefix}.ffn.w1", dense(c, c, 2 * c))
            self._add(f"{prefix}.ffn.b1", np.zeros(2 * c))
            self._add(f"{prefix}.ffn.w2", dense(2 * c, 2 * c, c))
            self._add(f"{prefix}.ffn.b2", np.zeros(c))
            self._add(f"{prefix}.norm2.gain", np.ones(c))
            self._add(f"{prefix}.norm2.bias", np.zeros(c))
            self._add(f"{prefix}.edge.w1", dense(2 * c, 2 * c, c))
            self._add(f"{prefix}.edge.b1", np.zeros(c))
            self._add(f"{prefix}.edge.w2", dense(c, c, 1))
            self._add(f"{prefix}.edge.b2", np.zeros(1))

        bank = rng.normal(0.0, 0.1, size=(self.config.m + 1, c))
        bank[0] = 0.0
        self._add("centrality.bank", bank)

        self._add("head.conv1.weight", dense(9 * c, half, c, 3, 3))
        self._add("head.conv1.bias", np.zeros(half))
        self._add("head.conv2.weight", dense(9 * half, quarter, half, 3, 3))
        self._add("head.conv2.bias", np.zeros(quarter))
        self._add("head.conv3.weight", 0.1 * dense(quarter, quarter, 1))
        self._add("head.conv3.bias", np.full(1, 0.01))

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for param in self.params.values():
            param.zero_grad()

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Name -> copy of every parameter array"""
        return OrderedDict((name, p.data.copy()) for name, p in self.params.items())

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        for name, array in arrays.items():
            self.params[name].data = np.array(array, dtype=np.float64)

    def output_shape(self, image_shape: Tuple[int, int]) -> Tuple[int, int]:
        """Density map size for an H x W image"""
        height, width = image_shape
        return 2 * (height // self.config.patch), 2 * (width // self.config.patch)

    def forward(self, image: np.ndarray, frozen: Optional[Sequence[Optional[np.ndarray]]] = None
                ) -> Tuple[Tensor, Optional[Tensor], ForwardTrace]:
        """Image -> (density 1 x 2H x 2W, edge regularization or None, trace)"""
        v0, grid = patch_encode(image, self.params, self.config.patch)
        nodes, trace, regularization = transformer_forward(v0, grid, self.config, self.params, frozen)
        density = regression_head(nodes, grid, self.params)
        trace.density = density.data[0].copy()
        return density, regularization, trace

    def loss(self, image: np.ndarray, gt_density: np.ndarray, loss_fn: LossFn = density_loss,
             frozen: Optional[Sequence[Optional[np.ndarray]]] = None) -> Tuple[Tensor, Tensor, Optional[Tensor], ForwardTrace]:
        """Total loss plus its parts: (total, density term, regularization, trace)"""
        density, regularization, trace = self.forward(image, frozen)
        density_term = loss_fn(density, gt_density)
        total = total_loss(density_term, regularization, self.config.reg_weight)
        return total, density_term, regularization, trace
