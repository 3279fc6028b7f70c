"""Graph convolution stacks: encoder, decoder, readout, projection head.

Propagation follows the renormalized rule: with self-loops already in the
edge list, messages are weighted 1/sqrt(deg(dst) * deg(src)) where degrees
are in-degrees including the self-loop. The edge-list implementation runs
on CSR kernels; tests compare it against an explicit dense build.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import ConfigError, ShapeError
from .graphs import PatchGraph, StemParams, apply_node_mask, batch_knn
from .tensor import Tensor, l2_normalize

__all__ = [
    "DecoderParams",
    "EncoderParams",
    "GcnLayerParams",
    "ProjectionParams",
    "PropagationOperator",
    "decode",
    "encode",
    "gcn_layer",
    "graph_propagate",
    "init_decoder",
    "init_encoder",
    "init_projection",
    "init_stem",
    "project",
    "readout",
]


class PropagationOperator:
    """Normalized adjacency D^-1/2 (A) D^-1/2 over an explicit edge list.

    The edge list must already contain self-loops (knn_graph appends
    them), which is what makes every degree strictly positive.
    """

    def __init__(self, edges: np.ndarray, n: int):
        edges = np.asarray(edges, dtype=np.int64)
        if edges.ndim != 2 or edges.shape[1] != 2:
            raise ShapeError(f"edges must be (E, 2), got shape {edges.shape}")
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise ShapeError(f"edge indices must lie in [0, {n}), got range "
                             f"[{edges.min()}, {edges.max()}]")
        deg = np.bincount(edges[:, 1], minlength=n).astype(np.float64)
        if np.any(deg == 0):
            missing = int(np.flatnonzero(deg == 0)[0])
            raise ShapeError(f"node {missing} has no incoming edge; self-loops are required")
        dinv = 1.0 / np.sqrt(deg)
        coeff = dinv[edges[:, 1]] * dinv[edges[:, 0]]
        self.n = n
        self.mat = sparse.csr_matrix((coeff, (edges[:, 1], edges[:, 0])), shape=(n, n))
        self.mat_t = self.mat.T.tocsr()


def graph_propagate(h: Tensor, op: PropagationOperator) -> Tensor:
    """Multiply node features by the normalized adjacency (a linear map,
    so the backward pass is the transposed multiply)."""
    if h.ndim != 2 or h.shape[0] != op.n:
        raise ShapeError(f"features shape {h.shape} does not match {op.n} nodes")

    def backward(g, acc):
        acc(h, op.mat_t @ g)

    return Tensor._node(op.mat @ h.data, (h,), backward, "propagate")


@dataclass
class GcnLayerParams:
    weight: Tensor  # (in_dim, out_dim)
    bias: Tensor | None = None
    activation: str = "relu"  # "relu" or "identity"

    def __post_init__(self):
        if self.activation not in ("relu", "identity"):
            raise ConfigError(f"unknown activation {self.activation!r}")


def gcn_layer(h: Tensor, op: PropagationOperator, params: GcnLayerParams) -> Tensor:
    """One graph convolution: activation(propagate(h) @ weight + bias)."""
    if h.shape[1] != params.weight.shape[0]:
        raise ShapeError(
            f"layer expects input dim {params.weight.shape[0]}, features have {h.shape[1]}"
        )
    out = graph_propagate(h, op) @ params.weight
    if params.bias is not None:
        out = out + params.bias
    if params.activation == "relu":
        out = out.relu()
    return out


@dataclass
class EncoderParams:
    layers: list[GcnLayerParams]
    residual: bool = True
    recompute_knn: bool = False

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("encoder needs at least one layer")


@dataclass
class DecoderParams:
    layers: list[GcnLayerParams]
    mask_token: Tensor | None = None
    remask: bool = True

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("decoder needs at least one layer")


@dataclass
class ProjectionParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def _blocks(graph: PatchGraph) -> tuple[int, ...]:
    return graph.blocks if graph.blocks is not None else (graph.n,)


def encode(graph: PatchGraph, params: EncoderParams) -> Tensor:
    """Run the GCN encoder over the graph's (embedded) features.

    Residual connections apply wherever a layer preserves width. With
    recompute_knn on, edges are rebuilt from the current features before
    every layer instead of once per forward pass.
    """
    if not isinstance(graph.x, Tensor):
        raise ShapeError("encode expects embedded features; run embed_nodes first")
    if graph.edges is None:
        raise ShapeError("graph has no edges; run knn_graph first")
    h = graph.x
    op = PropagationOperator(graph.edges, graph.n)
    for layer in params.layers:
        if params.recompute_knn:
            if graph.k is None:
                raise ConfigError("recompute_knn needs the graph's k")
            edges = batch_knn(h.data, _blocks(graph), graph.k)
            op = PropagationOperator(edges, graph.n)
        out = gcn_layer(h, op, layer)
        if params.residual and out.shape == h.shape:
            out = out + h
        h = out
    return h


def decode(
    h: Tensor,
    graph: PatchGraph,
    v_idx: np.ndarray | None,
    params: DecoderParams,
) -> Tensor:
    """Map encoded features back to patch-feature space over the same
    edges. When remask is on, the masked rows are swapped for the
    decoder's own token first, so reconstruction cannot copy the
    encoder's output at those nodes."""
    if graph.edges is None:
        raise ShapeError("graph has no edges; run knn_graph first")
    if params.remask and v_idx is not None and v_idx.size:
        h = apply_node_mask(h, v_idx, params.mask_token)
    op = PropagationOperator(graph.edges, graph.n)
    for layer in params.layers:
        h = gcn_layer(h, op, layer)
    return h


def readout(h: Tensor, nodes_per_graph: int | None = None) -> Tensor:
    """Mean-pool node features into one row per graph.

    Without nodes_per_graph the whole tensor is one graph and the result
    is (1, M); with it, rows are grouped into equal consecutive blocks.
    """
    if h.ndim != 2 or h.shape[0] == 0:
        raise ShapeError(f"readout needs non-empty (N, M) features, got {h.shape}")
    n, m = h.shape
    if nodes_per_graph is None:
        return h.mean(axis=0).reshape(1, m)
    if nodes_per_graph <= 0 or n % nodes_per_graph:
        raise ShapeError(f"{n} rows do not split into blocks of {nodes_per_graph}")
    return h.reshape(n // nodes_per_graph, nodes_per_graph, m).mean(axis=1)


def project(h: Tensor, params: ProjectionParams) -> Tensor:
    """Two-layer head onto the unit sphere (rows have norm 1)."""
    hidden = (h @ params.w1 + params.b1).relu()
    return l2_normalize(hidden @ params.w2 + params.b2)


# ----------------------------------------------------------------------
# initializers


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, scale, size=(fan_in, fan_out))


def init_stem(
    patch_dim: int, feature_dim: int, grid_cells: int, rng: np.random.Generator
) -> StemParams:
    return StemParams(
        weight=Tensor(_glorot(rng, patch_dim, feature_dim), requires_grad=True),
        bias=Tensor(np.zeros(feature_dim), requires_grad=True),
        pos=Tensor(0.02 * rng.normal(size=(grid_cells, feature_dim)), requires_grad=True),
    )


def init_gcn_layer(
    in_dim: int,
    out_dim: int,
    rng: np.random.Generator,
    activation: str = "relu",
    bias: bool = True,
) -> GcnLayerParams:
    return GcnLayerParams(
        weight=Tensor(_glorot(rng, in_dim, out_dim), requires_grad=True),
        bias=Tensor(np.zeros(out_dim), requires_grad=True) if bias else None,
        activation=activation,
    )


def init_encoder(
    feature_dim: int,
    depth: int,
    rng: np.random.Generator,
    residual: bool = True,
    recompute_knn: bool = False,
) -> EncoderParams:
    if depth < 1:
        raise ConfigError(f"encoder depth must be >= 1, got {depth}")
    layers = [init_gcn_layer(feature_dim, feature_dim, rng) for _ in range(depth)]
    return EncoderParams(layers=layers, residual=residual, recompute_knn=recompute_knn)


def init_decoder(
    feature_dim: int,
    out_dim: int,
    depth: int,
    rng: np.random.Generator,
    remask: bool = True,
    with_token: bool = True,
) -> DecoderParams:
    if depth < 1:
        raise ConfigError(f"decoder depth must be >= 1, got {depth}")
    layers = [init_gcn_layer(feature_dim, feature_dim, rng) for _ in range(depth - 1)]
    layers.append(init_gcn_layer(feature_dim, out_dim, rng, activation="identity"))
    token = (
        Tensor(0.02 * rng.normal(size=feature_dim), requires_grad=True) if with_token else None
    )
    return DecoderParams(layers=layers, mask_token=token, remask=remask)


def init_projection(feature_dim: int, rng: np.random.Generator) -> ProjectionParams:
    return ProjectionParams(
        w1=Tensor(_glorot(rng, feature_dim, feature_dim), requires_grad=True),
        b1=Tensor(np.zeros(feature_dim), requires_grad=True),
        w2=Tensor(_glorot(rng, feature_dim, feature_dim), requires_grad=True),
        b2=Tensor(np.zeros(feature_dim), requires_grad=True),
    )
