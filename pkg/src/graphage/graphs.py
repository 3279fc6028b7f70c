"""Patch graphs over images: construction, augmentation, and debug IO.

An image is cut into non-overlapping square patches (row-major order), each
patch becomes a node, and directed edges connect every node to its K nearest
neighbours in embedding space. Self-loops are always present so degree never
hits zero. Two stochastic augmentations operate on a built graph: node
masking (features swapped for a shared token) and edge dropping.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor

__all__ = [
    "AugmentationSpec",
    "PatchGraph",
    "StemParams",
    "apply_node_mask",
    "batch_knn",
    "check_image",
    "drop_edges",
    "dump_patch_graph",
    "embed_nodes",
    "image_augment",
    "knn_graph",
    "mask_nodes",
    "merge_graphs",
    "parse_patch_graph",
    "patchify",
]

# Rec. 601 luminance weights for the grayscale augmentation
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class AugmentationSpec:
    """Stochastic augmentation settings. All draws come from an explicit
    generator passed to each operation, so a fixed seed fixes the run."""

    mask_ratio: float = 0.5
    drop_ratio: float = 0.2
    grayscale_prob: float = 0.2
    max_shift: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio must lie in [0, 1], got {self.mask_ratio}")
        if not 0.0 <= self.drop_ratio <= 1.0:
            raise ConfigError(f"drop_ratio must lie in [0, 1], got {self.drop_ratio}")
        if not 0.0 <= self.grayscale_prob <= 1.0:
            raise ConfigError(f"grayscale_prob must lie in [0, 1], got {self.grayscale_prob}")
        if not 0.0 <= self.max_shift <= 0.5:
            raise ConfigError(f"max_shift must lie in [0, 0.5], got {self.max_shift}")

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


@dataclass
class StemParams:
    """Linear patch embedding plus a learned positional table."""

    weight: Tensor  # (patch_dim, feature_dim)
    bias: Tensor  # (feature_dim,)
    pos: Tensor  # (grid_cells, feature_dim)


@dataclass
class PatchGraph:
    """Nodes with features, directed edges, and the patch geometry.

    x is a raw float array right after patchify and a Tensor once the stem
    has embedded it. edges rows are (src, dst): src is one of dst's K
    nearest neighbours and messages flow src -> dst. Self-loops (i, i) are
    appended by knn_graph and survive every augmentation.
    """

    n: int
    x: np.ndarray | Tensor
    edges: np.ndarray | None
    patch_size: int
    positions: np.ndarray  # (n, 2) patch-grid row/col per node
    grid: tuple[int, int]  # (rows, cols) of the patch grid
    k: int | None = None
    blocks: tuple[int, ...] | None = None  # node counts per merged sub-graph

    @property
    def feature_dim(self) -> int:
        return int(self.x.shape[1])

    def x_data(self) -> np.ndarray:
        return self.x.data if isinstance(self.x, Tensor) else self.x


def check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise DataError(f"image must be (H, W, C) with C in {{1, 3}}, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise DataError("image contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise DataError("image values must lie in [0, 1]")
    return image


def patchify(image: np.ndarray, patch_size: int) -> PatchGraph:
    """Cut an (H, W, C) image into P x P patches, one node per patch.

    Patches are ordered row-major over the patch grid and flattened
    row-major over (P, P, C), so node features have length P*P*C.
    """
    image = check_image(image)
    p = int(patch_size)
    if p <= 0:
        raise ShapeError(f"patch_size must be positive, got {p}")
    h, w, c = image.shape
    if h % p or w % p:
        raise ShapeError(f"image size ({h}, {w}) not divisible by patch_size {p}")
    gh, gw = h // p, w // p
    n = gh * gw
    x = (
        image.reshape(gh, p, gw, p, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(n, p * p * c)
        .copy()
    )
    rows, cols = np.divmod(np.arange(n), gw)
    positions = np.stack([rows, cols], axis=1).astype(np.int64)
    return PatchGraph(n=n, x=x, edges=None, patch_size=p, positions=positions, grid=(gh, gw))


def embed_nodes(graph: PatchGraph, stem: StemParams) -> Tensor:
    """Project raw patch features through the stem and add the positional
    entry for each node's grid cell."""
    raw = graph.x if isinstance(graph.x, Tensor) else Tensor(graph.x)
    if raw.shape[1] != stem.weight.shape[0]:
        raise ShapeError(
            f"stem expects patch dim {stem.weight.shape[0]}, graph has {raw.shape[1]}"
        )
    gh, gw = graph.grid
    pos_idx = graph.positions[:, 0] * gw + graph.positions[:, 1]
    if pos_idx.max() >= stem.pos.shape[0]:
        raise ShapeError(
            f"positional table holds {stem.pos.shape[0]} cells, node needs {int(pos_idx.max())}"
        )
    return raw @ stem.weight + stem.bias + stem.pos[pos_idx]


def knn_graph(x: np.ndarray, k: int) -> np.ndarray:
    """Directed K-nearest-neighbour edges by Euclidean distance.

    Returns an (E, 2) int64 array of (src, dst) pairs: K neighbour edges
    per node (ties broken toward the lower index) followed by one
    self-loop per node.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"knn_graph needs (N, M) features, got shape {x.shape}")
    n = x.shape[0]
    k = int(k)
    if k < 1:
        raise ShapeError(f"k must be >= 1, got {k}")
    if k >= n:
        raise ShapeError(f"k={k} needs at least k+1 nodes, graph has {n}")
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, np.inf)  # a node is never its own neighbour
    # stable sort keeps equal distances in index order, which is the tie rule
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    dst = np.repeat(np.arange(n, dtype=np.int64), k)
    src = order.astype(np.int64).reshape(-1)
    loops = np.arange(n, dtype=np.int64)
    edges = np.concatenate(
        [np.stack([src, dst], axis=1), np.stack([loops, loops], axis=1)], axis=0
    )
    return edges


def batch_knn(x: np.ndarray, sizes: Sequence[int], k: int) -> np.ndarray:
    """Per-block kNN over a stacked feature matrix, indices offset globally."""
    chunks = []
    offset = 0
    for size in sizes:
        chunks.append(knn_graph(x[offset : offset + size], k) + offset)
        offset += size
    if offset != x.shape[0]:
        raise ShapeError(f"sizes sum to {offset}, features have {x.shape[0]} rows")
    return np.concatenate(chunks, axis=0)


def choose_mask_indices(n: int, mask_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Pick round(r*N) node indices to mask, at least one when r > 0."""
    if n <= 0:
        raise ShapeError("cannot mask an empty graph")
    count = int(np.floor(mask_ratio * n + 0.5))
    if mask_ratio > 0.0:
        count = max(count, 1)
    count = min(count, n)
    if count == 0:
        return np.empty(0, dtype=np.int64)
    return np.sort(rng.choice(n, size=count, replace=False)).astype(np.int64)


def apply_node_mask(x: Tensor, v_idx: np.ndarray, mask_token: Tensor | None) -> Tensor:
    """Replace the rows listed in v_idx with the shared mask token
    (or zeros when no token is given). Differentiable in x and the token."""
    n, m = x.shape
    if v_idx.size == 0:
        return x
    keep = np.ones((n, m))
    keep[v_idx] = 0.0
    masked = x * Tensor(keep)
    if mask_token is None:
        return masked
    if mask_token.shape != (m,):
        raise ShapeError(f"mask token shape {mask_token.shape} does not match feature dim {m}")
    indicator = np.zeros((n, 1))
    indicator[v_idx] = 1.0
    return masked + Tensor(indicator) @ mask_token.reshape(1, m)


def mask_nodes(
    graph: PatchGraph,
    spec: AugmentationSpec,
    rng: np.random.Generator,
    mask_token: Tensor | None = None,
) -> tuple[PatchGraph, np.ndarray]:
    """Mask a random subset of nodes; edges are untouched.

    Returns the masked graph and the sorted masked-node indices.
    """
    v_idx = choose_mask_indices(graph.n, spec.mask_ratio, rng)
    x = graph.x if isinstance(graph.x, Tensor) else Tensor(graph.x)
    masked = apply_node_mask(x, v_idx, mask_token)
    return dataclasses.replace(graph, x=masked), v_idx


def drop_edges(
    graph: PatchGraph, spec: AugmentationSpec, rng: np.random.Generator
) -> PatchGraph:
    """Remove each non-self-loop edge independently with probability
    drop_ratio. Self-loops always survive, so no node is ever isolated."""
    if graph.edges is None:
        raise ShapeError("graph has no edges to drop; run knn_graph first")
    edges = graph.edges
    self_loop = edges[:, 0] == edges[:, 1]
    keep = self_loop.copy()
    non_self = ~self_loop
    if spec.drop_ratio <= 0.0:
        keep[:] = True
    else:
        draws = rng.random(int(non_self.sum()))
        keep[non_self] = draws >= spec.drop_ratio
    return dataclasses.replace(graph, edges=edges[keep])


def image_augment(
    image: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator
) -> np.ndarray:
    """Random grayscale followed by a random translation with edge
    replication. Zero probability and zero shift give back the input
    bit-for-bit."""
    image = check_image(image)
    out = image
    if spec.grayscale_prob > 0.0 and rng.random() < spec.grayscale_prob:
        if image.shape[2] == 3:
            luma = out @ _LUMA
            out = np.repeat(luma[:, :, None], 3, axis=2)
        # single-channel input is already gray
    h, w, _ = out.shape
    span = int(np.floor(spec.max_shift * min(h, w)))
    if span > 0:
        dy = int(rng.integers(-span, span + 1))
        dx = int(rng.integers(-span, span + 1))
        if dy or dx:
            padded = np.pad(out, ((abs(dy), abs(dy)), (abs(dx), abs(dx)), (0, 0)), mode="edge")
            out = padded[abs(dy) - dy : abs(dy) - dy + h, abs(dx) - dx : abs(dx) - dx + w]
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0))


def merge_graphs(graphs: Sequence[PatchGraph]) -> PatchGraph:
    """Disjoint union of raw patch graphs for batched processing."""
    if not graphs:
        raise ShapeError("merge_graphs needs at least one graph")
    first = graphs[0]
    for g in graphs[1:]:
        if g.patch_size != first.patch_size or g.grid != first.grid:
            raise ShapeError("merged graphs must share patch size and grid")
        if g.feature_dim != first.feature_dim:
            raise ShapeError("merged graphs must share feature dim")
    x = np.concatenate([g.x_data() for g in graphs], axis=0)
    positions = np.concatenate([g.positions for g in graphs], axis=0)
    return PatchGraph(
        n=sum(g.n for g in graphs),
        x=x,
        edges=None,
        patch_size=first.patch_size,
        positions=positions,
        grid=first.grid,
        k=first.k,
        blocks=tuple(g.n for g in graphs),
    )


def dump_patch_graph(graph: PatchGraph, fh: IO[str]) -> None:
    """Text dump: header "N M K P", one feature row per node, then one
    "src dst" pair per edge. Used by debugging tools and test fixtures."""
    k = graph.k if graph.k is not None else 0
    x = graph.x_data()
    fh.write(f"{graph.n} {graph.feature_dim} {k} {graph.patch_size}\n")
    for row in x:
        fh.write(" ".join(repr(float(v)) for v in row) + "\n")
    if graph.edges is not None:
        for src, dst in graph.edges:
            fh.write(f"{int(src)} {int(dst)}\n")


def parse_patch_graph(fh: IO[str]) -> PatchGraph:
    """Inverse of dump_patch_graph. Grid geometry collapses to one row."""
    header = fh.readline().split()
    if len(header) != 4:
        raise DataError(f"patch-graph header needs 4 fields, got {header!r}")
    n, m, k, p = (int(v) for v in header)
    x = np.empty((n, m))
    for i in range(n):
        parts = fh.readline().split()
        if len(parts) != m:
            raise DataError(f"feature row {i} has {len(parts)} values, expected {m}")
        x[i] = [float(v) for v in parts]
    edge_rows = []
    for line in fh:
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2:
            raise DataError(f"edge row needs 2 indices, got {parts!r}")
        edge_rows.append((int(parts[0]), int(parts[1])))
    edges = np.asarray(edge_rows, dtype=np.int64).reshape(-1, 2) if edge_rows else None
    positions = np.stack([np.zeros(n, dtype=np.int64), np.arange(n, dtype=np.int64)], axis=1)
    return PatchGraph(
        n=n, x=x, edges=edges, patch_size=p, positions=positions, grid=(1, n), k=k or None
    )
