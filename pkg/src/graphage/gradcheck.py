"""Finite-difference verification, from single primitives up to the
composed masking-encoding-decoding loss with its contrastive term.

Every check compares backward() output against central differences on
seeded instances and reports the worst relative error. The composed
check freezes the graph topology and the target-side projections, so
the difference quotient measures exactly what backpropagation computes.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .graphs import PatchGraph, StemParams, apply_node_mask, batch_knn, embed_nodes
from .nets import (
    DecoderParams,
    EncoderParams,
    GcnLayerParams,
    PropagationOperator,
    ProjectionParams,
    decode,
    encode,
    graph_propagate,
    project,
    readout,
)
from .tensor import Tensor, concat, cosine_similarity, grad_check, l2_normalize, softmax
from .training import LossWeights, NegativeQueue, contrastive_loss, joint_loss, sce_loss

__all__ = ["CheckResult", "GradCheckReport", "run_gradcheck"]

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float


@dataclass
class GradCheckReport:
    results: list[CheckResult]
    tolerance: float = TOLERANCE

    @property
    def worst(self) -> float:
        return max((r.max_rel_error for r in self.results), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def lines(self) -> list[str]:
        width = max(len(r.name) for r in self.results)
        out = [f"{r.name:<{width}}  {r.max_rel_error:.3e}" for r in self.results]
        verdict = "PASS" if self.passed else "FAIL"
        out.append(f"worst {self.worst:.3e} vs tolerance {self.tolerance:.1e}: {verdict}")
        return out


def _primitive_cases(rng: np.random.Generator):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    m = rng.normal(size=(4, 3))
    v = rng.normal(size=4)
    pos = np.abs(rng.normal(size=(3, 4))) + 0.5
    idx = np.array([2, 0, 2])  # repeated row: backward must scatter-add
    return {
        "add": (lambda t: (t + Tensor(b)).sum(), a),
        "add_broadcast_row": (lambda t: (Tensor(a) + t).sum(), v),
        "sub": (lambda t: (t - Tensor(b)).sum(), a),
        "mul": (lambda t: (t * Tensor(b)).sum(), a),
        "scalar_mul": (lambda t: (2.5 * t).sum(), a),
        "neg": (lambda t: (-t).sum(), a),
        "matmul_left": (lambda t: (t @ Tensor(m)).sum(), a),
        "matmul_right": (lambda t: (Tensor(a) @ t).sum(), m),
        "pow2": (lambda t: t.pow(2.0).sum(), a),
        "pow3": (lambda t: t.pow(3.0).sum(), a),
        "pow_fractional": (lambda t: t.pow(1.5).sum(), pos),
        "relu": (lambda t: t.relu().sum(), a),
        "exp": (lambda t: t.exp().sum(), a),
        "log": (lambda t: t.log().sum(), pos),
        "sum_axis0": (lambda t: t.sum(axis=0).sum(), a),
        "mean_axis1": (lambda t: t.mean(axis=1).sum(), a),
        "mean_all": (lambda t: t.mean(), a),
        "transpose": (lambda t: (t.T @ Tensor(a)).sum(), a),
        "reshape": (lambda t: t.reshape(4, 3).sum(axis=0).pow(2.0).sum(), a),
        "getitem_rows": (lambda t: t[idx].sum(), a),
        "getitem_slice": (lambda t: t[:, 1:3].pow(2.0).sum(), a),
        "concat": (lambda t: concat([t, Tensor(b)], axis=1).pow(2.0).sum(), a),
        "softmax": (lambda t: (softmax(t, axis=-1) * Tensor(b)).sum(), a),
        "l2_normalize": (lambda t: (l2_normalize(t) * Tensor(b)).sum(), a),
        "cosine": (lambda t: cosine_similarity(t, Tensor(b)).sum(), a),
    }


def _check_primitives(seeds: int, eps: float) -> list[CheckResult]:
    worst: dict[str, float] = {}
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        for name, (f, point) in _primitive_cases(rng).items():
            err = grad_check(f, point, eps=eps)
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(f"primitive.{k}", v) for k, v in sorted(worst.items())]


def _check_propagation(seeds: int, eps: float) -> list[CheckResult]:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(1000 + seed)
        edges = batch_knn(rng.normal(size=(6, 3)), (6,), 2)
        op = PropagationOperator(edges, 6)
        h = rng.normal(size=(6, 4))
        err = grad_check(lambda t: graph_propagate(t, op).pow(2.0).sum(), h, eps=eps)
        worst = max(worst, err)
    return [CheckResult("graph.propagate", worst)]


def _composed_loss(params: dict[str, Tensor], fixed: dict) -> Tensor:
    """The full online branch: embed, mask, encode, decode, pool,
    project, then the joint loss against a frozen target view."""
    graph: PatchGraph = fixed["graph"]
    v_idx = fixed["v_idx"]

    stem = StemParams(params["stem.weight"], params["stem.bias"], params["stem.pos"])
    x = embed_nodes(graph, stem)
    masked = apply_node_mask(x, v_idx, params["mask_token"])
    view = dataclasses.replace(graph, x=masked)

    encoder = EncoderParams(
        layers=[
            GcnLayerParams(params["enc.0.weight"], params["enc.0.bias"], "relu"),
            GcnLayerParams(params["enc.1.weight"], params["enc.1.bias"], "relu"),
        ],
        residual=True,
    )
    decoder = DecoderParams(
        layers=[GcnLayerParams(params["dec.0.weight"], params["dec.0.bias"], "identity")],
        mask_token=params["dec.mask_token"],
        remask=True,
    )
    projection = ProjectionParams(
        w1=params["proj.w1"], b1=params["proj.b1"],
        w2=params["proj.w2"], b2=params["proj.b2"],
    )

    h = encode(view, encoder)
    recon = decode(h, view, v_idx, decoder)
    l_rc = sce_loss(graph.x_data(), recon, v_idx, gamma=2.0)

    z_online = project(readout(h, fixed["nodes_per_graph"]), projection)
    l_cl = contrastive_loss(
        z_online, Tensor(fixed["z_target"]), fixed["queue"], fixed["weights"]
    )
    return joint_loss(l_rc, l_cl, fixed["weights"].mu)


def _unit_rows(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    z = rng.normal(size=(rows, dim))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def _composed_instance(seed: int) -> tuple[dict[str, Tensor], dict]:
    """Two merged 3-node graphs (6 nodes total), raw dim 4, model dim 5."""
    rng = np.random.default_rng(2000 + seed)
    d, m = 4, 5
    per_graph, graphs = 3, 2
    n = per_graph * graphs
    x_raw = rng.uniform(0.2, 1.0, size=(n, d))
    edges = batch_knn(rng.normal(size=(n, 3)), (per_graph, per_graph), 1)
    positions = np.tile(
        np.stack([np.zeros(per_graph, dtype=np.int64), np.arange(per_graph)], axis=1),
        (graphs, 1),
    )
    graph = PatchGraph(
        n=n, x=x_raw, edges=edges, patch_size=2, positions=positions,
        grid=(1, per_graph), k=1, blocks=(per_graph, per_graph),
    )

    queue = NegativeQueue(4, m)
    queue.push(_unit_rows(rng, 4, m))
    fixed = {
        "graph": graph,
        "v_idx": np.array([1, 4]),  # one masked node per sub-graph
        "nodes_per_graph": per_graph,
        "queue": queue,
        "z_target": _unit_rows(rng, graphs, m),
        "weights": LossWeights(gamma=2.0, tau=0.5, alpha=1.0, eta=0.5, mu=0.5),
    }
    scale = 0.6
    params = {
        "stem.weight": scale * rng.normal(size=(d, m)),
        "stem.bias": scale * rng.normal(size=m),
        "stem.pos": 0.1 * rng.normal(size=(per_graph, m)),
        "mask_token": 0.1 * rng.normal(size=m),
        "enc.0.weight": scale * rng.normal(size=(m, m)),
        "enc.0.bias": 0.1 * rng.normal(size=m),
        "enc.1.weight": scale * rng.normal(size=(m, m)),
        "enc.1.bias": 0.1 * rng.normal(size=m),
        "dec.0.weight": scale * rng.normal(size=(m, d)),
        "dec.0.bias": 0.1 * rng.normal(size=d),
        "dec.mask_token": 0.1 * rng.normal(size=m),
        "proj.w1": scale * rng.normal(size=(m, m)),
        "proj.b1": 0.1 * rng.normal(size=m),
        "proj.w2": scale * rng.normal(size=(m, m)),
        "proj.b2": 0.1 * rng.normal(size=m),
    }
    return {k: Tensor(v, requires_grad=True) for k, v in params.items()}, fixed


def _check_composed(seeds: int, eps: float) -> list[CheckResult]:
    worst: dict[str, float] = {}
    for seed in range(seeds):
        params, fixed = _composed_instance(seed)
        for name in params:
            def f(t: Tensor, _name: str = name) -> Tensor:
                candidate = dict(params)
                candidate[_name] = t
                return _composed_loss(candidate, fixed)

            err = grad_check(f, params[name].data, eps=eps)
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(f"composed.{k}", v) for k, v in sorted(worst.items())]


def run_gradcheck(
    seeds: int = 20, eps: float = 1e-5, tolerance: float = TOLERANCE
) -> GradCheckReport:
    """The full suite: primitives, graph propagation, and the composed
    loss on `seeds` six-node instances."""
    results = []
    results.extend(_check_primitives(min(seeds, 5), eps))
    results.extend(_check_propagation(min(seeds, 8), eps))
    results.extend(_check_composed(seeds, eps))
    return GradCheckReport(results=results, tolerance=tolerance)
