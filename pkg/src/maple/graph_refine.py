"""GraphSAGE-style refinement of node tokens over the (undirected) taxonomy.

One layer computes, per node v,

    m_v = h_v W_self + mean_{u in N(v)} h_u W_neigh + b
    out_v = GELU(LayerNorm(m_v + h_v))

with N(v) = parents(v) | children(v). The empty-neighbourhood mean is zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .hierarchy import LabelHierarchy


@dataclass(frozen=True)
class AdjacencyPlan:
    neighbors: tuple[tuple[int, ...], ...]

    @property
    def num_nodes(self) -> int:
        return len(self.neighbors)

    @property
    def degree(self) -> np.ndarray:
        return np.array([len(n) for n in self.neighbors])

    def mean_matrix(self, dtype=np.float64) -> np.ndarray:
        """Row-normalised adjacency: ``A[v, u] = 1/deg(v)`` for u in N(v)."""
        a = np.zeros((self.num_nodes, self.num_nodes), dtype=dtype)
        for v, nbrs in enumerate(self.neighbors):
            if nbrs:
                a[v, list(nbrs)] = 1.0 / len(nbrs)
        return a

    def gather_index(self) -> tuple[np.ndarray, np.ndarray]:
        """[M, max_deg] neighbour ids padded with M (a zero row), and 1/deg (0 for isolated nodes)."""
        width = max((len(n) for n in self.neighbors), default=0)
        idx = np.full((self.num_nodes, width), self.num_nodes, dtype=np.int64)
        for v, nbrs in enumerate(self.neighbors):
            idx[v, :len(nbrs)] = nbrs
        deg = self.degree.astype(np.float64)
        return idx, np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)

    def permuted(self, perm) -> "AdjacencyPlan":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = list(perm)
        out: list[tuple[int, ...]] = [()] * self.num_nodes
        for v, nbrs in enumerate(self.neighbors):
            out[perm[v]] = tuple(sorted(perm[u] for u in nbrs))
        return AdjacencyPlan(tuple(out))


def plan_from_edges(num_nodes: int, edges) -> AdjacencyPlan:
    nbrs: list[set[int]] = [set() for _ in range(num_nodes)]
    for p, c in edges:
        if p == c:
            continue
        nbrs[p].add(c)
        nbrs[c].add(p)
    return AdjacencyPlan(tuple(tuple(sorted(s)) for s in nbrs))


def build_adjacency(h: LabelHierarchy) -> AdjacencyPlan:
    return plan_from_edges(len(h), h.edges)


@dataclass
class GnnLayer:
    w_self: T.Tensor
    w_neigh: T.Tensor
    bias: T.Tensor
    norm_gain: T.Tensor
    norm_bias: T.Tensor

    @classmethod
    def from_params(cls, params: dict[str, T.Tensor], prefix: str) -> "GnnLayer":
        return cls(params[prefix + "w_self"], params[prefix + "w_neigh"], params[prefix + "bias"],
                   params[prefix + "norm.gain"], params[prefix + "norm.bias"])


def init_gnn_params(num_layers: int, dim: int, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    p = {}
    for k in range(num_layers):
        pre = f"gnn.{k}."
        p[pre + "w_self"] = (rng.standard_normal((dim, dim)) / np.sqrt(dim)).astype(dtype)
        p[pre + "w_neigh"] = (rng.standard_normal((dim, dim)) / np.sqrt(dim)).astype(dtype)
        p[pre + "bias"] = np.zeros(dim, dtype)
        p[pre + "norm.gain"] = np.ones(dim, dtype)
        p[pre + "norm.bias"] = np.zeros(dim, dtype)
    return p


def neighbor_mean(H: T.Tensor, plan: AdjacencyPlan) -> T.Tensor:
    """Mean of neighbour rows per node, zero for isolated nodes.

    Neighbour rows are gathered into a zero-padded [B, M, max_deg, d] block
    and summed in sorted order, so relabelling the graph permutes the result
    bit-exactly.
    """
    B, M, d = H.shape
    idx, inv_deg = plan.gather_index()
    if idx.shape[1] == 0:
        return T.Tensor(np.zeros(H.shape, H.dtype))
    padded = T.concat([H, T.Tensor(np.zeros((B, 1, d), H.dtype))], axis=1)
    gathered = T.reshape(T.take(padded, idx.reshape(-1), axis=1), (B, M, idx.shape[1], d))
    total = T.order_free_sum(gathered, axis=2)
    return total * T.Tensor(np.repeat(inv_deg[:, None], d, axis=1).astype(H.dtype))


def message_pass(H: T.Tensor, plan: AdjacencyPlan, layer: GnnLayer) -> T.Tensor:
    if H.ndim != 3 or H.shape[1] != plan.num_nodes:
        raise ValueError(f"H has shape {H.shape}, plan covers {plan.num_nodes} nodes")
    if H.shape[2] != layer.w_self.shape[0]:
        raise ValueError(f"feature width {H.shape[2]} does not match layer width {layer.w_self.shape[0]}")
    m = T.matmul(H, layer.w_self) + T.matmul(neighbor_mean(H, plan), layer.w_neigh) + layer.bias
    return T.gelu(T.layer_norm(m + H, layer.norm_gain, layer.norm_bias))


def refine(H0: T.Tensor, plan: AdjacencyPlan, layers: list[GnnLayer], dropout_rate: float = 0.0,
           training: bool = False, rng: np.random.Generator | None = None) -> T.Tensor:
    if not layers:
        raise ValueError("refine needs at least one GNN layer")
    H = H0
    for k, layer in enumerate(layers):
        if k:
            H = T.dropout(H, dropout_rate, training, rng)
        H = message_pass(H, plan, layer)
    return H
