"""Gated fusion of visual and node features, the unified head and the level-aware loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T


@dataclass
class GateNet:
    weight: T.Tensor  # [2d, d]
    bias: T.Tensor  # [d]
    norm_gain: T.Tensor
    norm_bias: T.Tensor

    @classmethod
    def from_params(cls, params):
        return cls(params["gate.weight"], params["gate.bias"], params["gate.norm.gain"], params["gate.norm.bias"])


@dataclass
class Head:
    weight: T.Tensor  # [2d, |V|]
    bias: T.Tensor  # [|V|]

    @classmethod
    def from_params(cls, params):
        return cls(params["head.weight"], params["head.bias"])


def init_gate_params(dim: int, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    return {
        "gate.weight": (rng.standard_normal((2 * dim, dim)) / np.sqrt(2 * dim)).astype(dtype),
        "gate.bias": np.zeros(dim, dtype),
        "gate.norm.gain": np.ones(dim, dtype),
        "gate.norm.bias": np.zeros(dim, dtype),
    }


def init_head_params(in_dim: int, num_out: int, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    return {
        "head.weight": (rng.standard_normal((in_dim, num_out)) / np.sqrt(in_dim)).astype(dtype),
        "head.bias": np.zeros(num_out, dtype),
    }


def replicate(z: T.Tensor, num_nodes: int) -> T.Tensor:
    B, d = z.shape
    return T.expand(T.reshape(z, (B, 1, d)), (B, num_nodes, d))


def _check_pair(z: T.Tensor, E: T.Tensor):
    if z.ndim != 2 or E.ndim != 3 or E.shape[0] != z.shape[0] or E.shape[2] != z.shape[1]:
        raise ValueError(f"z {z.shape} and E {E.shape} are not [B,d] / [B,M,d]")


def gate(z: T.Tensor, E: T.Tensor, net: GateNet) -> T.Tensor:
    """Per-node, per-dimension weights ``sigmoid(LN([z | e_v] W + b))`` in (0, 1)."""
    _check_pair(z, E)
    x = T.concat([replicate(z, E.shape[1]), E], axis=-1)
    return T.sigmoid(T.layer_norm(T.linear(x, net.weight, net.bias), net.norm_gain, net.norm_bias))


def fuse(z: T.Tensor, E: T.Tensor, gamma: T.Tensor) -> T.Tensor:
    _check_pair(z, E)
    if gamma.shape != E.shape:
        raise ValueError(f"gate shape {gamma.shape} != node shape {E.shape}")
    return gamma * E + (1.0 - gamma) * replicate(z, E.shape[1])


def predict(H: T.Tensor, z: T.Tensor, head: Head) -> T.Tensor:
    """Mean-pool node features, append z, one linear map to all node logits."""
    _check_pair(z, H)
    if head.weight.shape[0] != 2 * z.shape[1]:
        raise ValueError(f"head expects input width {head.weight.shape[0]}, got {2 * z.shape[1]}")
    pooled = T.mean(H, axis=1)
    return T.linear(T.concat([pooled, z], axis=-1), head.weight, head.bias)


# ---------------------------------------------------------------- loss

@dataclass(frozen=True)
class LevelTargets:
    levels: tuple[np.ndarray, ...]
    leaves: np.ndarray

    @classmethod
    def split(cls, y: np.ndarray, partition) -> "LevelTargets":
        level_ids, leaf_ids = partition
        y = np.asarray(y)
        return cls(tuple(y[:, ids] for ids in level_ids), y[:, leaf_ids])


def single_label_rows(y: np.ndarray) -> np.ndarray:
    return np.asarray(y).sum(axis=-1) == 1


def adaptive_level_loss(logits_t: T.Tensor, y_t) -> T.Tensor:
    """Per row: softmax cross-entropy if exactly one target is on, else mean BCE.

    Row losses are averaged over the batch.
    """
    y = np.asarray(y_t, dtype=logits_t.dtype)
    if y.shape != logits_t.shape or y.ndim != 2:
        raise ValueError(f"level slice mismatch: logits {logits_t.shape}, targets {y.shape}")
    ce_mask = single_label_rows(y).astype(logits_t.dtype)
    ce = -T.sum(T.log_softmax(logits_t) * y, axis=-1)
    bce = T.mean(T.bce_with_logits(logits_t, y), axis=-1)
    rows = ce * ce_mask + bce * (1.0 - ce_mask)
    return T.mean(rows)


def total_loss(logits: T.Tensor, y, partition) -> T.Tensor:
    level_ids, _ = partition
    y = np.asarray(y)
    n_nodes = sum(len(ids) for ids in level_ids)
    if logits.shape[-1] != n_nodes or y.shape != logits.shape:
        raise ValueError(f"logits {logits.shape} / targets {y.shape} do not cover {n_nodes} nodes")
    losses = [adaptive_level_loss(T.take(logits, ids, axis=-1), y[:, ids]) for ids in level_ids]
    acc = losses[0]
    for extra in losses[1:]:
        acc = acc + extra
    return acc * (1.0 / len(losses))


def flat_leaf_loss(leaf_logits: T.Tensor, y_leaf) -> T.Tensor:
    return T.mean(T.bce_with_logits(leaf_logits, np.asarray(y_leaf, dtype=leaf_logits.dtype)))


def sigmoid_scores(logits: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))


def per_level_argmax(logits: np.ndarray, level_ids: Sequence[Sequence[int]]) -> list[np.ndarray]:
    """Softmax argmax per level; returns node ids, one array per level."""
    logits = np.asarray(logits)
    return [np.asarray(ids)[np.argmax(logits[:, ids], axis=-1)] for ids in level_ids]
