"""Assembly of the full hierarchical model and the flat leaf-only baseline."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .encoder import EncoderConfig, encode, init_encoder_params
from .fusion_head import (GateNet, Head, flat_leaf_loss, fuse, gate, init_gate_params,
                          init_head_params, predict, total_loss)
from .graph_refine import GnnLayer, build_adjacency, init_gnn_params, refine
from .hierarchy import LabelHierarchy, from_dict, level_partition, to_dict
from .semantic_init import (EmbeddingProvider, embed_hierarchy, project_and_normalize,
                            random_unit_rows)

COMPONENT_PREFIXES = {
    "tokens": "tokens.",
    "w_psi": "semantic.",
    "encoder": "encoder.",
    "gnn": "gnn.",
    "gate": "gate.",
    "head": "head.",
    "buffers": "buffer.",
}


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mode: str = "maple"  # maple | flat
    init_mode: str = "semantic"  # semantic | random
    gnn_layers: int = 2
    dropout: float = 0.1
    embed_dim: int = 768
    pool_source: str = "fused"  # fused | gnn
    provider: str = "deterministic_fallback"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.mode not in ("maple", "flat"):
            raise ValueError(f"mode must be maple or flat, got {self.mode!r}")
        if self.init_mode not in ("semantic", "random"):
            raise ValueError(f"init_mode must be semantic or random, got {self.init_mode!r}")
        if self.pool_source not in ("fused", "gnn"):
            raise ValueError(f"pool_source must be fused or gnn, got {self.pool_source!r}")
        if self.mode == "maple" and self.gnn_layers < 1:
            raise ValueError("maple mode needs at least one GNN layer")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class ForwardOutput(NamedTuple):
    logits: T.Tensor
    z: T.Tensor
    node_tokens: T.Tensor | None = None
    gnn: T.Tensor | None = None
    fused: T.Tensor | None = None


class MapleModel:
    """All trainable tensors plus the hierarchy they were built for.

    In semantic mode the class tokens are ``l2norm(psi @ W_psi) + offset``:
    the first term is the semantic initialisation (psi are provider
    embeddings of the node prompts, a constant buffer) and ``offset`` starts
    at zero, so the tokens equal the unit-norm init at step 0 and then move
    freely. In random mode the tokens are a plain parameter initialised to
    normalised Gaussian rows.
    """

    def __init__(self, hierarchy: LabelHierarchy, config: ModelConfig | None = None,
                 provider: EmbeddingProvider | None = None, psi: np.ndarray | None = None):
        self.hierarchy = hierarchy
        self.config = cfg = config or ModelConfig()
        self.partition = level_partition(hierarchy)
        self.plan = build_adjacency(hierarchy)
        dtype = np.dtype(cfg.dtype).type
        rng = np.random.default_rng(cfg.seed)
        d, M = cfg.encoder.dim, len(hierarchy)

        raw = init_encoder_params(cfg.encoder, rng, dtype)
        self.psi = None
        if cfg.mode == "flat":
            raw.update(init_head_params(d, len(self.partition[1]), rng, dtype))
        else:
            if cfg.init_mode == "semantic":
                if psi is None:
                    provider = provider or EmbeddingProvider(cfg.provider, dim=cfg.embed_dim, seed=cfg.seed)
                    psi = embed_hierarchy(hierarchy, provider)
                self.psi = np.asarray(psi, dtype=dtype)
                if self.psi.shape != (M, cfg.embed_dim):
                    raise ValueError(f"psi has shape {self.psi.shape}, want ({M}, {cfg.embed_dim})")
                raw["semantic.w_psi"] = (rng.standard_normal((cfg.embed_dim, d)) / np.sqrt(cfg.embed_dim)).astype(dtype)
                raw["tokens.class"] = np.zeros((M, d), dtype)
            else:
                raw["tokens.class"] = random_unit_rows(M, d, cfg.seed).astype(dtype)
            raw.update(init_gnn_params(cfg.gnn_layers, d, rng, dtype))
            raw.update(init_gate_params(d, rng, dtype))
            raw.update(init_head_params(2 * d, M, rng, dtype))
        self.params = {k: T.Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
        if self.psi is not None:
            # fails loudly on a degenerate projection (zero rows)
            project_and_normalize(self.psi, self.params["semantic.w_psi"])

    # ---------------------------------------------------------------- pieces

    @property
    def is_flat(self) -> bool:
        return self.config.mode == "flat"

    @property
    def num_outputs(self) -> int:
        return len(self.partition[1]) if self.is_flat else len(self.hierarchy)

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    def class_tokens(self) -> T.Tensor:
        if self.psi is None:
            return self.params["tokens.class"]
        return project_and_normalize(self.psi, self.params["semantic.w_psi"]) + self.params["tokens.class"]

    def gnn_layers(self) -> list[GnnLayer]:
        return [GnnLayer.from_params(self.params, f"gnn.{k}.") for k in range(self.config.gnn_layers)]

    def forward(self, images: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> ForwardOutput:
        cfg = self.config
        images = np.asarray(images, dtype=np.dtype(cfg.dtype))
        if self.is_flat:
            out = encode(images, None, self.params, cfg.encoder)
            return ForwardOutput(T.linear(out.global_, self.params["head.weight"], self.params["head.bias"]), out.global_)
        tokens = self.class_tokens()
        enc = encode(images, tokens, self.params, cfg.encoder, num_nodes=len(self.hierarchy))
        z = enc.global_
        H = refine(enc.node_tokens, self.plan, self.gnn_layers(), cfg.dropout, training, rng)
        gamma = gate(z, H, GateNet.from_params(self.params))
        fused = fuse(z, H, gamma)
        pooled_from = fused if cfg.pool_source == "fused" else H
        logits = predict(pooled_from, z, Head.from_params(self.params))
        return ForwardOutput(logits, z, enc.node_tokens, H, fused)

    def loss(self, logits: T.Tensor, y: np.ndarray) -> T.Tensor:
        y = np.asarray(y)
        if self.is_flat:
            return flat_leaf_loss(logits, y[:, self.partition[1]])
        return total_loss(logits, y, self.partition)

    # ---------------------------------------------------------------- persistence

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.params.items()}
        if self.psi is not None:
            state["buffer.psi"] = self.psi
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise ckpt.CheckpointError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if k == "buffer.psi":
                self.psi = np.array(v)
                continue
            if self.params[k].shape != v.shape:
                raise ckpt.CheckpointError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.params[k].dtype)

    def metadata(self) -> dict:
        return {
            "model_config": self.config.to_dict(),
            "hierarchy": to_dict(self.hierarchy),
            "hierarchy_hash": self.hierarchy.digest(),
        }

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        meta = self.metadata()
        meta.update(extra or {})
        return ckpt.save_tensors(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "MapleModel":
        meta = ckpt.load_meta(path)
        h = from_dict(meta["hierarchy"])
        if h.digest() != meta["hierarchy_hash"]:
            raise ckpt.CheckpointError("hierarchy hash mismatch in sidecar")
        state = ckpt.load_tensors(path)
        cfg = ModelConfig(**meta["model_config"])
        model = cls(h, cfg, psi=state.get("buffer.psi"))
        model.load_state_dict(state)
        return model


def component_of(name: str) -> str:
    for comp, prefix in COMPONENT_PREFIXES.items():
        if name.startswith(prefix):
            return comp
    raise KeyError(f"tensor {name!r} belongs to no known component")
