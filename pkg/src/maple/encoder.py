"""Toy multi-token patch transformer.

The token sequence is ``[global | class tokens | patch tokens]``. Class
tokens carry no positional embedding, so permuting them permutes the
outputs. Blocks are pre-norm: attention + residual, then GELU MLP + residual.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import NamedTuple

import numpy as np

from . import tensor as T


@dataclass
class EncoderConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 2

    def __post_init__(self):
        if min(self.image_size, self.channels, self.patch_size, self.dim, self.heads, self.mlp_ratio) < 1 \
                or self.depth < 0:
            raise ValueError("encoder sizes must be positive (depth may be zero)")
        if self.image_size % self.patch_size:
            raise ValueError(f"patch size {self.patch_size} does not divide image size {self.image_size}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    def to_dict(self) -> dict:
        return asdict(self)


VIT_B16_ENCODER = dict(image_size=224, channels=3, patch_size=16, dim=768, depth=12, heads=12, mlp_ratio=4)


class EncoderOutput(NamedTuple):
    node_tokens: T.Tensor  # [B, M, d]
    global_: T.Tensor  # [B, d], after the visual projection


def _dense(rng, fan_in, fan_out, dtype):
    return rng.standard_normal((fan_in, fan_out)).astype(dtype) / np.sqrt(fan_in)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    d, hidden = cfg.dim, cfg.dim * cfg.mlp_ratio
    p = {
        "encoder.patch.weight": _dense(rng, cfg.patch_dim, d, dtype),
        "encoder.patch.bias": np.zeros(d, dtype),
        "encoder.pos": (0.02 * rng.standard_normal((cfg.num_patches, d))).astype(dtype),
        "encoder.global_token": (0.02 * rng.standard_normal(d)).astype(dtype),
    }
    for i in range(cfg.depth):
        b = f"encoder.blocks.{i}."
        p.update({
            b + "ln1.gain": np.ones(d, dtype), b + "ln1.bias": np.zeros(d, dtype),
            b + "qkv.weight": _dense(rng, d, 3 * d, dtype), b + "qkv.bias": np.zeros(3 * d, dtype),
            b + "proj.weight": _dense(rng, d, d, dtype), b + "proj.bias": np.zeros(d, dtype),
            b + "ln2.gain": np.ones(d, dtype), b + "ln2.bias": np.zeros(d, dtype),
            b + "fc1.weight": _dense(rng, d, hidden, dtype), b + "fc1.bias": np.zeros(hidden, dtype),
            b + "fc2.weight": _dense(rng, hidden, d, dtype), b + "fc2.bias": np.zeros(d, dtype),
        })
    p["encoder.visual_proj.weight"] = _dense(rng, d, d, dtype)
    p["encoder.visual_proj.bias"] = np.zeros(d, dtype)
    return p


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[B, C, S, S] -> [B, (S/P)^2, C*P*P], patches in row-major grid order."""
    B, C, S, S2 = images.shape
    if S != S2 or S % patch_size:
        raise ValueError(f"image side {S} must be square and divisible by patch size {patch_size}")
    g = S // patch_size
    x = images.reshape(B, C, g, patch_size, g, patch_size)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(B, g * g, C * patch_size * patch_size)


def patchify(images: np.ndarray, patch_size: int, weight: T.Tensor, bias: T.Tensor, pos: T.Tensor) -> T.Tensor:
    patches = T.Tensor(extract_patches(np.asarray(images), patch_size).astype(weight.dtype))
    return T.linear(patches, weight, bias) + pos


def attention_block(x: T.Tensor, params: dict[str, T.Tensor], prefix: str, heads: int) -> T.Tensor:
    B, L, d = x.shape
    dh = d // heads
    h = T.layer_norm(x, params[prefix + "ln1.gain"], params[prefix + "ln1.bias"])
    qkv = T.linear(h, params[prefix + "qkv.weight"], params[prefix + "qkv.bias"])
    qkv = T.transpose(T.reshape(qkv, (B, L, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    att = T.matmul(T.softmax(scores), v)
    att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (B, L, d))
    x = x + T.linear(att, params[prefix + "proj.weight"], params[prefix + "proj.bias"])
    h = T.layer_norm(x, params[prefix + "ln2.gain"], params[prefix + "ln2.bias"])
    h = T.gelu(T.linear(h, params[prefix + "fc1.weight"], params[prefix + "fc1.bias"]))
    return x + T.linear(h, params[prefix + "fc2.weight"], params[prefix + "fc2.bias"])


def encode(images: np.ndarray, class_tokens: T.Tensor | None, params: dict[str, T.Tensor],
           cfg: EncoderConfig, num_nodes: int | None = None) -> EncoderOutput:
    """Run the encoder. ``class_tokens=None`` gives the single-token (flat) encoder."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ValueError(f"images must be [B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}], "
                         f"got {images.shape}")
    B, d = images.shape[0], cfg.dim
    M = 0
    if class_tokens is not None:
        M = class_tokens.shape[0]
        if num_nodes is not None and M != num_nodes:
            raise ValueError(f"{M} class tokens for a hierarchy with {num_nodes} nodes")
    patches = patchify(images, cfg.patch_size, params["encoder.patch.weight"],
                       params["encoder.patch.bias"], params["encoder.pos"])
    glob = T.expand(T.reshape(params["encoder.global_token"], (1, 1, d)), (B, 1, d))
    parts = [glob]
    if M:
        parts.append(T.expand(T.reshape(class_tokens, (1, M, d)), (B, M, d)))
    parts.append(patches)
    x = T.concat(parts, axis=1)
    for i in range(cfg.depth):
        x = attention_block(x, params, f"encoder.blocks.{i}.", cfg.heads)
    z = T.linear(x[:, 0, :], params["encoder.visual_proj.weight"], params["encoder.visual_proj.bias"])
    nodes = x[:, 1:1 + M, :] if M else None
    return EncoderOutput(nodes, z)
