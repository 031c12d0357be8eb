"""Text-embedding providers and the initial node-embedding matrix.

Four provider kinds exist:

* ``remote`` POSTs ``{"texts": [...]}`` to ``<endpoint>/embed`` and expects
  ``{"embeddings": [[...], ...]}`` back. Results are cached on disk, one
  ``.npy`` per SHA-256 of the text, so a warm cache works offline.
* ``cached_file`` serves only from such a cache directory.
* ``deterministic_fallback`` hashes the text into a Philox key and draws a
  unit Gaussian vector. Fully offline and reproducible across machines.
* ``random`` ignores the text and returns normalised Gaussian rows from the
  run seed (the random-initialisation ablation).
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .hierarchy import LabelHierarchy, contextual_description

log = logging.getLogger(__name__)

DEFAULT_EMBED_DIM = 768
PROVIDER_KINDS = ("remote", "cached_file", "deterministic_fallback", "random")


class EmbeddingError(RuntimeError):
    pass


def text_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class EmbeddingProvider:
    kind: str = "deterministic_fallback"
    dim: int = DEFAULT_EMBED_DIM
    endpoint: str | None = None
    cache_dir: str | None = None
    seed: int = 0
    timeout: float = 10.0
    _memo: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in PROVIDER_KINDS:
            raise ValueError(f"unknown provider kind {self.kind!r}")
        if self.kind == "remote" and not self.endpoint:
            self.endpoint = os.environ.get("MAPLE_EMBED_URL")
            if not self.endpoint:
                raise ValueError("remote provider needs an endpoint (or MAPLE_EMBED_URL)")
        if self.kind == "cached_file" and not self.cache_dir:
            raise ValueError("cached_file provider needs cache_dir")

    def describe(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "seed": self.seed}

    # -- cache
    def _cache_path(self, text: str) -> Path | None:
        return Path(self.cache_dir) / f"{text_key(text)}.npy" if self.cache_dir else None

    def _cache_get(self, text: str) -> np.ndarray | None:
        path = self._cache_path(text)
        if path is None or not path.exists():
            return None
        vec = np.load(path)
        if vec.shape != (self.dim,):
            raise EmbeddingError(f"cached vector {path} has shape {vec.shape}, want ({self.dim},)")
        return vec

    def _cache_put(self, text: str, vec: np.ndarray) -> None:
        path = self._cache_path(text)
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            np.save(fh, vec)
        os.replace(tmp, path)

    # -- embedding
    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        for t in texts:
            if not t or not t.strip():
                raise EmbeddingError("cannot embed empty text")
        if self.kind == "deterministic_fallback":
            return np.stack([hashed_unit_vector(t, self.dim) for t in texts])
        if self.kind == "random":
            return random_unit_rows(len(texts), self.dim, self.seed)
        out: list[np.ndarray | None] = []
        missing = []
        for t in texts:
            vec = self._memo.get(t)
            if vec is None:
                vec = self._cache_get(t)
            out.append(vec)
            if vec is None:
                missing.append(t)
        if missing:
            if self.kind == "cached_file":
                raise EmbeddingError(f"{len(missing)} text(s) missing from cache {self.cache_dir}")
            fetched = dict(zip(missing, self._post(missing)))
            for t, v in fetched.items():
                self._cache_put(t, v)
            out = [fetched[t] if v is None else v for t, v in zip(texts, out)]
        for t, v in zip(texts, out):
            self._memo[t] = v
        return np.stack(out)

    def _post(self, texts: Sequence[str]) -> list[np.ndarray]:
        url = self.endpoint.rstrip("/") + "/embed"
        body = json.dumps({"texts": list(texts)}).encode()
        req = urllib.request.Request(url, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read())
        except urllib.error.HTTPError as exc:
            raise EmbeddingError(f"embedding endpoint returned HTTP {exc.code}") from exc
        except (urllib.error.URLError, OSError) as exc:
            raise EmbeddingError(f"embedding endpoint unreachable: {exc}") from exc
        vecs = payload.get("embeddings")
        if not isinstance(vecs, list) or len(vecs) != len(texts):
            raise EmbeddingError("malformed response from embedding endpoint")
        arr = np.asarray(vecs, dtype=np.float64)
        if arr.shape != (len(texts), self.dim):
            raise EmbeddingError(f"endpoint returned shape {arr.shape}, want ({len(texts)}, {self.dim})")
        return list(arr)


def hashed_unit_vector(text: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    key = np.frombuffer(digest[:16], dtype="<u8")
    rng = np.random.Generator(np.random.Philox(key=key))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def random_unit_rows(n: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, 0x5EED]))
    rows = rng.standard_normal((n, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


@dataclass
class InitMatrix:
    rows: np.ndarray
    provider: dict
    prompt_hashes: list[str]


def node_prompts(h: LabelHierarchy) -> list[str]:
    return [contextual_description(h, n.id) for n in h.nodes]


def embed_hierarchy(h: LabelHierarchy, provider: EmbeddingProvider) -> np.ndarray:
    """Provider output for every node prompt, shape [|V|, D]."""
    prompts = node_prompts(h)
    try:
        return provider.embed_many(prompts)
    except EmbeddingError as exc:
        # retry one by one so the failing node can be named
        for node, p in zip(h.nodes, prompts):
            try:
                provider.embed(p)
            except EmbeddingError as inner:
                raise EmbeddingError(f"embedding failed for node {node.name!r}: {inner}") from inner
        raise exc


def project_and_normalize(psi: np.ndarray, w_psi: T.Tensor) -> T.Tensor:
    """Differentiable ``l2_normalize(psi @ W_psi)``; psi is a constant."""
    return T.l2_normalize_rows(T.matmul(T.Tensor(psi.astype(w_psi.dtype)), w_psi))


def init_node_embeddings(h: LabelHierarchy, provider: EmbeddingProvider, w_psi: T.Tensor,
                         model_dim: int | None = None) -> InitMatrix:
    prompts = node_prompts(h)
    hashes = [text_key(p) for p in prompts]
    if provider.kind == "random":
        d = model_dim or w_psi.shape[1]
        return InitMatrix(random_unit_rows(len(h), d, provider.seed), provider.describe(), hashes)
    psi = embed_hierarchy(h, provider)
    if w_psi.shape[0] != psi.shape[1]:
        raise ValueError(f"W_psi has {w_psi.shape[0]} input rows, provider gives {psi.shape[1]}")
    rows = project_and_normalize(psi, w_psi).data
    return InitMatrix(rows, provider.describe(), hashes)
