"""Synthetic hierarchy-consistent datasets, splits, K-shot subsets and disk I/O.

Rendering: every node owns a fixed random texture. A leaf's pattern is the
sum of the textures along its path to level 1, so siblings share their
parents' components, and the pattern is stamped at a leaf-specific anchor
(plus a small placement jitter). An image is the sum of the patterns of its
1-3 active leaves plus Gaussian noise.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .hierarchy import LabelHierarchy, ancestors, close_upward, dump_hierarchy, is_consistent, load_hierarchy

RAW_MAGIC = b"MF32"
RAW_MAX_RANK = 5


@dataclass
class SynthSpec:
    """Generator settings kept with the dataset so the renderer can be audited."""

    templates: np.ndarray  # [|V|, C, p, p] per-node texture
    anchors: np.ndarray  # [|V|, 2] top-left corner, only leaves are used
    patch: int
    jitter: int


@dataclass
class Dataset:
    hierarchy: LabelHierarchy
    images: np.ndarray  # [N, C, S, S] float32
    labels: np.ndarray  # [N, |V|] int8
    ids: list[str]
    synth: SynthSpec | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.images) != len(self.labels) or len(self.ids) != len(self.labels):
            raise ValueError("images, labels and ids must have equal length")
        if self.labels.ndim != 2 or self.labels.shape[1] != len(self.hierarchy):
            raise ValueError(f"labels must be [N, {len(self.hierarchy)}]")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def leaf_labels(self) -> np.ndarray:
        return self.labels[:, self.hierarchy.leaf_ids]

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.hierarchy, self.images[idx], self.labels[idx],
                       [self.ids[i] for i in idx], self.synth)

    def leaf_template(self, leaf_id: int) -> np.ndarray:
        if self.synth is None:
            raise ValueError("dataset was not synthesised")
        return leaf_pattern(self.hierarchy, self.synth.templates, leaf_id)

    # -- disk format
    def save(self, out_dir: str | Path, image_format: str = "f32") -> Path:
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "hierarchy.yaml").write_text(dump_hierarchy(self.hierarchy), encoding="utf-8")
        with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
            for sid, img, y in zip(self.ids, self.images, self.labels):
                if image_format == "ppm":
                    rel = f"images/{sid}.ppm"
                    write_ppm(out / rel, img)
                else:
                    rel = f"images/{sid}.f32"
                    write_raw(out / rel, img)
                names = [self.hierarchy.nodes[i].name for i in np.flatnonzero(y)]
                fh.write(json.dumps({"id": sid, "image": rel, "labels": names}) + "\n")
        return out

    @classmethod
    def load(cls, data_dir: str | Path, hierarchy: LabelHierarchy | None = None) -> "Dataset":
        root = Path(data_dir)
        h = hierarchy or load_hierarchy(root / "hierarchy.yaml")
        ids, images, labels = [], [], []
        for line in (root / "manifest.jsonl").read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            path = root / rec["image"]
            images.append(read_ppm(path) if path.suffix == ".ppm" else read_raw(path))
            y = np.zeros(len(h), dtype=np.int8)
            for name in rec["labels"]:
                y[h.id_of(name)] = 1
            labels.append(y)
            ids.append(rec["id"])
        return cls(h, np.stack(images).astype(np.float32), np.stack(labels), ids)


# ---------------------------------------------------------------- image files

def write_raw(path: str | Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim > RAW_MAX_RANK or max(arr.shape, default=0) > 0xFFFF:
        raise ValueError(f"raw format holds rank <= {RAW_MAX_RANK} and dims < 65536, got {arr.shape}")
    dims = list(arr.shape) + [0] * (RAW_MAX_RANK - arr.ndim)
    header = RAW_MAGIC + struct.pack("<H5H", arr.ndim, *dims)
    Path(path).write_bytes(header + arr.tobytes())


def read_raw(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != RAW_MAGIC:
        raise ValueError(f"{path}: not a raw f32 tensor")
    rank, *dims = struct.unpack("<H5H", buf[4:16])
    shape = tuple(dims[:rank])
    return np.frombuffer(buf[16:], dtype="<f4").reshape(shape).copy()


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    """Binary P6, 8-bit RGB. Values are clipped to [0, 1] before quantising."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError("PPM needs a [3, H, W] image")
    q = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = q.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + q.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        fields.append(buf[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path}: only binary P6 PPM is supported")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported")
    data = np.frombuffer(buf[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return (data.reshape(h, w, 3).transpose(2, 0, 1) / 255.0).astype(np.float32)


# ---------------------------------------------------------------- synthesis

def leaf_pattern(h: LabelHierarchy, templates: np.ndarray, leaf_id: int) -> np.ndarray:
    path = [leaf_id] + sorted(ancestors(h, leaf_id))
    return templates[path].sum(axis=0)


def _leaf_anchors(h: LabelHierarchy, rng: np.random.Generator, image_size: int, patch: int,
                  jitter: int) -> np.ndarray:
    """Top-left corner per node. Leaves get distinct grid slots while slots last, so their patches do not overlap."""
    per_axis = (image_size - 2 * jitter) // patch
    slots = [(jitter + r * patch, jitter + c * patch) for r in range(per_axis) for c in range(per_axis)]
    anchors = rng.integers(jitter, image_size - patch - jitter + 1, size=(len(h), 2))
    order = rng.permutation(len(slots))
    for j, leaf in enumerate(h.leaf_ids[:len(slots)]):
        anchors[leaf] = slots[order[j]]
    return anchors


def synth_dataset(h: LabelHierarchy, n: int, seed: int = 0, noise: float = 0.1,
                  image_size: int = 32, channels: int = 3, patch: int = 6, jitter: int = 1,
                  max_leaves: int = 3, signal: float = 1.0) -> Dataset:
    """Render ``n`` images whose label sets are hierarchy-consistent by construction."""
    leaves = h.leaf_ids
    if n < len(leaves):
        raise ValueError(f"n={n} cannot cover {len(leaves)} leaves")
    if patch + 2 * jitter > image_size:
        raise ValueError("patch plus jitter does not fit in the image")
    # templates and anchors come from a stream that does not depend on n
    world = np.random.default_rng([seed, 1])
    # coarse cells upsampled to the patch size, so a few pixels of jitter keep most of the correlation
    cell = max(1, patch // 2)
    coarse = world.standard_normal((len(h), channels, -(-patch // cell), -(-patch // cell)))
    templates = np.kron(coarse, np.ones((1, 1, cell, cell)))[:, :, :patch, :patch].astype(np.float32)
    templates *= signal
    anchors = _leaf_anchors(h, world, image_size, patch, jitter)
    patterns = {leaf: leaf_pattern(h, templates, leaf) for leaf in leaves}

    rng = np.random.default_rng([seed, 2])
    images = np.zeros((n, channels, image_size, image_size), dtype=np.float32)
    labels = np.zeros((n, len(h)), dtype=np.int8)
    for i in range(n):
        k = int(rng.integers(1, max_leaves + 1))
        chosen = list(rng.choice(leaves, size=min(k, len(leaves)), replace=False))
        if i < len(leaves) and leaves[i] not in chosen:
            chosen[0] = leaves[i]  # the first |leaves| samples guarantee coverage
        y = np.zeros(len(h), dtype=np.int8)
        for leaf in chosen:
            y[leaf] = 1
            r, c = anchors[leaf] + rng.integers(-jitter, jitter + 1, size=2)
            images[i, :, r:r + patch, c:c + patch] += patterns[leaf]
        labels[i] = close_upward(h, y)
        if noise:
            images[i] += noise * rng.standard_normal(images[i].shape).astype(np.float32)
    assert all(is_consistent(h, y) for y in labels)
    ids = [f"s{seed}_{i:05d}" for i in range(n)]
    return Dataset(h, images, labels, ids, SynthSpec(templates, anchors, patch, jitter))


def template_scores(ds: Dataset) -> np.ndarray:
    """Nearest-template leaf scores: best normalised correlation over the jitter window."""
    spec = ds.synth
    if spec is None:
        raise ValueError("dataset was not synthesised")
    leaves = ds.hierarchy.leaf_ids
    out = np.zeros((len(ds), len(leaves)))
    for j, leaf in enumerate(leaves):
        pat = ds.leaf_template(leaf)
        pat = pat / np.linalg.norm(pat)
        best = np.full(len(ds), -np.inf)
        r0, c0 = spec.anchors[leaf]
        for dr in range(-spec.jitter, spec.jitter + 1):
            for dc in range(-spec.jitter, spec.jitter + 1):
                win = ds.images[:, :, r0 + dr:r0 + dr + spec.patch, c0 + dc:c0 + dc + spec.patch]
                best = np.maximum(best, np.einsum("nchw,chw->n", win, pat))
        out[:, j] = best
    return out


# ---------------------------------------------------------------- splitting

@dataclass
class SplitSpec:
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    strategy: str = "iterative_stratified"
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or min(self.fractions) < 0 or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {self.fractions}")
        if self.strategy not in ("iterative_stratified", "random"):
            raise ValueError(f"unknown split strategy {self.strategy!r}")


def iterative_stratification(Y: np.ndarray, fractions: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    """Fold index per row of the binary matrix ``Y``; rarest label first."""
    Y = np.asarray(Y).astype(bool)
    n, _ = Y.shape
    frac = np.asarray(fractions, dtype=np.float64)
    active = frac > 0
    want_fold = frac * n
    want_label = np.outer(frac, Y.sum(axis=0))
    fold = np.full(n, -1)
    left = np.ones(n, dtype=bool)

    def pick(cands: np.ndarray) -> int:
        top = cands[want_fold[cands] == want_fold[cands].max()]
        return int(top[0] if len(top) == 1 else rng.choice(top))

    while True:
        counts = Y[left].sum(axis=0)
        if not counts.any():
            break
        nz = np.flatnonzero(counts)
        rarest = nz[counts[nz] == counts[nz].min()]
        label = int(rarest[0] if len(rarest) == 1 else rng.choice(rarest))
        rows = np.flatnonzero(left & Y[:, label])
        for i in rows[rng.permutation(len(rows))]:
            scores = np.where(active, want_label[:, label], -np.inf)
            cands = np.flatnonzero(scores == scores.max())
            f = pick(cands)
            fold[i] = f
            left[i] = False
            want_label[f] -= Y[i]
            want_fold[f] -= 1
    for i in np.flatnonzero(left)[rng.permutation(int(left.sum()))]:
        cands = np.flatnonzero(active)
        f = pick(cands[want_fold[cands] == want_fold[cands].max()])
        fold[i] = f
        want_fold[f] -= 1
    return fold


def split(ds: Dataset, spec: SplitSpec | None = None) -> tuple[Dataset, Dataset, Dataset]:
    spec = spec or SplitSpec()
    if len(ds) == 0:
        raise ValueError("cannot split an empty dataset")
    rng = np.random.default_rng(spec.seed)
    if spec.strategy == "random":
        perm = rng.permutation(len(ds))
        cuts = np.round(np.cumsum(spec.fractions)[:2] * len(ds)).astype(int)
        fold = np.empty(len(ds), dtype=int)
        for f, part in enumerate(np.split(perm, cuts)):
            fold[part] = f
    else:
        fold = iterative_stratification(ds.leaf_labels, spec.fractions, rng)
    parts = tuple(ds.subset(np.flatnonzero(fold == f)) for f in range(3))
    present = ds.leaf_labels.any(axis=0)
    if spec.fractions[0] > 0:
        lost = present & ~parts[0].leaf_labels.any(axis=0) if len(parts[0]) else present
        if lost.any():
            names = [ds.hierarchy.nodes[ds.hierarchy.leaf_ids[j]].name for j in np.flatnonzero(lost)]
            warnings.warn(f"leaf labels absent from the training fold: {names}", stacklevel=2)
    return parts


def kshot_sample(train: Dataset, k: int, seed: int = 0) -> tuple[Dataset, dict[str, int]]:
    """Up to ``k`` random samples per leaf, unioned without duplicates.

    Returns the subset and the realised per-leaf sample counts in it.
    """
    if k < 1:
        raise ValueError("k must be positive")
    rng = np.random.default_rng(seed)
    leaf_y = train.leaf_labels.astype(bool)
    chosen: set[int] = set()
    for j, leaf in enumerate(train.hierarchy.leaf_ids):
        rows = np.flatnonzero(leaf_y[:, j])
        if len(rows) == 0:
            raise ValueError(f"leaf {train.hierarchy.nodes[leaf].name!r} has no training samples")
        chosen.update(int(i) for i in rng.choice(rows, size=min(k, len(rows)), replace=False))
    sub = train.subset(sorted(chosen))
    realised = {train.hierarchy.nodes[leaf].name: int(c)
                for leaf, c in zip(train.hierarchy.leaf_ids, sub.leaf_labels.sum(axis=0))}
    return sub, realised
