"""Micro-averaged precision-recall, per-level reports, confusion deltas and parameter accounting."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .hierarchy import LabelHierarchy, level_partition


@dataclass
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray
    num_positive: int
    num_scores: int

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recall.tolist(), self.precision.tolist()))


def micro_pr(scores, truth) -> PrCurve:
    """Pool every (sample, label) pair and sweep the threshold from high to low.

    Tied scores form one threshold group, so the curve does not depend on
    the input order.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(truth).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} truth values")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("micro_pr needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    ends = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[ends]
    fp = ends + 1 - tp
    return PrCurve(recall=tp / n_pos, precision=tp / (tp + fp), thresholds=s[ends],
                   num_positive=n_pos, num_scores=s.size)


def auprc(curve: PrCurve) -> float:
    """Average-precision step rule: sum_k (R_k - R_{k-1}) P_k with R_0 = 0."""
    if curve.recall.size == 0:
        raise ValueError("empty precision-recall curve")
    dr = np.diff(np.r_[0.0, curve.recall])
    return float(np.sum(dr * curve.precision))


def micro_auprc(scores, truth) -> float:
    return auprc(micro_pr(scores, truth))


# ---------------------------------------------------------------- prediction dumps

@dataclass
class PredictionDump:
    """Per-image scores. ``scores`` is ``None`` for leaf-only (flat) models."""

    ids: list[str]
    leaf_scores: np.ndarray  # [N, n_leaves]
    scores: np.ndarray | None = None  # [N, |V|]
    per_level_argmax: list[list[str]] | None = None

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, sid in enumerate(self.ids):
                rec = {
                    "id": sid,
                    "scores": None if self.scores is None else self.scores[i].tolist(),
                    "leaf_scores": self.leaf_scores[i].tolist(),
                    "per_level_argmax": None if self.per_level_argmax is None else self.per_level_argmax[i],
                }
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "PredictionDump":
        recs = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
        full = all(r.get("scores") is not None for r in recs)
        return cls(
            ids=[r["id"] for r in recs],
            leaf_scores=np.array([r["leaf_scores"] for r in recs], dtype=np.float64),
            scores=np.array([r["scores"] for r in recs], dtype=np.float64) if full else None,
            per_level_argmax=[r.get("per_level_argmax") for r in recs] if full else None,
        )

    def align(self, ids: Sequence[str]) -> "PredictionDump":
        pos = {sid: i for i, sid in enumerate(self.ids)}
        missing = [sid for sid in ids if sid not in pos]
        if missing or len(ids) != len(self.ids):
            raise ValueError(f"sample-set mismatch between dump and truth ({len(missing)} missing)")
        idx = [pos[sid] for sid in ids]
        return PredictionDump(
            ids=list(ids),
            leaf_scores=self.leaf_scores[idx],
            scores=None if self.scores is None else self.scores[idx],
            per_level_argmax=None if self.per_level_argmax is None else [self.per_level_argmax[i] for i in idx],
        )


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    per_level_auprc: dict[str, float | None]
    leaf_auprc: float
    num_samples: int
    seed: int | None = None
    config_digest: str | None = None
    curves: dict[str, PrCurve] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("curves")
        return d

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def write_curves_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "recall", "precision"])
            for name, c in self.curves.items():
                for r, p in c.points():
                    w.writerow([name, repr(r), repr(p)])


def _safe_auprc(scores, truth) -> tuple[float | None, PrCurve | None]:
    if not np.asarray(truth).any():
        return None, None
    c = micro_pr(scores, truth)
    return auprc(c), c


def per_level_report(preds: PredictionDump, truth: np.ndarray, h: LabelHierarchy,
                     seed: int | None = None, config_digest: str | None = None) -> EvalReport:
    """Micro AU-PRC pooled within each level, plus the leaf set.

    ``truth`` is the [N, |V|] label matrix in the dump's sample order. Flat
    (leaf-only) dumps yield leaf metrics only.
    """
    truth = np.asarray(truth)
    levels, leaves = level_partition(h)
    if truth.shape != (len(preds.ids), len(h)):
        raise ValueError(f"truth shape {truth.shape} does not match {len(preds.ids)} samples x {len(h)} nodes")
    if preds.leaf_scores.shape != (len(preds.ids), len(leaves)):
        raise ValueError(f"leaf scores {preds.leaf_scores.shape} do not cover {len(leaves)} leaves")
    per_level: dict[str, float | None] = {}
    curves: dict[str, PrCurve] = {}
    if preds.scores is not None:
        if preds.scores.shape[1] != len(h):
            raise ValueError(f"dump covers {preds.scores.shape[1]} nodes, hierarchy has {len(h)}")
        for t, ids in enumerate(levels, start=1):
            val, c = _safe_auprc(preds.scores[:, ids], truth[:, ids])
            per_level[f"l{t}"] = val
            if c is not None:
                curves[f"l{t}"] = c
    leaf_val, c = _safe_auprc(preds.leaf_scores, truth[:, leaves])
    if c is not None:
        curves["leaf"] = c
    return EvalReport(per_level, leaf_val, len(preds.ids), seed, config_digest, curves)


# ---------------------------------------------------------------- confusion analysis

@dataclass
class ConfusionDelta:
    leaf_names: list[str]
    count_baseline: np.ndarray  # [n_leaf, n_leaf], row = true leaf, col = predicted leaf
    count_maple: np.ndarray

    @property
    def delta(self) -> np.ndarray:
        return self.count_maple - self.count_baseline

    @property
    def baseline_total(self) -> int:
        return int(self.count_baseline.sum())

    @property
    def maple_total(self) -> int:
        return int(self.count_maple.sum())

    @property
    def absolute_reduction(self) -> int:
        return self.baseline_total - self.maple_total

    @property
    def improvement_pct(self) -> float | None:
        if self.baseline_total == 0:
            return None
        return 100.0 * self.absolute_reduction / self.baseline_total

    def cells(self) -> list[dict]:
        out = []
        n = len(self.leaf_names)
        for i in range(n):
            for j in range(n):
                if i != j and (self.count_baseline[i, j] or self.count_maple[i, j]):
                    out.append({"true": self.leaf_names[i], "predicted": self.leaf_names[j],
                                "count_baseline": int(self.count_baseline[i, j]),
                                "count_maple": int(self.count_maple[i, j]),
                                "delta": int(self.delta[i, j])})
        return out

    def summary(self) -> dict:
        return {"baseline": self.baseline_total, "maple": self.maple_total,
                "improvement_pct": self.improvement_pct, "absolute_reduction": self.absolute_reduction}


def leaf_confusions(leaf_scores: np.ndarray, leaf_truth: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Count (true i, predicted j) pairs where j is a false positive and i is a true leaf."""
    called = np.asarray(leaf_scores) >= threshold
    truth = np.asarray(leaf_truth).astype(bool)
    false_pos = (called & ~truth).astype(np.int64)
    return truth.astype(np.int64).T @ false_pos


def confusion_delta(preds_a: PredictionDump, preds_b: PredictionDump, truth: np.ndarray,
                    h: LabelHierarchy, threshold: float = 0.5, ids: Sequence[str] | None = None) -> ConfusionDelta:
    """Leaf confusions of model b minus those of model a (a is the baseline)."""
    ids = list(ids) if ids is not None else list(preds_a.ids)
    a, b = preds_a.align(ids), preds_b.align(ids)
    leaves = h.leaf_ids
    leaf_truth = np.asarray(truth)[:, leaves]
    return ConfusionDelta(
        leaf_names=[h.nodes[i].name for i in leaves],
        count_baseline=leaf_confusions(a.leaf_scores, leaf_truth, threshold),
        count_maple=leaf_confusions(b.leaf_scores, leaf_truth, threshold),
    )


# ---------------------------------------------------------------- parameter accounting

PUBLISHED_PARAMS_M = {"flat": 86.57, "maple": 88.84, "overhead_pct": 2.6}


def count_by_component(shapes: dict[str, tuple[int, ...]]) -> dict[str, int]:
    from .model import COMPONENT_PREFIXES, component_of

    counts = {c: 0 for c in COMPONENT_PREFIXES}
    for name in sorted(shapes):
        counts[component_of(name)] += int(np.prod(shapes[name], dtype=np.int64))
    return counts


def param_account(model, baseline) -> dict:
    """Per-component counts for both models and the relative overhead.

    ``baseline`` is a flat :class:`MapleModel` sharing the encoder shape.
    Buffers are listed but excluded from the trainable totals.
    """
    if model.config.encoder != baseline.config.encoder:
        raise ValueError("models must share the encoder configuration")
    if not baseline.is_flat:
        raise ValueError("baseline must be a flat (leaf-only) model")
    maple = count_by_component({k: v.shape for k, v in model.state_dict().items()})
    flat = count_by_component({k: v.shape for k, v in baseline.state_dict().items()})
    maple_trainable = sum(v for k, v in maple.items() if k != "buffers")
    flat_trainable = sum(v for k, v in flat.items() if k != "buffers")
    return {
        "maple": {"components": maple, "trainable": maple_trainable, "total": sum(maple.values())},
        "flat": {"components": flat, "trainable": flat_trainable, "total": sum(flat.values())},
        "overhead_pct": 100.0 * (maple_trainable - flat_trainable) / flat_trainable,
        "published_reference": PUBLISHED_PARAMS_M,
    }
