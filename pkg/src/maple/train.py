"""Optimisation loop, prediction and the few-shot experiment harness."""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, SplitSpec, kshot_sample, split
from .encoder import EncoderConfig
from .fusion_head import per_level_argmax, sigmoid_scores
from .hierarchy import LabelHierarchy, ancestors, is_consistent
from .metrics import EvalReport, PredictionDump, micro_auprc, per_level_report
from .model import MapleModel, ModelConfig
from .semantic_init import EmbeddingProvider

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    warmup_epochs: int = 10
    total_epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    init_mode: str = "semantic"
    model_mode: str = "maple"
    gnn_layers: int = 2
    dropout: float = 0.1
    patience: int | None = None
    grad_clip: float | None = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    pool_source: str = "fused"
    embed_dim: int = 768
    provider: str = "deterministic_fallback"
    dtype: str = "float32"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        self.betas = tuple(self.betas)
        if self.total_epochs < 1 or not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self) -> ModelConfig:
        return ModelConfig(encoder=copy.deepcopy(self.encoder), mode=self.model_mode, init_mode=self.init_mode,
                           gnn_layers=self.gnn_layers, dropout=self.dropout, embed_dim=self.embed_dim,
                           pool_source=self.pool_source, provider=self.provider, seed=self.seed,
                           dtype=self.dtype)


# ---------------------------------------------------------------- schedule & optimiser

def lr_schedule(step: int, steps_per_epoch: int, config: TrainConfig) -> float:
    """Linear warmup from 0, then cosine decay to 0 at ``total_epochs``."""
    warm = config.warmup_epochs * steps_per_epoch
    total = config.total_epochs * steps_per_epoch
    if step < warm:
        return config.lr * step / warm
    progress = min(1.0, (step - warm) / max(1, total - warm))
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """In-place AdamW update with decoupled weight decay and bias-corrected moments."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p)
            state.v[i] = np.zeros_like(p)
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(grads: Sequence[np.ndarray | None], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads if g is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            if g is not None:
                g *= scale
    return total


# ---------------------------------------------------------------- prediction

def predict(model: MapleModel, ds: Dataset, batch_size: int = 64, consistent: bool = False) -> PredictionDump:
    """Sigmoid scores for every node (or every leaf, for flat models).

    ``consistent`` caps each node's score by its ancestors' scores, so any
    threshold gives a hierarchy-consistent label set.
    """
    h = model.hierarchy
    logits = []
    for start in range(0, len(ds), batch_size):
        logits.append(model.forward(ds.images[start:start + batch_size], training=False).logits.data)
    logits = np.concatenate(logits) if logits else np.zeros((0, model.num_outputs))
    if model.is_flat:
        return PredictionDump(list(ds.ids), sigmoid_scores(logits))
    scores = sigmoid_scores(logits)
    if consistent:
        for n in h.nodes:  # level-major order, parents are already capped
            if n.parent_ids:
                scores[:, n.id] = np.minimum(scores[:, n.id], scores[:, list(n.parent_ids)].max(axis=1))
    argmax = per_level_argmax(logits, model.partition[0])
    names = [[h.nodes[int(a[i])].name for a in argmax] for i in range(len(ds))]
    return PredictionDump(list(ds.ids), scores[:, h.leaf_ids], scores, names)


def evaluate(model: MapleModel, ds: Dataset, seed: int | None = None) -> tuple[EvalReport, PredictionDump]:
    dump = predict(model, ds)
    return per_level_report(dump, ds.labels, ds.hierarchy, seed, model.config.digest()), dump


def leaf_auprc(model: MapleModel, ds: Dataset) -> float:
    return micro_auprc(predict(model, ds).leaf_scores, ds.leaf_labels)


# ---------------------------------------------------------------- training

class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    model: MapleModel
    log: list[dict]
    best_epoch: int
    checkpoint: Path | None = None


def train(h: LabelHierarchy, train_ds: Dataset, config: TrainConfig, val_ds: Dataset | None = None,
          out_dir: str | Path | None = None, model: MapleModel | None = None,
          provider: EmbeddingProvider | None = None) -> TrainResult:
    """Train MAPLE or the flat baseline.

    With a validation set, leaf AU-PRC is measured each epoch and the best
    parameters are restored at the end (early stopping after ``patience``
    epochs without improvement, if set). Without one the final parameters
    are kept.
    """
    if train_ds.hierarchy.digest() != h.digest():
        raise ValueError("dataset hierarchy differs from the training hierarchy")
    for y in train_ds.labels:
        if not is_consistent(h, y):
            raise ValueError("training targets violate hierarchy consistency")
    model = model or MapleModel(h, config.model_config(), provider=provider)
    params = model.parameters()
    state = AdamState()
    order_rng = np.random.default_rng([config.seed, 11])
    drop_rng = np.random.default_rng([config.seed, 12])
    n = len(train_ds)
    spe = math.ceil(n / config.batch_size)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    records: list[dict] = []
    best_score, best_epoch, stale = -math.inf, -1, 0
    best_params = [p.data.copy() for p in params]
    last_good = best_params
    step, lr = 0, 0.0

    def finish(epoch_reached):
        for p, b in zip(params, best_params):
            p.data = b.copy()
        path = None
        if out is not None:
            path = model.save(out / "checkpoint.bin", {"train_config": config.to_dict(), "best_epoch": best_epoch,
                                                      "epochs_run": epoch_reached})
            with open(out / "train_log.jsonl", "w") as fh:
                for r in records:
                    fh.write(json.dumps(r) + "\n")
        return path

    for epoch in range(config.total_epochs):
        t0 = time.perf_counter()
        perm = order_rng.permutation(n)
        losses = []
        try:
            for start in range(0, n, config.batch_size):
                idx = perm[start:start + config.batch_size]
                lr = lr_schedule(step, spe, config)
                out_f = model.forward(train_ds.images[idx], training=True, rng=drop_rng)
                loss = model.loss(out_f.logits, train_ds.labels[idx])
                T.backward(loss)
                grads = [p.grad for p in params]
                if config.grad_clip:
                    clip_grad_norm(grads, config.grad_clip)
                adamw_step([p.data for p in params], grads, state, lr, config.betas, config.eps,
                           config.weight_decay)
                for p in params:
                    if not np.all(np.isfinite(p.data)):
                        raise T.NonFiniteError("parameters became non-finite")
                losses.append(loss.item())
                step += 1
        except T.NonFiniteError as exc:
            records.append({"epoch": epoch, "lr": lr, "train_loss": None, "val_auprc": None, "diverged": True})
            if val_ds is None:
                best_params = last_good
            path = finish(epoch)
            raise TrainingDiverged(f"training diverged in epoch {epoch}: {exc}", path) from exc
        last_good = [p.data.copy() for p in params]
        val = leaf_auprc(model, val_ds) if val_ds is not None else None
        rec = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "val_auprc": val}
        records.append(rec)
        log.debug("epoch %d loss %.4f val %s (%.2fs)", epoch, rec["train_loss"], val, time.perf_counter() - t0)
        if val_ds is None:
            best_params, best_epoch = last_good, epoch
            continue
        if val > best_score:
            best_score, best_epoch, stale = val, epoch, 0
            best_params = last_good
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                break
    path = finish(epoch + 1)
    return TrainResult(model, records, best_epoch, path)


# ---------------------------------------------------------------- few-shot harness

@dataclass
class FewShotResult:
    ks: list[int]
    # scores[mode][k] -> list of test leaf AU-PRC, one per repeat
    scores: dict[str, dict[int, list[float]]]
    realised: dict[str, dict[int, list[dict]]] = field(default_factory=dict)
    logs: dict[str, dict[int, list[list[dict]]]] = field(default_factory=dict)

    def mean_std(self, mode: str, k: int) -> tuple[float, float]:
        vals = np.asarray(self.scores[mode][k])
        return float(vals.mean()), float(vals.std())

    def to_csv(self) -> str:
        """Rows MLC / MAPLE / Delta (%), one column per K, cells ``mean±std``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Method"] + [f"{k}-shot" for k in self.ks])
        for mode, label in (("flat", "MLC"), ("maple", "MAPLE")):
            if mode in self.scores:
                w.writerow([label] + ["{:.3f}±{:.3f}".format(*self.mean_std(mode, k)) for k in self.ks])
        if "flat" in self.scores and "maple" in self.scores:
            row = []
            for k in self.ks:
                f, m = self.mean_std("flat", k)[0], self.mean_std("maple", k)[0]
                row.append(f"{100.0 * (m - f) / f:+.1f}" if f else "nan")
            w.writerow(["Delta (%)"] + row)
        return buf.getvalue()


def fewshot_experiment(ds: Dataset, base: TrainConfig, ks: Sequence[int] = (4, 8, 12, 16), repeats: int = 3,
                       modes: Sequence[str] = ("flat", "maple"), split_seed: int = 0,
                       out_dir: str | Path | None = None,
                       provider: EmbeddingProvider | None = None) -> FewShotResult:
    """K-shot training per leaf on an 80/20 stratified split; test leaf AU-PRC per run.

    The validation fold (10% of the training split) drives model selection.
    Repeat ``r`` uses seed ``base.seed + r`` for both the K-shot draw and
    the model, identically across modes.
    """
    h = ds.hierarchy
    train_full, val, test = split(ds, SplitSpec((0.72, 0.08, 0.2), "iterative_stratified", split_seed))
    result = FewShotResult(list(ks), {m: {k: [] for k in ks} for m in modes},
                           {m: {k: [] for k in ks} for m in modes}, {m: {k: [] for k in ks} for m in modes})
    for k in ks:
        for r in range(repeats):
            seed = base.seed + r
            sub, realised = kshot_sample(train_full, k, seed=seed)
            for mode in modes:
                cfg = copy.deepcopy(base)
                cfg.model_mode, cfg.seed = mode, seed
                run_dir = Path(out_dir) / f"k{k}_r{r}_{mode}" if out_dir is not None else None
                res = train(h, sub, cfg, val_ds=val, out_dir=run_dir, provider=provider)
                report, dump = evaluate(res.model, test, seed)
                if run_dir is not None:
                    report.write_json(run_dir / "report.json")
                    dump.write_jsonl(run_dir / "test_predictions.jsonl")
                result.scores[mode][k].append(report.leaf_auprc)
                result.realised[mode][k].append(realised)
                result.logs[mode][k].append(res.log)
                log.info("k=%d repeat=%d %s: leaf AU-PRC %.4f (n_train=%d)", k, r, mode, report.leaf_auprc, len(sub))
    if out_dir is not None:
        Path(out_dir, "fewshot.csv").write_text(result.to_csv())
    return result


# ---------------------------------------------------------------- embedding export

EMBEDDING_STAGES = ("init", "learned", "gnn", "fused")


def node_embeddings(model: MapleModel, stage: str, ds: Dataset | None = None, batch_size: int = 64) -> np.ndarray:
    """One [|V|, d] matrix per stage.

    ``init`` rebuilds the untrained tokens from the stored config and seed,
    ``learned`` is the trained class tokens, and ``gnn``/``fused`` are the
    image-conditioned node states averaged over ``ds``.
    """
    if model.is_flat:
        raise ValueError("flat models have no node embeddings")
    if stage not in EMBEDDING_STAGES:
        raise ValueError(f"stage must be one of {EMBEDDING_STAGES}, got {stage!r}")
    if stage == "init":
        fresh = MapleModel(model.hierarchy, model.config, psi=model.psi)
        return fresh.class_tokens().data.copy()
    if stage == "learned":
        return model.class_tokens().data.copy()
    if ds is None or len(ds) == 0:
        raise ValueError(f"stage {stage!r} needs images")
    total = np.zeros((len(model.hierarchy), model.config.encoder.dim))
    for start in range(0, len(ds), batch_size):
        out = model.forward(ds.images[start:start + batch_size], training=False)
        total += (out.gnn if stage == "gnn" else out.fused).data.sum(axis=0)
    return total / len(ds)


def write_embeddings_csv(path: str | Path, model: MapleModel, emb: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "name", "level", "is_leaf"] + [f"e{j}" for j in range(emb.shape[1])])
        for n in model.hierarchy.nodes:
            w.writerow([n.id, n.name, n.level, int(n.is_leaf)] + [repr(float(v)) for v in emb[n.id]])
