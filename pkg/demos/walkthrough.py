"""Train the hierarchical model and the flat baseline on a small synthetic set and compare them.

Run with ``python3 demos/walkthrough.py [out_dir]``; takes about a minute on one CPU core.
"""
import sys
from pathlib import Path

import numpy as np

from maple import load_fixture
from maple.data import SplitSpec, split, synth_dataset
from maple.encoder import EncoderConfig
from maple.metrics import confusion_delta
from maple.train import TrainConfig, evaluate, node_embeddings, train, write_embeddings_csv

out = Path(sys.argv[1] if len(sys.argv) > 1 else "walkthrough_out")
h = load_fixture("dfc15")
print(f"hierarchy: {len(h)} nodes, leaves {[h.nodes[i].name for i in h.leaf_ids]}")

# leaf evidence is a local texture; parents share coarse structure with their children
ds = synth_dataset(h, 240, seed=0, noise=0.5)
tr, val, test = split(ds, SplitSpec((0.7, 0.1, 0.2), seed=0))
print(f"split sizes: train {len(tr)}, val {len(val)}, test {len(test)}")

base = dict(lr=1e-3, total_epochs=15, warmup_epochs=2, embed_dim=64, encoder=EncoderConfig(dim=64), seed=0)
runs = {}
for mode in ("flat", "maple"):
    res = train(h, tr, TrainConfig(**base, model_mode=mode), val_ds=val, out_dir=out / mode)
    report, dump = evaluate(res.model, test)
    runs[mode] = (res, report, dump)
    levels = {k: round(v, 3) for k, v in report.per_level_auprc.items() if v is not None}
    print(f"{mode:>5}: best epoch {res.best_epoch}, test leaf AU-PRC {report.leaf_auprc:.3f} {levels}")

# which leaf confusions does the hierarchical model remove?
delta = confusion_delta(runs["flat"][2], runs["maple"][2], test.labels, h, 0.5, ids=test.ids)
print("confusions at threshold 0.5:", delta.summary())

# node embeddings before and after training
model = runs["maple"][0].model
for stage in ("init", "learned", "fused"):
    emb = node_embeddings(model, stage, test if stage == "fused" else None)
    write_embeddings_csv(out / f"embeddings_{stage}.csv", model, emb)
    unit = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    cos = unit @ unit.T
    pairs = [(p, c) for c in range(len(h)) for p in h.nodes[c].parent_ids]
    print(f"{stage:>7}: mean parent-child cosine {np.mean([cos[p, c] for p, c in pairs]):.3f}, "
          f"mean over all pairs {cos[np.triu_indices(len(h), 1)].mean():.3f}")
