"""One test per acceptance criterion; each records a PASS/FAIL line at its stated tolerance."""
import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from maple import tensor as T
from maple.cli import main
from maple.data import synth_dataset
from maple.encoder import EncoderConfig
from maple.fusion_head import adaptive_level_loss, fuse, replicate, total_loss
from maple.graph_refine import plan_from_edges, refine
from maple.hierarchy import contextual_description, from_dict, level_partition, load_fixture
from maple.metrics import micro_auprc, micro_pr
from maple.model import MapleModel, ModelConfig
from maple.semantic_init import EmbeddingProvider, embed_hierarchy
from maple.train import TrainConfig, fewshot_experiment, predict, train

from conftest import TOY_DOC
from oracles import brute_ap, level_loss_ref, micro_counts, random_graph
from test_graph_refine import layers_for, ref_layer


def test_c01_full_loss_gradient(criterion):
    h = from_dict(TOY_DOC)
    cfg = ModelConfig(encoder=EncoderConfig(image_size=8, patch_size=4, dim=16, depth=1, heads=2, mlp_ratio=2),
                      embed_dim=8, dropout=0.0, dtype="float64", seed=0)
    model = MapleModel(h, cfg)
    r = np.random.default_rng(0)
    # move zero-initialised tensors off their init so every term carries signal
    for p in model.parameters():
        p.data = p.data + 0.05 * r.standard_normal(p.shape)
    x = r.standard_normal((2, 3, 8, 8))
    y = np.array([[1, 0, 1, 0, 0], [1, 1, 1, 1, 1]])  # one CE-routed and one BCE-routed leaf row
    f = lambda: model.loss(model.forward(x).logits, y)
    t0 = time.perf_counter()
    # attention is invariant to the key bias, so those gradients are exactly zero and a central difference
    # sees only roundoff (~1e-16/eps); eps=1e-4 keeps that below the tolerance floor
    err = T.grad_check(f, model.parameters(), eps=1e-4)
    dt = time.perf_counter() - t0
    n = sum(p.data.size for p in model.parameters())
    ok = criterion(1, err < 1e-3 and dt < 30, f"max rel err {err:.2e} over {n} coords in {dt:.1f}s")
    assert ok


def test_c02_metric_oracle(criterion):
    r = np.random.default_rng(2)
    worst, counts_ok = 0.0, True
    for _ in range(1000):
        n = int(r.integers(1, 51))
        truth = (r.random(n) < r.random()).astype(int)
        truth[r.integers(n)] = 1
        scores = r.integers(0, int(r.integers(1, 12)), size=n) / 7.0
        worst = max(worst, abs(micro_auprc(scores, truth) - brute_ap(scores, truth)))
        # the same pairs as a [samples, classes] grid: every curve point equals a TP/FP/FN recount
        cols = int(r.integers(1, 4))
        rows = n // cols
        if rows == 0 or not truth[: rows * cols].any():
            continue
        S, Y = scores[: rows * cols].reshape(rows, cols), truth[: rows * cols].reshape(rows, cols)
        c = micro_pr(S, Y)
        for thr, rec, prec in zip(c.thresholds, c.recall, c.precision):
            tp, fp, fn = micro_counts(S, Y, thr)
            counts_ok &= rec == tp / (tp + fn) and prec == tp / (tp + fp)
    ok = criterion(2, worst <= 1e-12 and counts_ok,
                   f"max |AP - brute| {worst:.1e} on 1000 instances; micro counts exact: {counts_ok}")
    assert ok


def test_c03_fusion_identities(criterion):
    r = np.random.default_rng(3)
    bad = 0
    for _ in range(100):
        B, M, d = (int(v) for v in r.integers(1, 6, size=3))
        z, E = T.Tensor(r.standard_normal((B, d))), T.Tensor(r.standard_normal((B, M, d)))
        bad += not np.array_equal(fuse(z, E, T.Tensor(np.ones((B, M, d)))).data, E.data)
        bad += not np.array_equal(fuse(z, E, T.Tensor(np.zeros((B, M, d)))).data, replicate(z, M).data)
        out = fuse(z, E, T.Tensor(r.random((B, M, d)))).data
        lo, hi = np.minimum(E.data, z.data[:, None]), np.maximum(E.data, z.data[:, None])
        bad += not np.all((out >= lo - 1e-7) & (out <= hi + 1e-7))
    ok = criterion(3, bad == 0, f"{bad} violations over 100 instances x 3 identities")
    assert ok


def test_c04_graph_oracle_and_equivariance(criterion):
    r = np.random.default_rng(4)
    worst, perm_exact = 0.0, True
    for g in range(50):
        n, edges = random_graph(r, int(r.integers(1, 13)))
        plan = plan_from_edges(n, edges)
        _, layers = layers_for(int(r.integers(1, 4)), 4, g)
        H = r.standard_normal((2, n, 4))
        ref = H
        for layer in layers:
            ref = ref_layer(ref, plan, layer)
        got = refine(T.Tensor(H), plan, layers).data
        worst = max(worst, float(np.max(np.abs(got - ref))))
        perm = r.permutation(n)
        inv = np.argsort(perm)  # new label of old node v is inv[v]
        plan_p = plan_from_edges(n, [(int(inv[a]), int(inv[b])) for a, b in edges])
        got_p = refine(T.Tensor(H[:, perm]), plan_p, layers).data
        perm_exact &= bool(np.array_equal(got_p, got[:, perm]))
    ok = criterion(4, worst < 1e-6 and perm_exact,
                   f"max |vectorised - loop| {worst:.1e} on 50 graphs; relabeling exact: {perm_exact}")
    assert ok


def test_c05_loss_routing(criterion):
    def loss(logits, y):
        return float(adaptive_level_loss(T.Tensor(np.array(logits, float)), np.array(y)).data)

    errs = [abs(loss([[0, 0, 0]], [[0, 1, 0]]) - math.log(3)),
            abs(loss([[0, 0, 0]], [[1, 1, 0]]) - math.log(2)),
            abs(loss([[0, 0, 0], [0, 0, 0]], [[0, 0, 1], [1, 0, 1]]) - (math.log(3) + math.log(2)) / 2)]
    r = np.random.default_rng(5)
    for _ in range(200):
        x = 3 * r.standard_normal((int(r.integers(1, 5)), int(r.integers(1, 6))))
        y = (r.random(x.shape) < 0.4).astype(int)
        errs.append(abs(loss(x, y) - level_loss_ref(x.tolist(), y.tolist())))
    h = load_fixture("aid")
    part = level_partition(h)
    x = r.standard_normal((4, len(h)))
    y = (r.random((4, len(h))) < 0.3).astype(int)
    per_level = [level_loss_ref(x[:, ids].tolist(), y[:, ids].tolist()) for ids in part[0]]
    errs.append(abs(float(total_loss(T.Tensor(x), y, part).data) - sum(per_level) / len(per_level)))
    ok = criterion(5, max(errs) < 1e-9, f"max error {max(errs):.1e} (ln3, ln2, mixed, 200 random, level mean)")
    assert ok


def test_c06_init_invariants(criterion, tmp_path):
    h = load_fixture("aid")
    model = MapleModel(h, ModelConfig(encoder=EncoderConfig(dim=64), embed_dim=768))
    norm_err = float(np.max(np.abs(np.linalg.norm(model.class_tokens().data, axis=1) - 1.0)))
    code = ("import sys; from maple import load_fixture; from maple.semantic_init import EmbeddingProvider, "
            "embed_hierarchy; sys.stdout.buffer.write(embed_hierarchy(load_fixture('aid'), "
            "EmbeddingProvider('deterministic_fallback', dim=768)).tobytes())")
    env = {k: v for k, v in os.environ.items() if k != "PYTHONHASHSEED"}
    runs = [subprocess.run([sys.executable, "-c", code], capture_output=True, env={**env, "PYTHONHASHSEED": s}).stdout
            for s in ("1", "2")]
    here = embed_hierarchy(h, EmbeddingProvider("deterministic_fallback", dim=768)).tobytes()
    reproducible = runs[0] == runs[1] == here and len(here) > 0
    ship = load_fixture("corine_ship")
    prompts_ok = (
        contextual_description(ship, ship.id_of("ship"))
        == "The category 'ship' which is a subcategory of Industrial, Commercial and Transport Units."
        and contextual_description(ship, ship.id_of("Industrial, Commercial and Transport Units"))
        == "The category 'Industrial, Commercial and Transport Units' which is a subcategory of Artificial Surfaces "
           "and includes subcategories like airplane, cars, court, dock, ship, and storage tanks")
    ok = criterion(6, norm_err < 1e-6 and reproducible and prompts_ok,
                   f"max |norm-1| {norm_err:.1e}; fallback byte-identical across processes: {reproducible}; "
                   f"prompts verbatim: {prompts_ok}")
    assert ok


def test_c07_memorization(criterion):
    h = load_fixture("aid")
    ds = synth_dataset(h, 32, seed=0)
    base = dict(lr=1e-3, total_epochs=200, warmup_epochs=5, dropout=0.0, embed_dim=64,
                encoder=EncoderConfig(dim=64), seed=0)
    t0 = time.perf_counter()
    res = train(h, ds, TrainConfig(**base))
    dt = time.perf_counter() - t0
    dump = predict(res.model, ds)
    score = micro_auprc(dump.leaf_scores, ds.leaf_labels)
    # diagnostics: per-level fit (the loss is routed per level) and the same encoder trained leaf-only
    logits = res.model.forward(ds.images).logits.data
    Y = ds.labels.astype(bool)
    levels, leaves = level_partition(h)
    per_level = []
    for t, ids in enumerate(levels, start=1):
        x, y = logits[:, ids], Y[:, ids]
        rows = [i for i in range(len(ds)) if y[i].any() and (~y[i]).any()]
        sep = np.mean([x[i][y[i]].min() > x[i][~y[i]].max() for i in rows])
        per_level.append(f"l{t} AU-PRC {micro_auprc(x, y):.4f} row-sep {sep:.2f}")
    leaf_levels = np.array([h.nodes[i].level for i in leaves])
    by_depth = ", ".join(f"leaves on l{lv} {micro_auprc(dump.leaf_scores[:, leaf_levels == lv], ds.leaf_labels[:, leaf_levels == lv]):.4f}"
                         for lv in np.unique(leaf_levels))
    flat = train(h, ds, TrainConfig(**base, model_mode="flat"))
    flat_score = micro_auprc(predict(flat.model, ds).leaf_scores, ds.leaf_labels)
    detail = (f"train leaf AU-PRC {score:.4f} (need > 0.99) in {dt:.0f}s, final loss {res.log[-1]['train_loss']:.1e}; "
              f"{'; '.join(per_level)}; {by_depth}; flat baseline same recipe {flat_score:.4f}")
    ok = criterion(7, score > 0.99 and dt < 120, detail)
    assert ok, detail


@pytest.mark.slow
def test_c08_fewshot_direction(criterion, tmp_path):
    out_dir = Path(os.environ.get("MAPLE_ACCEPTANCE_OUT", tmp_path)) / "fewshot"
    h = load_fixture("aid")
    ds = synth_dataset(h, 600, seed=0, noise=0.5)
    cfg = TrainConfig(lr=1e-3, total_epochs=40, warmup_epochs=3, dropout=0.1, embed_dim=64,
                      encoder=EncoderConfig(dim=64), seed=0)
    t0 = time.perf_counter()
    res = fewshot_experiment(ds, cfg, ks=(4, 8), repeats=3, out_dir=out_dir)
    dt = time.perf_counter() - t0
    means = {k: (res.mean_std("maple", k)[0], res.mean_std("flat", k)[0]) for k in (4, 8)}
    direction = all(m >= f for m, f in means.values())
    table = (out_dir / "fewshot.csv").read_text()
    print(table)
    detail = ", ".join(f"K={k}: MAPLE {m:.3f} vs flat {f:.3f}" for k, (m, f) in means.items())
    ok = criterion(8, direction and dt < 900, f"{detail} in {dt:.0f}s; artifacts in {out_dir}")
    assert ok


def test_c09_parameter_accounting(criterion, tmp_path, capsys):
    code = main(["report", "params", "--json", str(tmp_path / "params.json")])
    table = capsys.readouterr().out
    acct = json.loads((tmp_path / "params.json").read_text())
    d, M = 768, 35
    sums_ok = all(acct[m]["walk_matches"] and acct[m]["walk_total"] == sum(acct[m]["components"].values())
                  for m in ("maple", "flat"))
    comp = acct["maple"]["components"]
    shape_ok = (acct["config"]["hierarchy_nodes"] == M and comp["gnn"] == 2 * (2 * d * d + 3 * d)
                and comp["gate"] == 2 * d * d + 3 * d)
    print(table)
    ok = criterion(9, code == 0 and sums_ok and shape_ok and "overhead" in table,
                   f"components sum to walk total: {sums_ok}; overhead {acct['overhead_pct']:+.2f}% "
                   f"reported against published +2.6% (reconciled in README)")
    assert ok


def test_c10_fixtures(criterion):
    got = {}
    for name in ("aid", "dfc15"):
        h = load_fixture(name)
        levels, leaves = level_partition(h)
        got[name] = ([len(l) for l in levels], len(leaves))
    ok = criterion(10, got == {"aid": ([4, 9, 15, 7], 17), "dfc15": ([3, 7, 7], 8)}, f"{got}")
    assert ok


def test_c11_determinism(criterion, tmp_path):
    import yaml

    assert main(["data", "synth", "--hierarchy", "dfc15", "--n", "40", "--seed", "3", "--image-size", "16",
                 "--out", str(tmp_path / "data")]) == 0
    (tmp_path / "cfg.yaml").write_text(yaml.safe_dump(
        {"encoder": {"image_size": 16, "patch_size": 8, "dim": 16, "depth": 1, "heads": 2}, "embed_dim": 16,
         "batch_size": 8, "warmup_epochs": 1, "total_epochs": 4, "lr": 1e-3}))
    for run in ("a", "b"):
        assert main(["train", "--config", str(tmp_path / "cfg.yaml"), "--data", str(tmp_path / "data"),
                     "--seed", "7", "--out", str(tmp_path / run)]) == 0
        assert main(["eval", "--checkpoint", str(tmp_path / run / "checkpoint.bin"), "--data", str(tmp_path / "data"),
                     "--report", str(tmp_path / run / "report.json")]) == 0
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("checkpoint.bin", "checkpoint.json", "report.json", "train_log.jsonl")}
    ok = criterion(11, all(same.values()), f"bit-identical: {same}")
    assert ok
