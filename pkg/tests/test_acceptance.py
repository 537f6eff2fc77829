"""Acceptance gate: one PASS/FAIL/SKIP line per criterion.

Run ``pytest tests/test_acceptance.py`` (lines appear in the terminal summary)
or ``python tests/test_acceptance.py``. Tolerances are pinned below.

The desk-scale end-to-end run (criterion 6) trains the default model for 20
epochs on 200 synthetic documents and takes roughly ten minutes on one CPU
core. Criterion 8 needs real HierDoc data plus pretrained extractors: point
``TOCEXTRACT_HIERDOC`` at a directory with ``train/`` and ``test/`` corpora and
``TOCEXTRACT_PRETRAINED`` at a vision backbone state dict.
"""
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F

sys.path.insert(0, str(Path(__file__).parent))

from oracles import brute_force_ted, random_tree  # noqa: E402
from test_classifier import classifier_gradient_errors  # noqa: E402
from test_decoder import decoder_gradient_errors, run_decode  # noqa: E402
from test_encoder import gated_gradient_errors  # noqa: E402
from test_treeops import random_toc  # noqa: E402

from tocextract.ablation import format_table, run_ablation  # noqa: E402
from tocextract.classifier import focal_loss  # noqa: E402
from tocextract.data import SyntheticSpec, load_corpus, synthesize_corpus  # noqa: E402
from tocextract.metrics import tree_edit_distance  # noqa: E402
from tocextract.model import ModelConfig, TocModel  # noqa: E402
from tocextract.training import TrainingConfig, evaluate, train  # noqa: E402
from tocextract.treeops import serialize_headings, steps_from_ids, tree_from_steps  # noqa: E402

# pinned tolerances
TED_PAIRS, TED_MAX_NODES, TED_SECONDS = 200, 7, 60.0
ROUND_TRIPS, ROUND_TRIP_NODES, ROUND_TRIP_DEPTH, ROUND_TRIP_SPLIT = 500, 30, 5, 0.2
GRAD_REL_ERR = 1e-3
CE_TOL, CE_CASES = 1e-9, 100
DECODES = 100
E2E_TRAIN, E2E_TEST, E2E_VAL, E2E_EPOCHS = 200, 50, 25, 20
E2E_TEDS, E2E_F1, E2E_MINUTES = 0.90, 0.90, 60.0
ABLATION_DOCS, ABLATION_EPOCHS, MAX_DEPTH = 20, 2, 5
REFERENCE_TEDS, REFERENCE_F1, REFERENCE_BAND = 0.872, 0.881, 0.02

RESULTS: dict[int, str] = {}


def report(number, name, status, detail):
    line = f"criterion {number} [{status}] {name}: {detail}"
    RESULTS[number] = line
    print(line, flush=True)


def check(number, name, ok, detail):
    report(number, name, "PASS" if ok else "FAIL", detail)
    assert ok, detail


def test_c1_ted_oracle_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(TED_PAIRS):
        a, b = random_tree(rng, TED_MAX_NODES), random_tree(rng, TED_MAX_NODES)
        mismatches += tree_edit_distance(a, b) != brute_force_ted(a, b)
    seconds = time.perf_counter() - t0
    check(1, "TED matches brute-force oracle", mismatches == 0 and seconds < TED_SECONDS,
          f"{mismatches} mismatches on {TED_PAIRS} pairs (<= {TED_MAX_NODES} nodes) "
          f"in {seconds:.2f}s (limit {TED_SECONDS:.0f}s)")


def test_c2_structural_round_trip():
    rng = np.random.default_rng(500)
    failures = splits = 0
    for _ in range(ROUND_TRIPS):
        toc = random_toc(rng, ROUND_TRIP_NODES, ROUND_TRIP_DEPTH)
        ents = serialize_headings(toc, split_prob=ROUND_TRIP_SPLIT, rng=rng)
        steps = steps_from_ids(ents)
        splits += len(ents) - (toc.size() - 1)
        failures += tree_from_steps(steps, [e.content for e in ents]).shape() != toc.shape()
    check(2, "ids -> steps -> tree round trip", failures == 0,
          f"{failures} failures on {ROUND_TRIPS} trees ({splits} split fragments)")


def test_c3_gradient_checks():
    errs = {}
    errs.update({f"gate.{k}": v for k, v in gated_gradient_errors(np.random.default_rng(3)).items()})
    errs.update({f"classifier.{k}": v for k, v in classifier_gradient_errors().items()})
    errs.update({f"decoder.{k}": v for k, v in decoder_gradient_errors().items()})
    worst = max(errs, key=errs.get)
    check(3, "analytic vs finite-difference gradients", errs[worst] < GRAD_REL_ERR,
          f"worst relative error {errs[worst]:.2e} ({worst}) over {len(errs)} tensors "
          f"(limit {GRAD_REL_ERR:g})")


def test_c4_focal_reduces_to_cross_entropy():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(CE_CASES):
        k = int(rng.integers(2, 12))
        logits = torch.from_numpy(rng.normal(size=(1, k)) * 3)
        target = torch.tensor([int(rng.integers(0, k))])
        fl = focal_loss(F.softmax(logits, -1), target, gamma=0.0, alpha=1.0)
        worst = max(worst, abs(float(fl) - float(F.cross_entropy(logits, target))))
    check(4, "focal loss (gamma=0, alpha=1) equals cross-entropy", worst < CE_TOL,
          f"max |FL - CE| = {worst:.2e} over {CE_CASES} distributions (limit {CE_TOL:g})")


def test_c5_decoder_invariants():
    spec = SyntheticSpec(seed=55, n_docs=DECODES, max_headings=16)
    config = ModelConfig(d=32, n_buckets=256, text_hidden=32, classifier_hidden=16,
                         decoder_hidden=32, attn_dim=32, n_layers=2, n_heads=2, ff_dim=64)
    bad = {"one_hot": 0, "causal": 0, "context": 0, "coverage": 0}
    n_steps = 0
    for k, rec in enumerate(synthesize_corpus(spec)):
        torch.manual_seed(k)
        model = TocModel(config).eval()
        with torch.no_grad():
            feats = model.features(model.prepare(rec))
        m_hat = feats.f[[i for i, e in enumerate(rec.document.entities) if e.heading]]
        M, records = run_decode(model.decoder, m_hat)
        for s, (one_hot, coverage, c, sel, _) in enumerate(records, start=1):
            n_steps += 1
            bad["one_hot"] += int((one_hot == 1).sum()) != 1 or int((one_hot != 0).sum()) != 1
            bad["causal"] += not sel < s
            bad["context"] += not torch.equal(c, M[sel])
            bad["coverage"] += int(coverage.sum()) != s - 1
        steps = model.decoder.decode(m_hat)
        bad["causal"] += sum(not st.reference < st.current for st in steps)
    check(5, "decoder one-hot / causal / exact-context invariants", not any(bad.values()),
          f"{sum(bad.values())} violations {bad} over {DECODES} documents, {n_steps} steps")


def test_c6_desk_scale_end_to_end():
    train_docs = synthesize_corpus(SyntheticSpec(n_docs=E2E_TRAIN))
    val_docs = synthesize_corpus(SyntheticSpec(n_docs=E2E_VAL, start_index=50_000))
    test_docs = synthesize_corpus(SyntheticSpec(n_docs=E2E_TEST, start_index=100_000))
    t0 = time.perf_counter()
    result = train(TrainingConfig(epochs=E2E_EPOCHS), train_docs, val_docs)
    minutes = (time.perf_counter() - t0) / 60
    corpus = evaluate(result.model, test_docs).corpus()
    ok = corpus["teds"] >= E2E_TEDS and corpus["pair_f1"] >= E2E_F1 and minutes <= E2E_MINUTES
    check(6, "synthetic end-to-end (200 train / 50 test, 20 epochs)", ok,
          f"test TEDS {corpus['teds']:.4f} (>= {E2E_TEDS}), pair F1 {corpus['pair_f1']:.4f} "
          f"(>= {E2E_F1}), detection F1 {corpus['detection_f1']:.4f}; best epoch "
          f"{result.best_epoch} by validation TEDS; {minutes:.1f} min (limit {E2E_MINUTES:.0f})")


def test_c7_ablation_harness():
    docs = synthesize_corpus(SyntheticSpec(seed=7, n_docs=ABLATION_DOCS))
    train_docs, eval_docs = docs[:15], docs[15:]
    rows = run_ablation(TrainingConfig(epochs=ABLATION_EPOCHS), train_docs, eval_docs)
    print(format_table(rows))
    groups = {g: [r for r in rows if r.group == g] for g in ("mask", "fusion", "decoding")}
    depth_row = next(r for r in groups["decoding"] if r.name == "depth classes")
    # a short run may detect few headings, so also push gold headings through a
    # depth head biased to the deepest class: the tree must hit the cap, not pass it
    torch.manual_seed(7)
    probe = TocModel(ModelConfig(decoding="depth")).eval()
    with torch.no_grad():
        probe.decoder.head.bias[-1] = 50.0
    probe_depths = [probe.predict(rec, headings=[i for i, e in enumerate(rec.document.entities)
                                                  if e.heading]).tree.depth() for rec in docs]
    ok = (len(groups["mask"]) == 4 and len(groups["fusion"]) == 4
          and depth_row.max_depth <= MAX_DEPTH and max(probe_depths) == MAX_DEPTH
          and all(np.isfinite(r.teds) for r in rows))
    check(7, "ablation harness (4 masks, 4 fusions, depth baseline)", ok,
          f"{len(rows)} variants on {ABLATION_DOCS} documents; depth-baseline max tree depth "
          f"{depth_row.max_depth} trained, {max(probe_depths)} on gold headings "
          f"(limit {MAX_DEPTH})")


def test_c8_full_scale():
    data = os.environ.get("TOCEXTRACT_HIERDOC")
    backbone = os.environ.get("TOCEXTRACT_PRETRAINED")
    if not data or not backbone:
        report(8, "full-scale HierDoc check", "SKIP",
               "needs HierDoc data (TOCEXTRACT_HIERDOC) and pretrained extractors "
               "(TOCEXTRACT_PRETRAINED); not available at desk scale")
        pytest.skip("HierDoc and pretrained extractors not supplied")
    train_docs, test_docs = load_corpus(Path(data) / "train"), load_corpus(Path(data) / "test")
    config = TrainingConfig(epochs=int(os.environ.get("TOCEXTRACT_EPOCHS", "20")),
                            deterministic=False, cache_dir=str(Path(data) / ".cache"),
                            model=ModelConfig(vision_backbone=backbone))
    result = train(config, train_docs)
    corpus = evaluate(result.model, test_docs).corpus()
    ok = (abs(corpus["teds"] - REFERENCE_TEDS) <= REFERENCE_BAND
          and abs(corpus["pair_f1"] - REFERENCE_F1) <= REFERENCE_BAND)
    check(8, "full-scale HierDoc check", ok,
          f"TEDS {corpus['teds']:.4f} (target {REFERENCE_TEDS} +- {REFERENCE_BAND}), "
          f"F1 {corpus['pair_f1']:.4f} (target {REFERENCE_F1} +- {REFERENCE_BAND})")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
