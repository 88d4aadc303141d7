"""Acceptance battery: ten go/no-go checks at pinned tolerances.

Heavy state is module-scoped and shared. Three seeded full pipelines on
the default corpus back the gate-floor, routing-shift, and robustness
checks; the stage and modality harnesses back the directional
comparisons; one CLI run backs the timing and determinism checks. Each
criterion contributes a single PASS/FAIL line to the terminal summary.
"""

import time

import numpy as np
import pytest

import mmbert.autograd as ag
from mmbert.ablation import ablate_modalities, ablate_stages
from mmbert.checkpoint import load_checkpoint, restore_into, save_checkpoint
from mmbert.cli import main
from mmbert.corpus import (
    CorpusConfig,
    SplitSpec,
    build_corpus,
    build_vocab,
    split,
)
from mmbert.evaluation import evaluate, metrics_from_confusion, ConfusionMatrix
from mmbert.gradcheck import stage3_loss_gradcheck
from mmbert.model import Capture, MMBertModel, ModelConfig
from mmbert.moe import Expert, Router, aux_loss, moe_forward, route
from mmbert.training import (
    TrainConfig,
    TrainLog,
    aligner_val_mse,
    bucket_batches,
    train_all,
)

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
ROUTING_MARGIN = 0.03
ROBUSTNESS_MARGIN = 0.05
STAGE_GAP = 0.03


def verdict(report, n, label, ok, detail):
    line = f"criterion {n:2d} {label}: {'PASS' if ok else 'FAIL'} ({detail})"
    report.append(line)
    return line


@pytest.fixture(scope="module")
def data():
    ccfg = CorpusConfig()
    vocab = build_vocab(ccfg, 0)
    corpus = build_corpus(ccfg, 0, vocab)
    train, val, test = split(corpus, SplitSpec(seed=0))
    return ccfg, vocab, corpus, train, val, test


@pytest.fixture(scope="module")
def trimodal_runs(data):
    _, vocab, _, train, val, _ = data
    models = {}
    for seed in SEEDS:
        model = MMBertModel(ModelConfig(), vocab, seed=seed)
        train_all(model, train, val, TrainConfig(seed=seed))
        models[seed] = model
    return models


@pytest.fixture(scope="module")
def textonly_runs(data):
    _, vocab, _, train, val, _ = data
    models = {}
    for seed in SEEDS:
        model = MMBertModel(ModelConfig(modalities=("text",), n_experts=0),
                            vocab, seed=seed)
        train_all(model, train, val, TrainConfig(seed=seed))
        models[seed] = model
    return models


@pytest.fixture(scope="module")
def bimodal_runs(data):
    _, vocab, _, train, val, _ = data
    variants = (("text+speech", ("text", "speech")),
                ("text+vision", ("text", "vision")))
    _, models = ablate_modalities(train, val, ModelConfig(), TrainConfig(),
                                  vocab, seeds=SEEDS, variants=variants)
    return models


@pytest.fixture(scope="module")
def stage_harness(data):
    _, vocab, _, train, val, _ = data
    t0 = time.time()
    rows, _ = ablate_stages(train, val, ModelConfig(), TrainConfig(),
                            vocab, seeds=SEEDS)
    return rows, time.time() - t0


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept_cli")
    corpus_path = root / "corpus.tsv"
    assert main(["gen-data", "--out", str(corpus_path)]) == 0
    out_dir = root / "run"
    t0 = time.time()
    assert main(["train", "--stage", "all", "--data", str(corpus_path),
                 "--out", str(out_dir)]) == 0
    wall = time.time() - t0
    return root, corpus_path, out_dir, wall


def mean_gates(model, samples):
    """Token-weighted mean gate per layer and expert over a sample set."""
    n_layers, n_experts = model.cfg.n_layers, model.cfg.n_experts
    sums = np.zeros((n_layers, n_experts))
    count = 0
    with ag.no_grad():
        for batch in bucket_batches(samples, 32):
            cap = Capture()
            model.forward_batch(batch, active=model.cfg.modalities,
                                ffn_mode="moe", capture=cap)
            for rec in cap.gates:
                flat = rec.gates.reshape(-1, n_experts)
                sums[rec.layer] += flat.sum(axis=0)
                if rec.layer == 0:
                    count += flat.shape[0]
    return sums / count


def test_criterion_01_gradient_correctness(acceptance_report):
    t0 = time.time()
    err = stage3_loss_gradcheck(seed=0)
    wall = time.time() - t0
    ok = err < 1e-3 and wall < 60.0
    line = verdict(acceptance_report, 1, "gradient correctness", ok,
                   f"max rel err {err:.3e} < 1e-3, {wall:.1f}s < 60s")
    assert ok, line


def test_criterion_02_moe_algebra(acceptance_report):
    rng = np.random.default_rng(0)
    experts = [Expert(8, 16, tag, rng) for tag in ("text", "speech", "vision")]
    x = ag.Tensor(rng.standard_normal((9, 8)).astype(np.float32))

    one_hot_exact = True
    for i, e in enumerate(experts):
        g = np.zeros((9, 3), dtype=np.float32)
        g[:, i] = 1.0
        mixed = moe_forward(experts, x, ag.Tensor(g))
        one_hot_exact &= np.array_equal(mixed.data, e(x).data)

    uniform = ag.Tensor(np.full((9, 3), 1.0 / 3.0, dtype=np.float32))
    mean = sum(e(x).data.astype(np.float64) for e in experts) / 3.0
    uniform_err = float(np.abs(moe_forward(experts, x, uniform).data - mean).max())

    router = Router(8, 3, rng, init="normal")
    gates, _ = route(x, router)
    row_err = float(np.abs(gates.data.sum(axis=-1) - 1.0).max())

    ok = one_hot_exact and uniform_err <= 1e-6 and row_err <= 1e-6
    line = verdict(acceptance_report, 2, "MoE algebra", ok,
                   f"one-hot exact {one_hot_exact}, uniform err {uniform_err:.1e}"
                   f" <= 1e-6, row-sum err {row_err:.1e} <= 1e-6")
    assert ok, line


def test_criterion_03_aux_loss_anchors(acceptance_report, data, trimodal_runs):
    _, _, _, _, val, _ = data
    uniform = ag.Tensor(np.full((12, 3), 1.0 / 3.0, dtype=np.float32))
    u = aux_loss([uniform]).item()
    collapse_g = np.zeros((12, 3), dtype=np.float32)
    collapse_g[:, 1] = 1.0
    c = aux_loss([ag.Tensor(collapse_g)]).item()

    floors = {}
    for seed, model in trimodal_runs.items():
        floors[seed] = float(mean_gates(model, val).min())
    ok = (abs(u - 1.0) <= 1e-6 and abs(c - 3.0) <= 1e-6
          and all(f >= 0.05 for f in floors.values()))
    line = verdict(acceptance_report, 3, "aux-loss anchors", ok,
                   f"uniform {u:.6f}, collapse {c:.6f}, min trained gate "
                   + ", ".join(f"s{s}={f:.3f}" for s, f in floors.items())
                   + " >= 0.05")
    assert ok, line


def test_criterion_04_three_stage_superiority(acceptance_report, stage_harness):
    rows, wall = stage_harness
    acc = {}
    for row in rows:
        acc.setdefault(row.variant, []).append(row.val_acc)
    mean = {v: float(np.mean(a)) for v, a in acc.items()}
    gap = mean["full"] - mean["no-stage-1-and-2"]
    ok = (mean["full"] >= mean["no-stage-1"]
          and mean["full"] >= mean["no-stage-2"]
          and gap >= STAGE_GAP and wall < 2400.0)
    line = verdict(acceptance_report, 4, "three-stage superiority", ok,
                   f"full {mean['full']:.3f} vs no-s1 {mean['no-stage-1']:.3f}, "
                   f"no-s2 {mean['no-stage-2']:.3f}, no-both "
                   f"{mean['no-stage-1-and-2']:.3f}; gap {gap:+.3f} >= "
                   f"{STAGE_GAP}; {wall/60:.1f} min < 40")
    assert ok, line


def test_criterion_05_routing_shift(acceptance_report, data, trimodal_runs):
    _, _, _, _, _, test = data
    slices = {tag: [s for s in test if s.tag == tag]
              for tag in ("none", "homophone", "codemix")}
    per_seed = {}
    for seed, model in trimodal_runs.items():
        base = mean_gates(model, slices["none"]).mean(axis=0)
        hom = mean_gates(model, slices["homophone"]).mean(axis=0)
        cod = mean_gates(model, slices["codemix"]).mean(axis=0)
        sp = model.cfg.modalities.index("speech")
        vi = model.cfg.modalities.index("vision")
        per_seed[seed] = (hom[sp] - base[sp], cod[vi] - base[vi])
    hits = sum(1 for d_sp, d_vi in per_seed.values()
               if d_sp >= ROUTING_MARGIN and d_vi >= ROUTING_MARGIN)
    ok = hits > len(per_seed) / 2
    detail = ", ".join(f"s{s}: dSp {d[0]:+.4f}, dVi {d[1]:+.4f}"
                       for s, d in per_seed.items())
    line = verdict(acceptance_report, 5, "routing shift", ok,
                   f"{detail}; need >= +{ROUTING_MARGIN} on both, "
                   f"majority of seeds ({hits}/{len(per_seed)} satisfy)")
    assert ok, line


def test_criterion_06_multimodal_robustness(acceptance_report, data,
                                            trimodal_runs, textonly_runs):
    _, _, _, _, _, test = data
    perturbed = [s for s in test if s.tag != "none"]
    margins = []
    for seed in SEEDS:
        tri = evaluate(trimodal_runs[seed], perturbed).macro_f1
        txt = evaluate(textonly_runs[seed], perturbed).macro_f1
        margins.append(tri - txt)
    mean_margin = float(np.mean(margins))
    ok = mean_margin >= ROBUSTNESS_MARGIN
    line = verdict(acceptance_report, 6, "multimodal robustness", ok,
                   "perturbed-slice macro-F1 margin "
                   + ", ".join(f"s{s}={m:+.4f}" for s, m in zip(SEEDS, margins))
                   + f"; mean {mean_margin:+.4f} >= {ROBUSTNESS_MARGIN}")
    assert ok, line


def test_criterion_07_modality_ablation(acceptance_report, data, bimodal_runs):
    _, _, _, _, _, test = data
    homcod = [s for s in test if s.tag in ("homophone", "codemix")]
    ts = [evaluate(bimodal_runs[("text+speech", s)], homcod).macro_f1
          for s in SEEDS]
    tv = [evaluate(bimodal_runs[("text+vision", s)], homcod).macro_f1
          for s in SEEDS]
    ok = float(np.mean(ts)) >= float(np.mean(tv))
    line = verdict(acceptance_report, 7, "modality ablation", ok,
                   f"text+speech {np.mean(ts):.4f} >= text+vision "
                   f"{np.mean(tv):.4f} on homophone+codemix")
    assert ok, line


def brute_force(labels, preds):
    tp = int(np.sum((labels == 1) & (preds == 1)))
    fp = int(np.sum((labels == 0) & (preds == 1)))
    fn = int(np.sum((labels == 1) & (preds == 0)))
    tn = int(np.sum((labels == 0) & (preds == 0)))
    return tp, fp, fn, tn


def test_criterion_08_metric_oracle(acceptance_report):
    rng = np.random.default_rng(8)
    exact = True
    for _ in range(100):
        n = int(rng.integers(1, 200))
        labels = rng.integers(0, 2, size=n)
        preds = rng.integers(0, 2, size=n)
        cm = ConfusionMatrix()
        for y, p in zip(labels, preds):
            cm.add(int(y), int(p))
        exact &= (cm.tp, cm.fp, cm.fn, cm.tn) == brute_force(labels, preds)
        got = metrics_from_confusion(cm)
        hand = _hand_metrics(*brute_force(labels, preds))
        exact &= abs(got.macro_f1 - hand) < 1e-12
    worked = metrics_from_confusion(ConfusionMatrix(tp=40, fp=10, fn=20, tn=30))
    delta = abs(worked.macro_f1 - 0.6970)
    ok = exact and delta <= 1e-4
    line = verdict(acceptance_report, 8, "metric oracle", ok,
                   f"100 randomized sets exact {exact}, worked macro-F1 "
                   f"{worked.macro_f1:.4f} within 1e-4 of 0.6970")
    assert ok, line


def _hand_metrics(tp, fp, fn, tn):
    def f1(tp_, fp_, fn_):
        prec = tp_ / (tp_ + fp_) if tp_ + fp_ else 0.0
        rec = tp_ / (tp_ + fn_) if tp_ + fn_ else 0.0
        return 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return (f1(tp, fp, fn) + f1(tn, fn, fp)) / 2.0


def test_criterion_09_stage1_alignment(acceptance_report, data):
    _, vocab, corpus, train, val, _ = data
    index = {s.sample_id: s for s in corpus}
    cfg = TrainConfig(stage1_epochs=20)
    model = MMBertModel(ModelConfig(), vocab, seed=0)
    train_all(model, train, val, cfg, stages=("0",))
    init_mse = aligner_val_mse(model, val, cfg, index)
    log = TrainLog()
    train_all(model, train, val, cfg, stages=("1",), corpus_index=index, log=log)
    final_mse = aligner_val_mse(model, val, cfg, index)
    drop = 1.0 - final_mse / init_mse
    ok = drop >= 0.5
    line = verdict(acceptance_report, 9, "stage-1 alignment", ok,
                   f"held-out MSE {init_mse:.4f} -> {final_mse:.4f} "
                   f"({drop:.1%} drop >= 50% within 20 epochs)")
    assert ok, line


def test_criterion_10_engineering_determinism(acceptance_report, data,
                                              trimodal_runs, cli_run,
                                              tmp_path):
    _, vocab, _, _, _, test = data
    root, corpus_path, out_dir, wall = cli_run

    # (a) checkpoint round trip reproduces forward outputs bitwise
    model = trimodal_runs[0]
    ck = tmp_path / "rt.ckpt"
    save_checkpoint(ck, model.params())
    clone = MMBertModel(ModelConfig(), vocab, seed=0)
    restore_into(clone, load_checkpoint(ck))
    batch = bucket_batches(test, 16)[0]
    with ag.no_grad():
        a = model.forward_batch(batch, active=model.cfg.modalities,
                                ffn_mode="moe")
        b = clone.forward_batch(batch, active=clone.cfg.modalities,
                                ffn_mode="moe")
    round_trip = np.array_equal(a.data, b.data)

    # (b) identical config and seed give identical metrics CSVs
    csv_a, csv_b = tmp_path / "m1.csv", tmp_path / "m2.csv"
    for out in (csv_a, csv_b):
        assert main(["eval", "--ckpt", str(out_dir / "stage3.ckpt"),
                     "--data", str(corpus_path), "--out", str(out)]) == 0
    same_csv = csv_a.read_bytes() == csv_b.read_bytes()

    # (c) full default train fits the wall-clock budget
    in_budget = wall < 600.0

    ok = round_trip and same_csv and in_budget
    line = verdict(acceptance_report, 10, "engineering determinism", ok,
                   f"round-trip bitwise {round_trip}, metrics CSVs identical "
                   f"{same_csv}, train --stage all {wall/60:.1f} min < 10")
    assert ok, line


def test_trained_model_sanity(data, cli_run, capsys):
    """A trained default model nearly memorizes its training split."""
    root, corpus_path, out_dir, _ = cli_run
    assert main(["eval", "--ckpt", str(out_dir / "stage3.ckpt"),
                 "--data", str(corpus_path), "--split", "train"]) == 0
    out = capsys.readouterr().out
    overall = out.strip().split("\n")[1].split(",")
    assert float(overall[3]) > 0.95
