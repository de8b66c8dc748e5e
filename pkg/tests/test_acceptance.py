"""Release gate: one test per go/no-go property of the whole system.

Each test here is a self-contained criterion with its own tolerance and
runtime budget; `pytest -v` prints exactly one pass/fail line per
criterion. Unit-level detail lives in the per-module test files — this
suite only holds the system to its headline guarantees.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from mdprobe.annotate import (
    DEFAULT_GAP_PENALTY,
    StepKind,
    align_sequences,
    alignment_score,
    phone_similarity,
)
from mdprobe.cli import main
from mdprobe.downstream import AdamW, TrainConfig, md_loss, pr_loss
from mdprobe.featureio import combine_layers, combine_layers_backward
from mdprobe.metrics import (
    ScoredItem,
    ScoredSet,
    act_cost,
    cost,
    evaluate,
    min_cost,
    one_minus_auc,
)
from mdprobe.phoneset import load_default_inventory
from mdprobe.protocol import (
    ProtocolConfig,
    load_corpus,
    run_md_experiment,
    run_pr_experiment,
)
from mdprobe.synth import (
    SynthSpec,
    bayes_cost,
    enumerate_alignment_scores,
    gen_corpus,
    oracle_alignment_score,
    oracle_gradient,
    oracle_min_cost,
    oracle_one_minus_auc,
    relative_error,
)

from conftest import random_scores

INV = load_default_inventory()
PHONES_12 = ("AA", "AE", "IY", "UW", "EH", "K", "S", "T", "M", "N", "R", "L")


def _corpus_spec(seed, n_speakers, signal="target-dim"):
    # 6-sigma construction: class means at +-1.5, per-frame noise 1.0,
    # 4-frame spans -> instance-mean sigma 0.5, so the means sit 6 sigma apart
    return SynthSpec(
        phones=PHONES_12, n_speakers=n_speakers, utts_per_speaker=10,
        phones_per_utt=10, frames_per_phone=4, dim=48, n_layers=2,
        error_rate=0.35, separation=1.5, noise=1.0, silence_frames=1,
        signal=signal, seed=seed,
    )


def test_criterion_1_metric_oracle_equivalence(rng):
    """one_minus_auc vs O(n^2) pairwise counting; min_cost vs exhaustive
    sweep — 200 random score sets, n <= 500, ties injected, < 10 s."""
    t0 = time.monotonic()
    for i in range(200):
        pos, neg = random_scores(rng, int(rng.integers(1, 501)),
                                 int(rng.integers(1, 501)), ties=True)
        got = one_minus_auc(pos, neg)
        want = oracle_one_minus_auc(pos, neg)
        assert abs(got - want) < 1e-12, f"set {i}: auc {got} vs {want}"
        got_cost, got_thr = min_cost(pos, neg)
        want_cost, _ = oracle_min_cost(pos, neg)
        assert got_cost == want_cost, f"set {i}: cost {got_cost} vs {want_cost}"
        # and the reported threshold really attains that cost
        fnr = float((pos < got_thr).mean())
        fpr = float((neg >= got_thr).mean())
        assert fpr + 2.0 * fnr == got_cost, f"set {i}: threshold is off"
    assert time.monotonic() - t0 < 10.0


def test_criterion_2_cost_rule_anchors(rng):
    """cost(1,0)=1, cost(0,1)=2; per evaluated phone min <= act <= 2 and
    min <= 1."""
    assert cost(1.0, 0.0) == 1.0  # accept-everything system
    assert cost(0.0, 1.0) == 2.0  # reject-everything system
    for _ in range(50):
        pos, neg = random_scores(rng, int(rng.integers(1, 200)),
                                 int(rng.integers(1, 200)), ties=True)
        mc, _ = min_cost(pos, neg)
        assert mc <= 1.0 + 1e-12
        thr = float(rng.standard_normal())
        ac = act_cost(pos, neg, thr)
        assert mc <= ac + 1e-12 <= 2.0 + 1e-12


def test_criterion_3_gradient_checks(rng):
    """pr_loss / md_loss / combine_layers gradients vs central finite
    differences: rel. err < 1e-4, 100 random configurations, < 30 s."""
    t0 = time.monotonic()
    for i in range(40):
        T, n = int(rng.integers(1, 7)), int(rng.integers(2, 9))
        logits = rng.standard_normal((T, n))
        ordinals = rng.integers(0, n, T)
        w = rng.random(T)
        w /= w.sum()
        _, grad = pr_loss(logits, ordinals, w)
        fd = oracle_gradient(lambda z: pr_loss(z, ordinals, w)[0], logits.copy())
        assert relative_error(grad, fd) < 1e-4, f"pr config {i}"
    for i in range(40):
        T, n = int(rng.integers(1, 7)), int(rng.integers(2, 9))
        logits = rng.standard_normal((T, n))
        ordinals = rng.integers(0, n, T)
        labels = rng.integers(0, 2, T).astype(np.int8)
        _, grad = md_loss(logits, ordinals, labels)
        fd = oracle_gradient(lambda z: md_loss(z, ordinals, labels)[0],
                             logits.copy())
        assert relative_error(grad, fd) < 1e-4, f"md config {i}"
    for i in range(20):
        L, T, d = int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(1, 6))
        feats = rng.standard_normal((L, T, d))
        logits = rng.standard_normal(L)
        gout = rng.standard_normal((T, d))
        grad = combine_layers_backward(feats, logits, gout)
        fd = oracle_gradient(
            lambda z: float((combine_layers(feats, z) * gout).sum()),
            logits.copy())
        assert relative_error(grad, fd) < 1e-4, f"combine config {i}"
    assert time.monotonic() - t0 < 30.0


def test_criterion_4_optimizer_anchor():
    """First AdamW step on the scalar example within 1e-8 of the
    hand-derived -0.1; a zero-grad, zero-decay step changes nothing."""
    opt = AdamW(lr=0.1, weight_decay=0.0)
    p = {"x": np.array([0.0])}
    opt.step(p, {"x": np.array([1.0])})
    # m_hat = v_hat = 1 after bias correction, so the step is -lr/(1+eps)
    assert abs(p["x"][0] - (-0.1)) < 1e-8

    opt = AdamW(lr=0.7, weight_decay=0.0)
    p = {"x": np.array([3.0, -2.0])}
    opt.step(p, {"x": np.zeros(2)})
    assert (p["x"] == np.array([3.0, -2.0])).all()


def test_criterion_5_end_to_end_synthetic_md(tmp_path):
    """30-speaker 6-sigma corpus: pooled CV 1-AUC < 0.02 and test macro
    ActCost within +-0.05 of the closed-form Bayes cost, in < 2 min."""
    t0 = time.monotonic()
    dev_paths = gen_corpus(_corpus_spec(101, 30), tmp_path / "dev", INV,
                           name="dev")
    test_paths = gen_corpus(_corpus_spec(202, 20), tmp_path / "test", INV,
                            name="test")
    dev = load_corpus(dev_paths.manifest, None, INV)
    test = load_corpus(test_paths.manifest, None, INV)
    cfg = TrainConfig(task="md", lr=0.05, epochs=6, batch_size=8, seed=7)
    proto = ProtocolConfig(folds=6, min_class_count=50, bootstrap=0, seed=0)
    result = run_md_experiment(dev, test, cfg, proto, INV)

    pos, neg = result.dev_scores.class_scores()
    pooled_auc = one_minus_auc(pos, neg)
    assert pooled_auc < 0.02, f"pooled CV 1-AUC {pooled_auc:.4f}"

    ideal = bayes_cost(1.5, 1.0, n_frames=4)
    macro_act = result.report.macro_act_cost
    assert macro_act is not None
    assert abs(macro_act - ideal) < 0.05, (
        f"macro act {macro_act:.4f} vs bayes {ideal:.4f}")
    assert result.report.n_included_phones >= 10
    assert time.monotonic() - t0 < 120.0


def test_criterion_6_md_beats_pr_on_shared_signal(tmp_path):
    """Corpus where the correctness signal lives in a dimension that is
    exactly zero in native speech: recognition training provably cannot
    reach it, so the detection route must win with non-overlapping
    speaker-bootstrap 95% CIs (B=1000), in < 5 min."""
    t0 = time.monotonic()
    corp = {}
    for name, seed, n_spk, native in (("ntrain", 301, 20, True),
                                      ("ndev", 302, 6, True),
                                      ("dev", 303, 30, False),
                                      ("test", 304, 20, False)):
        paths = gen_corpus(_corpus_spec(seed, n_spk, signal="shared-dim"),
                           tmp_path / name, INV, native=native, name=name)
        corp[name] = load_corpus(paths.manifest, None, INV)

    proto = ProtocolConfig(folds=6, min_class_count=50, bootstrap=1000, seed=0)
    md = run_md_experiment(
        corp["dev"], corp["test"],
        TrainConfig(task="md", lr=0.05, epochs=6, batch_size=8, seed=7),
        proto, INV)
    pr = run_pr_experiment(
        corp["ntrain"], corp["ndev"], corp["dev"], corp["test"],
        TrainConfig(task="pr", lr=0.05, epochs=6, batch_size=8, seed=7),
        proto, INV)

    md_act = md.report.macro_act_cost
    pr_act = pr.report.macro_act_cost
    assert md_act is not None and pr_act is not None
    assert md_act < pr_act, f"md {md_act:.4f} vs pr {pr_act:.4f}"
    md_ci = md.report.bootstrap["act_cost"]
    pr_ci = pr.report.bootstrap["act_cost"]
    assert md_ci.high < pr_ci.low, (
        f"CIs overlap: md [{md_ci.low:.4f}, {md_ci.high:.4f}] vs "
        f"pr [{pr_ci.low:.4f}, {pr_ci.high:.4f}]")
    assert time.monotonic() - t0 < 300.0


def test_criterion_7_alignment_suite(rng):
    """Identity/substitution/deletion/addition unit cases, then 1000
    random pairs (lengths <= 12) against an independent optimal-score
    oracle, itself cross-checked against literal path enumeration on
    short inputs. < 30 s."""
    t0 = time.monotonic()
    P = INV.phone
    sym_sim = lambda a, b: phone_similarity(P(a), P(b))

    # identity
    seq = [P(s) for s in ("K", "AE", "T")]
    assert [s.kind for s in align_sequences(seq, seq)] == [StepKind.MATCH] * 3
    # substitution
    steps = align_sequences(seq, [P(s) for s in ("K", "EH", "T")])
    assert [s.kind for s in steps] == [
        StepKind.MATCH, StepKind.SUBSTITUTION, StepKind.MATCH]
    # deletion (annotation shorter)
    steps = align_sequences(seq, [P(s) for s in ("K", "T")])
    assert StepKind.DELETION in [s.kind for s in steps]
    # addition (annotation longer)
    steps = align_sequences(seq, [P(s) for s in ("K", "AH", "AE", "T")])
    assert [s.kind for s in steps] == [
        StepKind.MATCH, StepKind.ADDITION, StepKind.MATCH, StepKind.MATCH]

    # the independent oracle agrees with literal enumeration where the
    # full alignment space is small enough to walk
    scorable = [p.symbol for p in INV.scorable()]
    for _ in range(25):
        t = tuple(scorable[i] for i in rng.integers(0, 39, rng.integers(1, 5)))
        a = tuple(scorable[i] for i in rng.integers(0, 39, rng.integers(1, 5)))
        assert oracle_alignment_score(t, a, sym_sim) == pytest.approx(
            max(enumerate_alignment_scores(t, a, sym_sim)), abs=1e-9)

    # production DP vs oracle, 1000 random pairs up to length 12
    for i in range(1000):
        t = [P(scorable[j]) for j in rng.integers(0, 39, rng.integers(1, 13))]
        a = [P(scorable[j]) for j in rng.integers(0, 39, rng.integers(1, 13))]
        steps = align_sequences(t, a)
        got = alignment_score(steps, t, a)
        want = oracle_alignment_score(
            tuple(p.symbol for p in t), tuple(p.symbol for p in a),
            sym_sim, DEFAULT_GAP_PENALTY)
        assert got == pytest.approx(want, abs=1e-9), f"pair {i}"
    assert time.monotonic() - t0 < 30.0


def test_criterion_8_determinism(tmp_path):
    """crossval + eval twice with one seed and jobs=1: byte-identical
    artifacts, including the reports."""
    config = {
        "synth": {
            "phones": list(PHONES_12[:8]), "n_speakers": 6,
            "utts_per_speaker": 3, "phones_per_utt": 6,
            "frames_per_phone": 3, "dim": 44, "n_layers": 2,
            "error_rate": 0.35, "separation": 2.5, "silence_frames": 1,
            "seed": 11,
        },
        "train": {"lr": 0.05, "epochs": 2, "batch_size": 4, "seed": 1},
        "protocol": {"folds": 3, "min_class_count": 2, "bootstrap": 20,
                     "seed": 0, "jobs": 1},
    }
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps(config))
    assert main(["synth", "--out", str(tmp_path / "dev"), "--config", str(cfg),
                 "--name", "dev"]) == 0
    assert main(["synth", "--out", str(tmp_path / "test"), "--config",
                 str(cfg), "--name", "test", "synth.seed=12"]) == 0

    def run(tag: str) -> Path:
        out = tmp_path / tag
        assert main(["crossval",
                     "--manifest", str(tmp_path / "dev" / "manifest.json"),
                     "--test-manifest", str(tmp_path / "test" / "manifest.json"),
                     "--config", str(cfg), "--out", str(out)]) == 0
        assert main(["eval",
                     "--scores", str(out / "test_scores.tsv"),
                     "--thresholds", str(out / "thresholds.json"),
                     "--threshold-source", "pooled-cv",
                     "--checkpoint", "model.ckpt",
                     "--min-class-count", "2", "--bootstrap", "20",
                     "--out", str(out / "eval_report.json")]) == 0
        return out

    a, b = run("a"), run("b")
    for name in ("crossval.json", "thresholds.json", "folds.tsv",
                 "dev_scores.tsv", "test_scores.tsv", "report.json",
                 "eval_report.json", "model.ckpt"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_criterion_9_minority_count_filter():
    """A phone with a minority class below 50 never touches the macro."""
    items = []
    # phone A: 60/60, perfectly separated -> every macro metric 0
    for i in range(60):
        items.append(ScoredItem("u", "A", 0, 1, 1.0 + i, 1, f"s{i % 4}"))
        items.append(ScoredItem("u", "A", 0, 1, -1.0 - i, 0, f"s{i % 4}"))
    # phone B: minority class 49, perfectly anti-separated -> would drag
    # every macro to its ceiling if it ever leaked in
    for i in range(49):
        items.append(ScoredItem("u", "B", 0, 1, -5.0 - i, 1, f"s{i % 4}"))
    for i in range(300):
        items.append(ScoredItem("u", "B", 0, 1, 5.0 + i, 0, f"s{i % 4}"))
    report = evaluate(ScoredSet(items), thresholds={"A": 0.0, "B": 0.0},
                      min_count=50)
    by_phone = {pm.phone: pm for pm in report.phones}
    assert by_phone["A"].included
    assert not by_phone["B"].included
    assert by_phone["B"].one_minus_auc is None
    assert report.n_included_phones == 1
    assert report.macro_one_minus_auc == 0.0
    assert report.macro_min_cost == 0.0
    assert report.macro_act_cost == 0.0
