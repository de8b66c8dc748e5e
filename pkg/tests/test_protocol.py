import json

import numpy as np
import pytest

from mdprobe.annotate import TargetPhoneInstance
from mdprobe.downstream import TrainConfig
from mdprobe.errors import ConfigError, DataError, TooManyFolds
from mdprobe.featureio import write_features
from mdprobe.metrics import ScoredItem, ScoredSet
from mdprobe.protocol import (
    FoldPlan,
    ProtocolConfig,
    attach_labels,
    crossval_epoch_scores,
    load_corpus,
    load_folds,
    make_folds,
    md_training_data,
    pr_training_data,
    run_md_experiment,
    run_md_selection,
    run_pr_experiment,
    save_folds,
    score_instances,
    score_utterances,
    select_epoch,
    select_thresholds,
)
from mdprobe.synth import SynthSpec, gen_corpus

PHONES = ("AA", "AE", "IY", "K", "S", "T", "M", "R")


def small_spec(**over):
    base = dict(phones=PHONES, n_speakers=6, utts_per_speaker=3,
                phones_per_utt=6, frames_per_phone=3, dim=44, n_layers=2,
                error_rate=0.35, separation=2.5, silence_frames=1, seed=11)
    base.update(over)
    return SynthSpec(**base)


@pytest.fixture()
def dev_corpus(tmp_path, inventory):
    paths = gen_corpus(small_spec(), tmp_path / "dev", inventory, name="dev")
    return load_corpus(paths.manifest, None, inventory)


# --- folds ---


def test_make_folds_round_robin():
    speakers = [f"spk{i:02d}" for i in range(30)]
    plan = make_folds(speakers, k=6, seed=0)
    assert len(plan) == 6
    assert all(len(f) == 5 for f in plan.folds)
    flat = [s for f in plan.folds for s in f]
    assert sorted(flat) == speakers  # a partition: disjoint and complete


def test_make_folds_deterministic():
    speakers = [f"s{i}" for i in range(12)]
    assert make_folds(speakers, k=4, seed=3) == make_folds(speakers, k=4, seed=3)
    assert make_folds(speakers, k=4, seed=3) != make_folds(speakers, k=4, seed=4)
    # input order is irrelevant: the speaker list is sorted first
    assert make_folds(list(reversed(speakers)), k=4, seed=3) == make_folds(
        speakers, k=4, seed=3)


def test_make_folds_by_l1():
    speakers = [f"s{i}" for i in range(20)]
    l1s = ["arabic", "mandarin", "spanish", "korean", "french"]
    l1_of = {s: l1s[i % 5] for i, s in enumerate(speakers)}
    plan = make_folds(speakers, by="l1", l1_of=l1_of)
    assert len(plan) == 5
    assert plan.by == "l1"
    # folds come out in sorted L1 order, never splitting an L1 group
    for fold, l1 in zip(plan.folds, sorted(l1s)):
        assert {l1_of[s] for s in fold} == {l1}


def test_make_folds_errors():
    with pytest.raises(TooManyFolds):
        make_folds(["a", "b", "c"], k=5)
    with pytest.raises(ConfigError):
        make_folds(["a", "b", "c"], k=1)
    with pytest.raises(ConfigError):
        make_folds(["a", "b", "c"])  # k is required for by="speaker"
    with pytest.raises(DataError):
        make_folds([], k=2)
    with pytest.raises(ConfigError):
        make_folds(["a", "b"], by="l1")  # no l1_of given
    with pytest.raises(DataError):
        make_folds(["a", "b"], by="l1", l1_of={"a": "x", "b": ""})
    with pytest.raises(TooManyFolds):
        make_folds(["a", "b"], by="l1", l1_of={"a": "x", "b": "x"})
    with pytest.raises(ConfigError):
        make_folds(["a", "b"], k=3, by="l1", l1_of={"a": "x", "b": "y"})


def test_folds_file_round_trip(tmp_path):
    plan = make_folds([f"s{i}" for i in range(10)], k=3, seed=2)
    save_folds(plan, tmp_path / "folds.tsv")
    assert load_folds(tmp_path / "folds.tsv") == plan
    text = (tmp_path / "folds.tsv").read_text()
    assert text.startswith("# by=speaker\n")
    assert "\t" in text.splitlines()[1]


def test_load_folds_rejects_duplicates(tmp_path):
    (tmp_path / "f.tsv").write_text("a\t0\na\t1\n")
    with pytest.raises(DataError):
        load_folds(tmp_path / "f.tsv")


def test_load_folds_rejects_gap(tmp_path):
    (tmp_path / "f.tsv").write_text("a\t0\nb\t2\n")
    with pytest.raises(DataError):
        load_folds(tmp_path / "f.tsv")


# --- corpus loading ---


def test_load_corpus_uses_manifest_files(tmp_path, inventory):
    paths = gen_corpus(small_spec(), tmp_path / "c", inventory, name="c")
    # no explicit span/annotation paths: the manifest names them
    corpus = load_corpus(paths.manifest, None, inventory)
    assert corpus.name == "c"
    assert len(corpus.speakers) == 6
    assert all(u.labeled is not None for u in corpus.utterances)
    # silence spans are present but end up Ignored
    sil = [i for u in corpus.utterances for i in u.instances
           if i.phone.is_silence]
    assert sil


def test_load_corpus_requires_spans_somewhere(tmp_path, inventory):
    write_features(tmp_path / "u0.mpkf", np.zeros((1, 4, 3), dtype=np.float32))
    (tmp_path / "manifest.json").write_text(json.dumps({
        "name": "bare", "frame_rate": 50.0, "n_layers": 1, "dim": 3,
        "utterances": [
            {"utt_id": "u0", "speaker": "s0", "features": "u0.mpkf"}],
    }))
    with pytest.raises(DataError, match="span"):
        load_corpus(tmp_path / "manifest.json", None, inventory)


def test_load_corpus_span_past_features(tmp_path, inventory):
    write_features(tmp_path / "u0.mpkf", np.zeros((1, 4, 3), dtype=np.float32))
    (tmp_path / "spans.txt").write_text("u0 K 0 9\n")
    (tmp_path / "manifest.json").write_text(json.dumps({
        "name": "bare", "frame_rate": 50.0, "n_layers": 1, "dim": 3,
        "utterances": [
            {"utt_id": "u0", "speaker": "s0", "features": "u0.mpkf"}],
    }))
    with pytest.raises(DataError, match="frame"):
        load_corpus(tmp_path / "manifest.json", tmp_path / "spans.txt", inventory)


def test_corpus_subset_excluding(dev_corpus):
    spk = dev_corpus.speakers[0]
    inside = dev_corpus.subset([spk])
    outside = dev_corpus.excluding([spk])
    assert {u.speaker for u in inside} == {spk}
    assert spk not in {u.speaker for u in outside}
    assert len(inside) + len(outside) == len(dev_corpus.utterances)


def test_md_training_data_needs_labels(tmp_path, inventory):
    write_features(tmp_path / "u0.mpkf", np.zeros((1, 4, 3), dtype=np.float32))
    (tmp_path / "spans.txt").write_text("u0 K 0 4\n")
    (tmp_path / "manifest.json").write_text(json.dumps({
        "name": "bare", "frame_rate": 50.0, "n_layers": 1, "dim": 3,
        "utterances": [
            {"utt_id": "u0", "speaker": "s0", "features": "u0.mpkf"}],
    }))
    corpus = load_corpus(tmp_path / "manifest.json", tmp_path / "spans.txt",
                         inventory)
    with pytest.raises(DataError, match="label"):
        md_training_data(corpus.utterances, inventory, "raw")
    # recognition training needs no labels at all
    data = pr_training_data(corpus.utterances, inventory, "raw")
    assert len(data) == 1


# --- two-phase scoring ---


def test_score_instances_is_label_blind(dev_corpus, inventory):
    from mdprobe.downstream import LinearProbe

    model = LinearProbe.zeros(len(inventory), 44, 2)
    model.weights[:] = np.random.default_rng(0).standard_normal(
        model.weights.shape)
    rows = score_instances(model, dev_corpus.utterances, inventory)
    # every span is scored, including silence
    n_spans = sum(len(u.instances) for u in dev_corpus.utterances)
    assert len(rows) == n_spans

    # wiping the labels cannot change the scores
    stripped = [u for u in dev_corpus.utterances]
    saved = [u.labeled for u in stripped]
    for u in stripped:
        u.labeled = None
    rows2 = score_instances(model, stripped, inventory)
    assert [r[3] for r in rows2] == [r[3] for r in rows]
    # ...but the join now fails loudly
    with pytest.raises(DataError):
        attach_labels(rows2, stripped)
    for u, lab in zip(stripped, saved):
        u.labeled = lab


def test_attach_labels_drops_ignored(dev_corpus, inventory):
    from mdprobe.downstream import LinearProbe

    model = LinearProbe.zeros(len(inventory), 44, 2)
    rows = score_instances(model, dev_corpus.utterances, inventory)
    scored = attach_labels(rows, dev_corpus.utterances)
    assert len(scored) < len(rows)  # silence went in, never comes out
    assert all(it.phone != "SIL" for it in scored)
    # composition equals the convenience wrapper
    direct = score_utterances(model, dev_corpus.utterances, inventory)
    assert [it for it in scored] == [it for it in direct]


def test_attach_labels_missing_span(dev_corpus, inventory):
    u = dev_corpus.utterances[0]
    bogus = [(u.utt_id, u.speaker,
              TargetPhoneInstance(inventory.phone("K"), 997, 999), 0.0)]
    with pytest.raises(DataError, match="no label"):
        attach_labels(bogus, dev_corpus.utterances)


# --- selection primitives ---


def _scored(values):
    """values: (phone, score, label) triples, one synthetic speaker."""
    return ScoredSet(
        ScoredItem("u", p, 0, 1, s, y, "spk") for p, s, y in values
    )


def test_select_epoch_tie_prefers_fewer():
    bad = _scored([("K", 1.0, 1), ("K", 2.0, 0)])    # inverted: cost 1.0
    good = _scored([("K", 2.0, 1), ("K", 1.0, 0)])   # separable: cost 0.0
    best, costs = select_epoch([bad, good, good], min_count=1)
    assert best == 2
    assert costs == pytest.approx([1.0, 0.0, 0.0])


def test_select_thresholds_filters_small_phones():
    items = [("K", float(s), 1) for s in range(60)]
    items += [("K", float(-s), 0) for s in range(60)]
    items += [("T", 1.0, 1), ("T", 0.0, 0)]  # 1 each: below min_count
    thr = select_thresholds(_scored(items), min_count=50)
    assert "K" in thr and "T" not in thr


def test_select_thresholds_single_class_fallbacks():
    # reachable only with the filter disabled
    thr = select_thresholds(_scored([("K", 1.0, 1), ("K", 3.0, 1)]), min_count=0)
    assert thr["K"] == 1.0  # accept-all becomes the lowest observed score
    thr = select_thresholds(_scored([("T", 1.0, 0), ("T", 3.0, 0)]), min_count=0)
    assert thr["T"] == np.nextafter(3.0, np.inf)  # reject-all: just above max


def test_select_thresholds_are_finite():
    items = [("K", float(s), 1) for s in range(60)]
    items += [("K", float(s) + 0.5, 0) for s in range(60)]
    thr = select_thresholds(_scored(items), min_count=50)
    assert np.isfinite(thr["K"])


# --- cross-validation drivers ---


def test_crossval_jobs_do_not_change_scores(dev_corpus, inventory):
    cfg = TrainConfig(task="md", lr=0.05, epochs=2, batch_size=4, seed=1)
    plan = make_folds(dev_corpus.speakers, k=3, seed=0)
    serial = crossval_epoch_scores(dev_corpus, plan, cfg, inventory, jobs=1)
    threaded = crossval_epoch_scores(dev_corpus, plan, cfg, inventory, jobs=3)
    assert len(serial) == len(threaded) == 2
    for a, b in zip(serial, threaded):
        assert a.items == b.items  # same scores in the same (plan) order


def test_crossval_scores_only_heldout_speakers(dev_corpus, inventory):
    cfg = TrainConfig(task="md", lr=0.05, epochs=1, batch_size=4, seed=1)
    plan = make_folds(dev_corpus.speakers, k=3, seed=0)
    pooled = crossval_epoch_scores(dev_corpus, plan, cfg, inventory)
    # every dev speaker appears exactly through its own fold's model
    assert sorted(set(it.speaker for it in pooled[0])) == dev_corpus.speakers


def test_run_md_selection(dev_corpus, inventory):
    cfg = TrainConfig(task="md", lr=0.05, epochs=3, batch_size=4, seed=1)
    proto = ProtocolConfig(folds=3, min_class_count=2, bootstrap=0, seed=0)
    result = run_md_selection(dev_corpus, cfg, proto, inventory)
    assert 1 <= result.best_epoch <= 3
    assert len(result.epoch_costs) == 3
    assert result.epoch_costs[result.best_epoch - 1] == min(result.epoch_costs)
    assert len(result.plan) == 3
    assert len(result.loss_trace) == result.best_epoch
    assert set(result.thresholds) <= set(PHONES)
    assert all(np.isfinite(t) for t in result.thresholds.values())


def test_run_md_selection_reuses_plan(dev_corpus, inventory):
    cfg = TrainConfig(task="md", lr=0.05, epochs=2, batch_size=4, seed=1)
    proto = ProtocolConfig(folds=3, min_class_count=2, bootstrap=0)
    plan = make_folds(dev_corpus.speakers, k=2, seed=77)  # deliberately k=2
    result = run_md_selection(dev_corpus, cfg, proto, inventory, plan=plan)
    assert result.plan == plan  # injected plan wins over proto.folds


def test_run_md_experiment(tmp_path, inventory, dev_corpus):
    test_paths = gen_corpus(small_spec(seed=12), tmp_path / "test", inventory,
                            name="test")
    test_corpus = load_corpus(test_paths.manifest, None, inventory)
    cfg = TrainConfig(task="md", lr=0.05, epochs=2, batch_size=4, seed=1)
    proto = ProtocolConfig(folds=3, min_class_count=2, bootstrap=10, seed=0)
    result = run_md_experiment(dev_corpus, test_corpus, cfg, proto, inventory,
                               checkpoint="md.ckpt")
    report = result.report
    assert report.scorer == "md-probe"
    assert report.dataset == "test"
    assert report.checkpoint == "md.ckpt"
    assert report.n_included_phones >= 1
    for pm in report.phones:
        if pm.threshold is not None:
            assert pm.threshold_source == "pooled-cv"
    assert result.test_scores is not None and len(result.test_scores) > 0

    # the whole route is deterministic: run it again, compare the report
    again = run_md_experiment(dev_corpus, test_corpus, cfg, proto, inventory,
                              checkpoint="md.ckpt")
    assert again.report.to_json() == report.to_json()


def test_run_pr_experiment(tmp_path, inventory):
    corpora = {}
    for i, name in enumerate(("train", "ndev", "dev", "test")):
        native = name in ("train", "ndev")
        paths = gen_corpus(small_spec(seed=20 + i, signal="shared-dim"),
                           tmp_path / name, inventory, native=native, name=name)
        corpora[name] = load_corpus(paths.manifest, None, inventory)
    cfg = TrainConfig(task="pr", lr=0.05, epochs=2, batch_size=4, seed=1)
    proto = ProtocolConfig(min_class_count=2, bootstrap=0)
    result = run_pr_experiment(corpora["train"], corpora["ndev"],
                               corpora["dev"], corpora["test"], cfg, proto,
                               inventory, checkpoint="pr.ckpt")
    assert result.report.scorer == "pr-probe"
    assert 1 <= result.best_epoch <= 2
    for pm in result.report.phones:
        if pm.threshold is not None:
            assert pm.threshold_source == "dev"

    with pytest.raises(ConfigError):
        run_pr_experiment(corpora["train"], corpora["ndev"], corpora["dev"],
                          corpora["test"], TrainConfig(task="md"), proto,
                          inventory)
