"""Experiment protocol: speaker folds, cross-validated selection, and
the two training routes (label-supervised detection vs recognition).

Detection route ("md"):
    1. split the non-native dev speakers into K folds (by speaker, or one
       fold per L1 group);
    2. for each fold, train on the other folds and score the held-out
       speakers after every epoch; pool the held-out scores per epoch;
    3. pick the epoch whose pooled dev scores give the lowest macro cost
       (ties go to fewer epochs), and per-phone decision thresholds from
       that epoch's pooled scores;
    4. retrain on all dev speakers for the chosen number of epochs and
       evaluate on the test speakers at the frozen thresholds.

Recognition route ("pr"): train on native speech (labels are just the
phone ordinals; no pronunciation judgments exist or are used), pick the
epoch by native dev-set loss, then take thresholds from the non-native
dev set exactly as a black-box scorer would be calibrated.

Pooling dev scores across folds before computing selection metrics keeps
per-phone counts above the class-count filter even when single folds are
too small.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from mdprobe.annotate import (
    LabeledTargetPhone,
    PronLabel,
    TargetPhoneInstance,
    expand_phone_targets,
    expand_to_frames,
    label_utterance,
    load_annotation_file,
    load_span_file,
)
from mdprobe.downstream import (
    LinearProbe,
    TrainConfig,
    dataset_loss,
    prepare_utterance,
    score_from_logits,
    train,
)
from mdprobe.errors import ConfigError, DataError, TooManyFolds
from mdprobe.featureio import load_manifest, read_features
from mdprobe.metrics import (
    DEFAULT_FN_WEIGHT,
    MIN_CLASS_COUNT,
    EvalReport,
    ScoredItem,
    ScoredSet,
    evaluate,
    group_scores,
    macro_min_cost,
    min_cost,
)
from mdprobe.phoneset import PhoneInventory, SchemeMapping


# --- folds ---


@dataclass(frozen=True)
class FoldPlan:
    """Held-out speaker groups; their union is the full dev speaker set."""

    folds: tuple[tuple[str, ...], ...]
    by: str

    def __len__(self) -> int:
        return len(self.folds)


def make_folds(
    speakers: Sequence[str],
    k: int | None = None,
    seed: int = 0,
    by: str = "speaker",
    l1_of: Mapping[str, str] | None = None,
) -> FoldPlan:
    """Deterministic fold assignment.

    by="speaker": shuffle the sorted speaker list with `seed`, then deal
    round-robin into k folds. by="l1": one fold per distinct L1 (k, if
    given, must agree); speakers sharing an L1 are never split.
    """
    speakers = sorted(set(speakers))
    if not speakers:
        raise DataError("no speakers to fold")
    if by == "speaker":
        if k is None or k < 2:
            raise ConfigError("need k >= 2 folds")
        if k > len(speakers):
            raise TooManyFolds(f"{k} folds but only {len(speakers)} speakers")
        order = list(speakers)
        rng = np.random.default_rng([seed, 0xF0])
        rng.shuffle(order)
        folds = [tuple(order[i::k]) for i in range(k)]
        return FoldPlan(folds=tuple(folds), by=by)
    if by == "l1":
        if l1_of is None:
            raise ConfigError("by='l1' needs a speaker -> L1 mapping")
        groups: dict[str, list[str]] = {}
        for spk in speakers:
            if spk not in l1_of or not l1_of[spk]:
                raise DataError(f"speaker {spk} has no L1 tag")
            groups.setdefault(l1_of[spk], []).append(spk)
        if len(groups) < 2:
            raise TooManyFolds(f"only {len(groups)} distinct L1 group(s)")
        if k is not None and k != len(groups):
            raise ConfigError(
                f"k={k} but the data has {len(groups)} L1 groups"
            )
        folds = [tuple(groups[l1]) for l1 in sorted(groups)]
        return FoldPlan(folds=tuple(folds), by=by)
    raise ConfigError(f"unknown fold scheme {by!r}")


def save_folds(plan: FoldPlan, path: Union[str, Path]) -> None:
    """`speaker_id<TAB>fold_index` lines, in plan order."""
    lines = [f"# by={plan.by}"]
    for i, fold in enumerate(plan.folds):
        lines.extend(f"{spk}\t{i}" for spk in fold)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def load_folds(path: Union[str, Path]) -> FoldPlan:
    """Read a fold plan back; lets a run reuse another run's folds."""
    by = "speaker"
    assigned: dict[int, list[str]] = {}
    seen: set[str] = set()
    for lineno, raw in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), 1
    ):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if "by=" in line:
                by = line.split("by=", 1)[1].strip()
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: want `speaker<TAB>fold`")
        spk, idx = parts[0], int(parts[1])
        if spk in seen:
            raise DataError(f"{path}:{lineno}: speaker {spk} assigned twice")
        seen.add(spk)
        assigned.setdefault(idx, []).append(spk)
    if not assigned:
        raise DataError(f"{path}: no fold assignments")
    if sorted(assigned) != list(range(len(assigned))):
        raise DataError(f"{path}: fold indices are not contiguous from 0")
    folds = tuple(tuple(assigned[i]) for i in range(len(assigned)))
    return FoldPlan(folds=folds, by=by)


# --- loaded corpora ---


@dataclass
class Utterance:
    utt_id: str
    speaker: str
    l1: str
    features: np.ndarray                       # (L, T, d)
    instances: list[TargetPhoneInstance]
    labeled: list[LabeledTargetPhone] | None = None


@dataclass
class Corpus:
    name: str
    utterances: list[Utterance] = field(default_factory=list)

    @property
    def speakers(self) -> list[str]:
        seen: dict[str, None] = {}
        for u in self.utterances:
            seen.setdefault(u.speaker)
        return sorted(seen)

    def l1_of(self) -> dict[str, str]:
        return {u.speaker: u.l1 for u in self.utterances}

    def subset(self, speakers) -> list[Utterance]:
        wanted = set(speakers)
        return [u for u in self.utterances if u.speaker in wanted]

    def excluding(self, speakers) -> list[Utterance]:
        banned = set(speakers)
        return [u for u in self.utterances if u.speaker not in banned]


def load_corpus(
    manifest_path: Union[str, Path],
    spans_path: Union[str, Path] | None,
    inventory: PhoneInventory,
    annotations_path: Union[str, Path] | None = None,
    scheme: SchemeMapping | None = None,
    *,
    skip_unmappable: bool = False,
) -> Corpus:
    """Load features + spans (+ optional pronunciation annotations).

    Paths left as None fall back to the files the manifest itself names.
    Every manifest utterance needs spans; when annotations are present,
    every utterance needs a record and its targets are aligned/labeled
    here, eagerly, so downstream code never sees raw annotations.
    """
    manifest = load_manifest(manifest_path)
    if spans_path is None:
        spans_path = manifest.spans_file
    if spans_path is None:
        raise DataError(
            f"{manifest_path}: no span file given and none in the manifest"
        )
    if annotations_path is None:
        annotations_path = manifest.annotations_file
    spans = load_span_file(spans_path, inventory)
    annotations = None
    if annotations_path is not None:
        annotations = load_annotation_file(
            annotations_path, scheme, inventory, skip_unmappable=skip_unmappable
        )
    corpus = Corpus(name=manifest.name)
    for entry in manifest.entries:
        if entry.utt_id not in spans:
            raise DataError(f"utterance {entry.utt_id} has no spans")
        feats, header = read_features(entry.feature_file)
        instances = spans[entry.utt_id]
        last = max(i.end_frame for i in instances)
        if last > header.n_frames:
            raise DataError(
                f"{entry.utt_id}: spans reach frame {last} but features "
                f"have {header.n_frames}"
            )
        utt = Utterance(
            utt_id=entry.utt_id,
            speaker=entry.speaker,
            l1=entry.l1,
            features=feats,
            instances=list(instances),
        )
        if annotations is not None:
            if entry.utt_id not in annotations:
                raise DataError(f"utterance {entry.utt_id} has no annotation record")
            target_seq, annot_seq = annotations[entry.utt_id]
            utt.labeled = label_utterance(utt.instances, target_seq, annot_seq)
        corpus.utterances.append(utt)
    return corpus


def md_training_data(utts: Sequence[Utterance], inventory: PhoneInventory,
                     combine_mode: str):
    data = []
    for u in utts:
        if u.labeled is None:
            raise DataError(f"{u.utt_id}: no pronunciation labels loaded")
        ft = expand_to_frames(u.labeled, u.features.shape[1], inventory)
        data.append(prepare_utterance(u.utt_id, u.speaker, u.features,
                                      ft.ordinal, ft.label, combine_mode))
    return data


def pr_training_data(utts: Sequence[Utterance], inventory: PhoneInventory,
                     combine_mode: str):
    data = []
    for u in utts:
        ordinal = expand_phone_targets(u.instances, u.features.shape[1], inventory)
        data.append(prepare_utterance(u.utt_id, u.speaker, u.features,
                                      ordinal, None, combine_mode))
    return data


ScoreRow = tuple[str, str, TargetPhoneInstance, float]  # utt, speaker, inst, score


def score_instances(
    model: LinearProbe,
    utts: Sequence[Utterance],
    inventory: PhoneInventory,
) -> list[ScoreRow]:
    """Score every target span. Label-blind by construction: this pass
    touches only features and spans, so it cannot leak judgments into
    the scores (the join with labels happens in attach_labels)."""
    rows: list[ScoreRow] = []
    for u in utts:
        logits = model.forward(u.features)
        for inst in u.instances:
            rows.append(
                (u.utt_id, u.speaker, inst,
                 score_from_logits(logits, inst, inventory))
            )
    return rows


def attach_labels(rows: Sequence[ScoreRow],
                  utts: Sequence[Utterance]) -> ScoredSet:
    """Join completed scores with pronunciation labels.

    Ignored instances (silence, unannotated extras) drop out here; every
    remaining row must have a label or the join fails loudly.
    """
    labels: dict[tuple[str, int, int], PronLabel] = {}
    for u in utts:
        if u.labeled is None:
            raise DataError(f"{u.utt_id}: no pronunciation labels loaded")
        for item in u.labeled:
            key = (u.utt_id, item.instance.start_frame, item.instance.end_frame)
            labels[key] = item.label
    scored = ScoredSet()
    for utt_id, speaker, inst, score in rows:
        label = labels.get((utt_id, inst.start_frame, inst.end_frame))
        if label is None:
            raise DataError(
                f"{utt_id}: scored span [{inst.start_frame}, {inst.end_frame}) "
                "has no label"
            )
        if label is PronLabel.IGNORED:
            continue
        scored.add(ScoredItem(
            utt_id=utt_id,
            phone=inst.phone.symbol,
            start=inst.start_frame,
            end=inst.end_frame,
            score=score,
            label=1 if label is PronLabel.POSITIVE else 0,
            speaker=speaker,
        ))
    return scored


def score_utterances(
    model: LinearProbe,
    utts: Sequence[Utterance],
    inventory: PhoneInventory,
) -> ScoredSet:
    """Score everything, then join labels: the two-phase composition."""
    return attach_labels(score_instances(model, utts, inventory), utts)


# --- selection ---


def crossval_epoch_scores(
    dev: Corpus,
    plan: FoldPlan,
    cfg: TrainConfig,
    inventory: PhoneInventory,
    jobs: int = 1,
) -> list[ScoredSet]:
    """Pooled held-out scores after each epoch, across all folds.

    Fold f's model trains on every other fold's speakers; its held-out
    speakers are scored after every epoch. Pooling merges folds in plan
    order whatever `jobs` is, so the output is independent of scheduling
    (and bitwise reproducible at jobs=1 by construction).
    """

    def run_fold(heldout) -> list[ScoredSet]:
        train_utts = dev.excluding(heldout)
        held_utts = dev.subset(heldout)
        if not train_utts or not held_utts:
            raise DataError("a fold has no training or no held-out utterances")
        data = md_training_data(train_utts, inventory, cfg.combine_mode)
        per_epoch = [ScoredSet() for _ in range(cfg.epochs)]

        def hook(epoch: int, model: LinearProbe):
            per_epoch[epoch - 1] = score_utterances(model, held_utts, inventory)

        train(data, cfg, len(inventory), epoch_hook=hook)
        return per_epoch

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            fold_results = list(pool.map(run_fold, plan.folds))
    else:
        fold_results = [run_fold(f) for f in plan.folds]

    pooled = [ScoredSet() for _ in range(cfg.epochs)]
    for per_epoch in fold_results:
        for e, part in enumerate(per_epoch):
            for item in part:
                pooled[e].add(item)
    return pooled


def select_epoch(
    pooled: Sequence[ScoredSet],
    fn_weight: float = DEFAULT_FN_WEIGHT,
    min_count: int = MIN_CLASS_COUNT,
) -> tuple[int, list[float]]:
    """(best epoch, per-epoch macro min-cost). Ties pick fewer epochs."""
    costs = [
        macro_min_cost(group_scores(s), fn_weight, min_count) for s in pooled
    ]
    best = int(np.argmin(costs))
    return best + 1, costs


def select_thresholds(
    scored: ScoredSet,
    fn_weight: float = DEFAULT_FN_WEIGHT,
    min_count: int = MIN_CLASS_COUNT,
) -> dict[str, float]:
    """Per-phone cost-minimizing thresholds, made finite for actuation.

    Phones with fewer than min_count instances of either class get no
    threshold at all — there is not enough signal to calibrate one, and
    downstream evaluation simply leaves them unactuated. Accept-all
    optima (-inf) become the phone's lowest observed score; reject-all
    optima (+inf) become just above the highest.
    """
    out: dict[str, float] = {}
    for phone in scored.phones():
        pos, neg = scored.class_scores(phone)
        if min(pos.size, neg.size) < min_count:
            continue
        all_scores = np.concatenate([pos, neg])
        if pos.size and neg.size:
            _, thr = min_cost(pos, neg, fn_weight)
        elif pos.size:  # reachable only with min_count == 0
            thr = -np.inf   # only correct instances seen: accept everything
        else:
            thr = np.inf    # only errors seen: reject everything
        if thr == -np.inf:
            thr = float(all_scores.min())
        elif thr == np.inf:
            thr = float(np.nextafter(all_scores.max(), np.inf))
        out[phone] = float(thr)
    return out


# --- experiment drivers ---


@dataclass(frozen=True)
class ProtocolConfig:
    folds: int = 6
    fold_by: str = "speaker"       # "speaker" or "l1"
    fn_weight: float = DEFAULT_FN_WEIGHT
    min_class_count: int = MIN_CLASS_COUNT
    bootstrap: int = 1000
    seed: int = 0
    jobs: int = 1                  # fold-level parallelism; results identical


@dataclass
class SelectionResult:
    model: LinearProbe
    thresholds: dict[str, float]
    best_epoch: int
    epoch_costs: list[float]
    dev_scores: ScoredSet
    plan: FoldPlan
    loss_trace: list[float] = field(default_factory=list)


@dataclass
class ExperimentResult:
    report: EvalReport
    model: LinearProbe
    thresholds: dict[str, float]
    best_epoch: int
    epoch_costs: list[float] = field(default_factory=list)
    dev_scores: ScoredSet | None = None
    test_scores: ScoredSet | None = None
    plan: FoldPlan | None = None
    loss_trace: list[float] = field(default_factory=list)


def run_md_selection(
    dev: Corpus,
    train_cfg: TrainConfig,
    proto: ProtocolConfig,
    inventory: PhoneInventory,
    plan: FoldPlan | None = None,
) -> SelectionResult:
    """CV selection on dev, then one final model trained on all of dev.

    Pass `plan` to reuse fold assignments from an earlier run instead of
    deriving them from the seed.
    """
    if plan is None:
        plan = make_folds(
            dev.speakers,
            k=proto.folds if proto.fold_by == "speaker" else None,
            seed=proto.seed,
            by=proto.fold_by,
            l1_of=dev.l1_of() if proto.fold_by == "l1" else None,
        )
    pooled = crossval_epoch_scores(dev, plan, train_cfg, inventory, jobs=proto.jobs)
    best_epoch, costs = select_epoch(pooled, proto.fn_weight, proto.min_class_count)
    dev_scores = pooled[best_epoch - 1]
    thresholds = select_thresholds(dev_scores, proto.fn_weight,
                                   proto.min_class_count)

    data = md_training_data(dev.utterances, inventory, train_cfg.combine_mode)
    model, trace = train(data, replace(train_cfg, epochs=best_epoch),
                         len(inventory))
    return SelectionResult(model, thresholds, best_epoch, costs, dev_scores,
                           plan, trace)


def run_md_experiment(
    dev: Corpus,
    test: Corpus,
    train_cfg: TrainConfig,
    proto: ProtocolConfig,
    inventory: PhoneInventory,
    plan: FoldPlan | None = None,
    checkpoint: str = "",
) -> ExperimentResult:
    """Detection route, end to end: selection on dev, metrics on test.

    Test labels are only consulted after all test scores exist — scoring
    is the label-blind pass, attach_labels is the join.
    """
    sel = run_md_selection(dev, train_cfg, proto, inventory, plan=plan)
    rows = score_instances(sel.model, test.utterances, inventory)
    test_scores = attach_labels(rows, test.utterances)
    report = evaluate(
        test_scores,
        thresholds=sel.thresholds,
        dataset=test.name,
        scorer="md-probe",
        fn_weight=proto.fn_weight,
        min_count=proto.min_class_count,
        bootstrap=proto.bootstrap,
        seed=proto.seed,
        checkpoint=checkpoint,
        threshold_source="pooled-cv",
    )
    return ExperimentResult(report, sel.model, sel.thresholds, sel.best_epoch,
                            sel.epoch_costs, sel.dev_scores, test_scores,
                            sel.plan, sel.loss_trace)


def run_pr_experiment(
    native_train: Corpus,
    native_dev: Corpus,
    nonnative_dev: Corpus,
    test: Corpus,
    train_cfg: TrainConfig,
    proto: ProtocolConfig,
    inventory: PhoneInventory,
    checkpoint: str = "",
) -> ExperimentResult:
    """Recognition route: native-only training, loss-based epoch choice,
    thresholds calibrated on the non-native dev scores."""
    if train_cfg.task != "pr":
        raise ConfigError("run_pr_experiment wants a task='pr' training config")
    train_data = pr_training_data(native_train.utterances, inventory,
                                  train_cfg.combine_mode)
    dev_data = pr_training_data(native_dev.utterances, inventory,
                                train_cfg.combine_mode)
    dev_losses: list[float] = []

    def hook(epoch: int, model: LinearProbe):
        dev_losses.append(dataset_loss(model, dev_data, "pr"))

    train(train_data, train_cfg, len(inventory), epoch_hook=hook)
    best_epoch = int(np.argmin(dev_losses)) + 1

    final_cfg = replace(train_cfg, epochs=best_epoch)
    model, trace = train(train_data, final_cfg, len(inventory))

    dev_scores = score_utterances(model, nonnative_dev.utterances, inventory)
    thresholds = select_thresholds(dev_scores, proto.fn_weight,
                                   proto.min_class_count)
    rows = score_instances(model, test.utterances, inventory)
    test_scores = attach_labels(rows, test.utterances)
    report = evaluate(
        test_scores,
        thresholds=thresholds,
        dataset=test.name,
        scorer="pr-probe",
        fn_weight=proto.fn_weight,
        min_count=proto.min_class_count,
        bootstrap=proto.bootstrap,
        seed=proto.seed,
        checkpoint=checkpoint,
        threshold_source="dev",
    )
    return ExperimentResult(report, model, thresholds, best_epoch, dev_losses,
                            dev_scores, test_scores, None, trace)
