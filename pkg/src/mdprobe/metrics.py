"""Detection metrics over per-instance scores.

Decision rule everywhere: an instance is *accepted* (called correctly
pronounced) iff score >= threshold. Positives are correctly pronounced
instances, so

    FNR = P(score < threshold | positive)      false rejections
    FPR = P(score >= threshold | negative)     false acceptances
    cost = FPR + fn_weight * FNR               (fn_weight defaults to 2)

Ranking quality is reported as 1 - AUC = P(neg > pos) + 0.5 * P(tie),
computed with tied ranks so ties are handled exactly. Aggregate numbers
are macro averages over phones with at least MIN_CLASS_COUNT instances
of *each* class; confidence intervals come from a percentile bootstrap
that resamples speakers, not instances.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

from mdprobe.errors import (
    DataError,
    DegenerateClass,
    NoIncludedPhones,
    NonFiniteValue,
    NumericError,
    OutOfRange,
)

MIN_CLASS_COUNT = 50
DEFAULT_FN_WEIGHT = 2.0


def _atomic_write_text(path: Union[str, Path], text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


# --- core rates on raw score arrays ---


def _as_scores(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size and not np.isfinite(arr).all():
        raise NonFiniteValue("scores contain NaN or inf")
    return arr


def error_rates(pos, neg, threshold: float) -> tuple[float, float]:
    """(FNR, FPR) at a threshold; accept iff score >= threshold."""
    pos, neg = _as_scores(pos), _as_scores(neg)
    if pos.size == 0 or neg.size == 0:
        raise DegenerateClass("need at least one positive and one negative")
    fnr = float((pos < threshold).mean())
    fpr = float((neg >= threshold).mean())
    return fnr, fpr


def cost(fpr: float, fnr: float, fn_weight: float = DEFAULT_FN_WEIGHT) -> float:
    """The application cost of an operating point: FPR + fn_weight * FNR."""
    if not (0.0 <= fpr <= 1.0 and 0.0 <= fnr <= 1.0):
        raise OutOfRange(f"rates must lie in [0, 1], got fpr={fpr}, fnr={fnr}")
    return fpr + fn_weight * fnr


def cost_at(pos, neg, threshold: float,
            fn_weight: float = DEFAULT_FN_WEIGHT) -> float:
    """Cost of thresholding these scores at `threshold`."""
    fnr, fpr = error_rates(pos, neg, threshold)
    return cost(fpr, fnr, fn_weight)


def roc_points(pos, neg) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All achievable operating points: (thresholds, fnr, fpr).

    Thresholds are -inf, the midpoints between adjacent distinct scores,
    and +inf, in ascending order; -inf accepts everything (FNR 0, FPR 1)
    and +inf rejects everything. Every achievable (FNR, FPR) pair on the
    pooled scores appears exactly once.
    """
    pos, neg = _as_scores(pos), _as_scores(neg)
    if pos.size == 0 or neg.size == 0:
        raise DegenerateClass("need at least one positive and one negative")
    distinct = np.unique(np.concatenate([pos, neg]))
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    thresholds = np.concatenate([[-np.inf], mids, [np.inf]])
    # broadcast compare: rows = thresholds
    fnr = (pos[None, :] < thresholds[:, None]).mean(axis=1)
    fpr = (neg[None, :] >= thresholds[:, None]).mean(axis=1)
    return thresholds, fnr, fpr


def one_minus_auc(pos, neg) -> float:
    """P(neg > pos) + 0.5 P(neg == pos), via tied ranks (Mann-Whitney)."""
    pos, neg = _as_scores(pos), _as_scores(neg)
    if pos.size == 0 or neg.size == 0:
        raise DegenerateClass("need at least one positive and one negative")
    scores = np.concatenate([pos, neg])
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    ranks[order] = np.arange(1, len(scores) + 1)
    # average ranks within tie groups
    sorted_scores = scores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = (i + j + 2) / 2.0  # mean of ranks i+1..j+1
        i = j + 1
    rank_sum_neg = ranks[len(pos):].sum()
    u_neg = rank_sum_neg - len(neg) * (len(neg) + 1) / 2.0
    return float(u_neg / (len(pos) * len(neg)))


def min_cost(pos, neg, fn_weight: float = DEFAULT_FN_WEIGHT) -> tuple[float, float]:
    """(lowest achievable cost, threshold attaining it).

    Ties across thresholds resolve to the lowest threshold.
    """
    thresholds, fnr, fpr = roc_points(pos, neg)
    costs = fpr + fn_weight * fnr
    best = int(np.argmin(costs))  # argmin takes the first = lowest threshold
    return float(costs[best]), float(thresholds[best])


def act_cost(pos, neg, threshold: float,
             fn_weight: float = DEFAULT_FN_WEIGHT) -> float:
    """Cost at an externally chosen (finite) threshold."""
    if not np.isfinite(threshold):
        raise NonFiniteValue(f"actuation threshold must be finite, got {threshold}")
    return cost_at(pos, neg, threshold, fn_weight)


# --- scored sets ---


@dataclass(frozen=True)
class ScoredItem:
    utt_id: str
    phone: str
    start: int      # frame span the score was pooled over
    end: int
    score: float
    label: int      # 1 = correctly pronounced, 0 = mispronounced
    speaker: str

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")
        if not np.isfinite(self.score):
            raise NonFiniteValue(f"non-finite score for {self.utt_id}/{self.phone}")


class ScoredSet:
    """A bag of scored phone instances with grouping helpers."""

    def __init__(self, items: Iterable[ScoredItem] = ()):
        self.items: list[ScoredItem] = list(items)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[ScoredItem]:
        return iter(self.items)

    def add(self, item: ScoredItem) -> None:
        self.items.append(item)

    def phones(self) -> list[str]:
        seen: dict[str, None] = {}
        for it in self.items:
            seen.setdefault(it.phone)
        return sorted(seen)

    def speakers(self) -> list[str]:
        seen: dict[str, None] = {}
        for it in self.items:
            seen.setdefault(it.speaker)
        return sorted(seen)

    def class_scores(self, phone: str | None = None) -> tuple[np.ndarray, np.ndarray]:
        """(pos, neg) score arrays, optionally restricted to one phone."""
        pos = [it.score for it in self.items
               if it.label == 1 and (phone is None or it.phone == phone)]
        neg = [it.score for it in self.items
               if it.label == 0 and (phone is None or it.phone == phone)]
        return np.array(pos), np.array(neg)

    def save(self, path: Union[str, Path],
             header_comments: Sequence[str] = ()) -> None:
        """One `utt_id phone start end score label speaker` line per item.

        Tab-separated; scores at repr precision so load() round-trips
        exactly. Extra header comments (provenance) go under the column
        line, each prefixed with '#'.
        """
        lines = ["#utt_id\tphone\tstart\tend\tscore\tlabel\tspeaker"]
        lines += [f"# {c}" for c in header_comments]
        for it in self.items:
            lines.append(
                f"{it.utt_id}\t{it.phone}\t{it.start}\t{it.end}"
                f"\t{it.score!r}\t{it.label}\t{it.speaker}"
            )
        _atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ScoredSet":
        items = []
        for lineno, raw in enumerate(
            Path(path).read_text(encoding="utf-8").splitlines(), 1
        ):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 7:
                raise DataError(f"{path}:{lineno}: want 7 tab-separated fields")
            items.append(ScoredItem(
                utt_id=parts[0], phone=parts[1],
                start=int(parts[2]), end=int(parts[3]),
                score=float(parts[4]), label=int(parts[5]), speaker=parts[6],
            ))
        return cls(items)


# Grouped form used by the macro statistics and the bootstrap:
# phone -> speaker -> [pos scores, neg scores]
Grouped = dict[str, dict[str, tuple[np.ndarray, np.ndarray]]]


def group_scores(scored: ScoredSet) -> Grouped:
    acc: dict[str, dict[str, tuple[list, list]]] = {}
    for it in scored:
        cell = acc.setdefault(it.phone, {}).setdefault(it.speaker, ([], []))
        cell[1 - it.label].append(it.score)  # cell[0]=pos, cell[1]=neg
    return {
        phone: {
            spk: (np.array(cell[0]), np.array(cell[1]))
            for spk, cell in per_spk.items()
        }
        for phone, per_spk in acc.items()
    }


def _pool(per_spk: Mapping[str, tuple[np.ndarray, np.ndarray]],
          speakers: Sequence[str] | None = None) -> tuple[np.ndarray, np.ndarray]:
    keys = per_spk.keys() if speakers is None else [s for s in speakers if s in per_spk]
    pos = [per_spk[s][0] for s in keys]
    neg = [per_spk[s][1] for s in keys]
    cat = lambda chunks: np.concatenate(chunks) if chunks else np.array([])
    return cat(pos), cat(neg)


def _macro(
    grouped: Grouped,
    per_phone: Callable[[np.ndarray, np.ndarray, str], float | None],
    min_count: int = MIN_CLASS_COUNT,
    speakers: Sequence[str] | None = None,
) -> float:
    values = []
    for phone, per_spk in grouped.items():
        pos, neg = _pool(per_spk, speakers)
        if min(pos.size, neg.size) < min_count:
            continue
        value = per_phone(pos, neg, phone)
        if value is not None:
            values.append(value)
    if not values:
        raise NoIncludedPhones(
            f"no phone has >= {min_count} instances of both classes"
        )
    return float(np.mean(values))


def macro_one_minus_auc(grouped: Grouped, min_count: int = MIN_CLASS_COUNT,
                        speakers: Sequence[str] | None = None) -> float:
    return _macro(grouped, lambda p, n, _: one_minus_auc(p, n), min_count, speakers)


def macro_min_cost(grouped: Grouped, fn_weight: float = DEFAULT_FN_WEIGHT,
                   min_count: int = MIN_CLASS_COUNT,
                   speakers: Sequence[str] | None = None) -> float:
    return _macro(grouped, lambda p, n, _: min_cost(p, n, fn_weight)[0],
                  min_count, speakers)


def macro_act_cost(grouped: Grouped, thresholds: Mapping[str, float],
                   fn_weight: float = DEFAULT_FN_WEIGHT,
                   min_count: int = MIN_CLASS_COUNT,
                   speakers: Sequence[str] | None = None) -> float:
    """Macro over included phones that *have* a threshold; a phone whose
    threshold was filtered out at selection time simply stays out."""
    def per_phone(pos, neg, phone):
        if phone not in thresholds:
            return None
        return act_cost(pos, neg, thresholds[phone], fn_weight)
    return _macro(grouped, per_phone, min_count, speakers)


# --- bootstrap ---


@dataclass
class BootstrapCI:
    low: float
    high: float
    point: float        # statistic on the un-resampled speaker list
    n_replicates: int   # replicates that produced a value
    n_skipped: int      # degenerate replicates (metric undefined)


def bootstrap_ci(
    grouped: Grouped,
    statistic: Callable[[Grouped, Sequence[str]], float],
    speakers: Sequence[str],
    n_replicates: int = 1000,
    seed: int = 0,
    alpha: float = 0.05,
) -> BootstrapCI:
    """Percentile CI from resampling speakers with replacement.

    `statistic(grouped, speaker_sample)` must honor speaker multiplicity
    (the helpers above do: a speaker drawn twice contributes twice).
    Replicates where the statistic is undefined are skipped and counted.
    """
    speakers = list(speakers)
    if not speakers:
        raise DataError("bootstrap needs a non-empty speaker list")
    point = statistic(grouped, speakers)
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, len(speakers), size=(n_replicates, len(speakers)))
    values = []
    skipped = 0
    for row in draws:
        sample = [speakers[i] for i in row]
        try:
            values.append(statistic(grouped, sample))
        except (NumericError, DegenerateClass):
            skipped += 1
    if not values:
        raise NumericError("every bootstrap replicate was degenerate")
    lo, hi = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return BootstrapCI(float(lo), float(hi), point, len(values), skipped)


def _pool_with_multiplicity(per_spk, sample: Sequence[str]):
    pos = [per_spk[s][0] for s in sample if s in per_spk]
    neg = [per_spk[s][1] for s in sample if s in per_spk]
    cat = lambda chunks: np.concatenate(chunks) if chunks else np.array([])
    return cat(pos), cat(neg)


def _macro_stat(per_phone: Callable, min_count: int):
    # per_phone may return None to opt a phone out (e.g. no threshold).
    def stat(grouped: Grouped, sample: Sequence[str]) -> float:
        values = []
        for phone, per_spk in grouped.items():
            pos, neg = _pool_with_multiplicity(per_spk, sample)
            if min(pos.size, neg.size) < min_count:
                continue
            value = per_phone(pos, neg, phone)
            if value is not None:
                values.append(value)
        if not values:
            raise NoIncludedPhones("degenerate bootstrap replicate")
        return float(np.mean(values))
    return stat


def one_minus_auc_stat(min_count: int = MIN_CLASS_COUNT):
    return _macro_stat(lambda p, n, _: one_minus_auc(p, n), min_count)


def min_cost_stat(fn_weight: float = DEFAULT_FN_WEIGHT,
                  min_count: int = MIN_CLASS_COUNT):
    return _macro_stat(lambda p, n, _: min_cost(p, n, fn_weight)[0], min_count)


def act_cost_stat(thresholds: Mapping[str, float],
                  fn_weight: float = DEFAULT_FN_WEIGHT,
                  min_count: int = MIN_CLASS_COUNT):
    def per_phone(pos, neg, phone):
        if phone not in thresholds:
            return None  # no threshold selected for this phone: stays out
        return act_cost(pos, neg, thresholds[phone], fn_weight)
    return _macro_stat(per_phone, min_count)


# --- reports ---


@dataclass
class PhoneMetrics:
    phone: str
    n_pos: int
    n_neg: int
    included: bool
    one_minus_auc: float | None = None
    min_cost: float | None = None
    min_cost_threshold: float | None = None
    act_cost: float | None = None
    threshold: float | None = None
    threshold_source: str | None = None   # "dev" or "pooled-cv"


@dataclass
class EvalReport:
    dataset: str
    scorer: str
    fn_weight: float
    min_class_count: int
    n_items: int
    n_speakers: int
    checkpoint: str = ""    # provenance: which model produced the scores
    seed: int = 0
    phones: list[PhoneMetrics] = field(default_factory=list)
    macro_one_minus_auc: float | None = None
    macro_min_cost: float | None = None
    macro_act_cost: float | None = None
    n_included_phones: int = 0
    bootstrap: dict[str, BootstrapCI] = field(default_factory=dict)

    def to_json(self) -> str:
        """Canonical serialization: sorted keys, no timestamps, so equal
        reports are byte-identical."""
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    def save(self, path: Union[str, Path]) -> None:
        _atomic_write_text(path, self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        report = cls(
            dataset=doc["dataset"],
            scorer=doc["scorer"],
            fn_weight=doc["fn_weight"],
            min_class_count=doc["min_class_count"],
            n_items=doc["n_items"],
            n_speakers=doc["n_speakers"],
            checkpoint=doc.get("checkpoint", ""),
            seed=doc.get("seed", 0),
            phones=[PhoneMetrics(**pm) for pm in doc["phones"]],
            macro_one_minus_auc=doc["macro_one_minus_auc"],
            macro_min_cost=doc["macro_min_cost"],
            macro_act_cost=doc["macro_act_cost"],
            n_included_phones=doc["n_included_phones"],
        )
        for name, ci in doc.get("bootstrap", {}).items():
            report.bootstrap[name] = BootstrapCI(**ci)
        return report

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EvalReport":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def evaluate(
    scored: ScoredSet,
    thresholds: Mapping[str, float] | None = None,
    dataset: str = "",
    scorer: str = "",
    fn_weight: float = DEFAULT_FN_WEIGHT,
    min_count: int = MIN_CLASS_COUNT,
    bootstrap: int = 0,
    seed: int = 0,
    checkpoint: str = "",
    threshold_source: str = "dev",
) -> EvalReport:
    """Full per-phone and macro evaluation of a scored set.

    With `thresholds`, actuated cost is reported per phone and
    macro-averaged; an included phone with no threshold on file (it was
    filtered during selection) gets act_cost None and stays out of the
    act-cost macro. With bootstrap > 0, speaker-level percentile CIs
    for each macro metric are attached (one shared seed: the intervals
    come from the same resamples).
    """
    if len(scored) == 0:
        raise DataError("cannot evaluate an empty scored set")
    grouped = group_scores(scored)
    report = EvalReport(
        dataset=dataset,
        scorer=scorer,
        fn_weight=fn_weight,
        min_class_count=min_count,
        n_items=len(scored),
        n_speakers=len(scored.speakers()),
        checkpoint=checkpoint,
        seed=seed,
    )
    for phone in sorted(grouped):
        pos, neg = _pool(grouped[phone])
        pm = PhoneMetrics(
            phone=phone,
            n_pos=int(pos.size),
            n_neg=int(neg.size),
            included=min(pos.size, neg.size) >= min_count,
        )
        if pm.included:
            pm.one_minus_auc = one_minus_auc(pos, neg)
            mc, mct = min_cost(pos, neg, fn_weight)
            pm.min_cost, pm.min_cost_threshold = mc, mct
            if thresholds is not None and phone in thresholds:
                pm.threshold = float(thresholds[phone])
                pm.threshold_source = threshold_source
                pm.act_cost = act_cost(pos, neg, pm.threshold, fn_weight)
        report.phones.append(pm)

    included = [pm for pm in report.phones if pm.included]
    report.n_included_phones = len(included)
    if not included:
        raise NoIncludedPhones(
            f"no phone has >= {min_count} instances of both classes"
        )
    report.macro_one_minus_auc = float(np.mean([pm.one_minus_auc for pm in included]))
    report.macro_min_cost = float(np.mean([pm.min_cost for pm in included]))
    actuated = [pm.act_cost for pm in included if pm.act_cost is not None]
    if thresholds is not None and actuated:
        report.macro_act_cost = float(np.mean(actuated))

    if bootstrap > 0:
        speakers = scored.speakers()
        report.bootstrap["one_minus_auc"] = bootstrap_ci(
            grouped, one_minus_auc_stat(min_count), speakers, bootstrap, seed)
        report.bootstrap["min_cost"] = bootstrap_ci(
            grouped, min_cost_stat(fn_weight, min_count), speakers, bootstrap, seed)
        if thresholds is not None and actuated:
            report.bootstrap["act_cost"] = bootstrap_ci(
                grouped, act_cost_stat(thresholds, fn_weight, min_count),
                speakers, bootstrap, seed)
    return report


def render_table(report: EvalReport) -> str:
    """Fixed-width text table of an evaluation report."""
    def fmt(x, width=8):
        return f"{'-':>{width}}" if x is None else f"{x:>{width}.4f}"

    lines = [
        f"dataset: {report.dataset}   scorer: {report.scorer}   "
        f"items: {report.n_items}   speakers: {report.n_speakers}",
        f"{'phone':<6}{'n_pos':>7}{'n_neg':>7}{'1-AUC':>9}"
        f"{'MinCost':>9}{'ActCost':>9}{'thr':>10}",
    ]
    for pm in report.phones:
        mark = " " if pm.included else "*"
        lines.append(
            f"{pm.phone:<5}{mark}{pm.n_pos:>7}{pm.n_neg:>7}"
            f"{fmt(pm.one_minus_auc, 9)}{fmt(pm.min_cost, 9)}"
            f"{fmt(pm.act_cost, 9)}{fmt(pm.threshold, 10)}"
        )
    lines.append(
        f"{'MACRO':<6}{'':>7}{'':>7}{fmt(report.macro_one_minus_auc, 9)}"
        f"{fmt(report.macro_min_cost, 9)}{fmt(report.macro_act_cost, 9)}{'':>10}"
    )
    for name, ci in report.bootstrap.items():
        lines.append(
            f"  {name} 95% CI [{ci.low:.4f}, {ci.high:.4f}] "
            f"({ci.n_replicates} replicates, {ci.n_skipped} skipped)"
        )
    lines.append("  (* = below min class count, excluded from macro)")
    return "\n".join(lines) + "\n"


def load_thresholds(path: Union[str, Path]) -> dict[str, float]:
    """JSON {phone: threshold} file."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    out = {}
    for phone, thr in doc.items():
        thr = float(thr)
        if not np.isfinite(thr):
            raise NonFiniteValue(f"threshold for {phone} is not finite")
        out[phone] = thr
    return out


def save_thresholds(thresholds: Mapping[str, float], path: Union[str, Path]) -> None:
    _atomic_write_text(
        path,
        json.dumps(dict(sorted(thresholds.items())), indent=2, sort_keys=True) + "\n",
    )
