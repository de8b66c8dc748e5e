"""Target-vs-annotation phone alignment, labeling, and frame expansion.

The target sequence (what the speaker should have said, from the forced
aligner) is globally aligned against the manual annotation sequence (what
they actually said) with a Needleman-Wunsch DP whose substitution score is
an articulatory-feature similarity. Matches become Positive labels,
substitutions/deletions become Negative, phones inserted by the speaker
(additions) are ignored, and silence is never scored.

The exact feature weights and gap penalty of the similarity measure are a
documented approximation (see PHONE_FEATURE_WEIGHTS and the gap_penalty
knob); published alignments for specific corpora can differ.
"""

from __future__ import annotations

import enum
import importlib.resources
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from mdprobe.errors import CoverageMismatch, DataError, SpanOutOfRange, UnmappableSymbol
from mdprobe.phoneset import Phone, PhoneInventory, SchemeMapping, normalize_phone

# Relative importance of each articulatory feature in the similarity
# measure. Manner and place dominate; voicing and vowel shape refine.
PHONE_FEATURE_WEIGHTS = {
    "place": 3.0,
    "manner": 4.0,
    "voicing": 1.0,
    "height": 2.0,
    "backness": 2.0,
    "rounding": 1.0,
}

# Score charged per inserted/deleted symbol, on the [0, 1] similarity
# scale. Not published for this task; 0.5 makes a gap cheaper than a
# substitution of totally dissimilar phones but dearer than any
# substitution with similarity > 0.5.
DEFAULT_GAP_PENALTY = 0.5

FEATURE_NAMES = tuple(PHONE_FEATURE_WEIGHTS)

# Frame-level sentinels used by expand_to_frames.
UNSELECTED = -1
LABEL_POSITIVE = 1
LABEL_NEGATIVE = 0
LABEL_IGNORED = -1


class StepKind(enum.IntEnum):
    # Enum order doubles as the backtrace tie-break preference.
    MATCH = 0
    SUBSTITUTION = 1
    DELETION = 2
    ADDITION = 3


class PronLabel(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    IGNORED = "ignored"


@dataclass(frozen=True)
class TargetPhoneInstance:
    """One target phone occurrence with its frame span (half-open)."""

    phone: Phone
    start_frame: int
    end_frame: int
    utterance_id: str = ""

    def __post_init__(self) -> None:
        if self.start_frame < 0 or self.end_frame <= self.start_frame:
            raise SpanOutOfRange(
                f"bad span [{self.start_frame}, {self.end_frame}) for "
                f"{self.phone.symbol} in {self.utterance_id or '<utt>'}"
            )

    @property
    def duration(self) -> int:
        return self.end_frame - self.start_frame


@dataclass(frozen=True)
class AlignmentStep:
    kind: StepKind
    target_index: int | None = None
    annotation_index: int | None = None


@dataclass(frozen=True)
class LabeledTargetPhone:
    instance: TargetPhoneInstance
    label: PronLabel


class PhoneSimilarity:
    """Feature-based similarity in [0, 1]: 1 iff identical symbols.

    similarity(a, b) = 1 - (weighted Hamming distance over the feature
    table) / (total weight). Symmetric by construction; silence shares no
    feature values with any phone, so its similarity to everything else
    is exactly 0.
    """

    def __init__(self, table: dict[str, tuple[str, ...]], weights=None):
        self.weights = dict(weights or PHONE_FEATURE_WEIGHTS)
        self._wvec = np.array([self.weights[f] for f in FEATURE_NAMES])
        self._total = float(self._wvec.sum())
        self.table = table

    @classmethod
    def from_file(cls, source: Union[str, Path], weights=None) -> "PhoneSimilarity":
        table: dict[str, tuple[str, ...]] = {}
        for raw in Path(source).read_text(encoding="utf-8").splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 1 + len(FEATURE_NAMES):
                raise DataError(f"malformed feature row {line!r} in {source}")
            table[parts[0]] = tuple(parts[1:])
        return cls(table, weights)

    @classmethod
    def default(cls, weights=None) -> "PhoneSimilarity":
        path = importlib.resources.files("mdprobe").joinpath(
            "data", "phone_features.tsv"
        )
        return cls.from_file(Path(str(path)), weights)

    def __call__(self, a: Phone, b: Phone) -> float:
        if a.symbol == b.symbol:
            return 1.0
        fa = self.table[a.symbol]
        fb = self.table[b.symbol]
        dist = sum(w for w, x, y in zip(self._wvec, fa, fb) if x != y)
        return 1.0 - dist / self._total


def align_sequences(
    target: Sequence[Phone],
    annotation: Sequence[Phone],
    similarity: PhoneSimilarity | None = None,
    gap_penalty: float = DEFAULT_GAP_PENALTY,
) -> list[AlignmentStep]:
    """Globally align target and annotation phone sequences.

    Maximizes total similarity minus gap penalties; every element of both
    sequences is consumed exactly once. The backtrace is deterministic:
    ties prefer Match > Substitution > Deletion > Addition.
    """
    if not target or not annotation:
        raise DataError("align_sequences requires two non-empty sequences")
    sim = similarity or _default_similarity()
    n, m = len(target), len(annotation)
    score = np.empty((n + 1, m + 1))
    score[0, :] = -gap_penalty * np.arange(m + 1)
    score[:, 0] = -gap_penalty * np.arange(n + 1)
    simmat = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            simmat[i, j] = sim(target[i], annotation[j])
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            score[i, j] = max(
                score[i - 1, j - 1] + simmat[i - 1, j - 1],
                score[i - 1, j] - gap_penalty,
                score[i, j - 1] - gap_penalty,
            )

    steps: list[AlignmentStep] = []
    i, j = n, m
    while i > 0 or j > 0:
        here = score[i, j]
        chosen = None
        if i > 0 and j > 0 and here == score[i - 1, j - 1] + simmat[i - 1, j - 1]:
            kind = (
                StepKind.MATCH
                if target[i - 1].symbol == annotation[j - 1].symbol
                else StepKind.SUBSTITUTION
            )
            chosen = (kind, AlignmentStep(kind, i - 1, j - 1), i - 1, j - 1)
        if i > 0 and here == score[i - 1, j] - gap_penalty:
            cand = (
                StepKind.DELETION,
                AlignmentStep(StepKind.DELETION, target_index=i - 1),
                i - 1,
                j,
            )
            if chosen is None or cand[0] < chosen[0]:
                chosen = cand
        if j > 0 and here == score[i, j - 1] - gap_penalty:
            cand = (
                StepKind.ADDITION,
                AlignmentStep(StepKind.ADDITION, annotation_index=j - 1),
                i,
                j - 1,
            )
            if chosen is None or cand[0] < chosen[0]:
                chosen = cand
        assert chosen is not None, "broken DP backtrace"
        steps.append(chosen[1])
        i, j = chosen[2], chosen[3]
    steps.reverse()
    return steps


def alignment_score(
    steps: Iterable[AlignmentStep],
    target: Sequence[Phone],
    annotation: Sequence[Phone],
    similarity: PhoneSimilarity | None = None,
    gap_penalty: float = DEFAULT_GAP_PENALTY,
) -> float:
    """Total DP score of an explicit step sequence."""
    sim = similarity or _default_similarity()
    total = 0.0
    for step in steps:
        if step.kind in (StepKind.MATCH, StepKind.SUBSTITUTION):
            total += sim(target[step.target_index], annotation[step.annotation_index])
        else:
            total -= gap_penalty
    return total


_SIMILARITY_CACHE: PhoneSimilarity | None = None


def _default_similarity() -> PhoneSimilarity:
    global _SIMILARITY_CACHE
    if _SIMILARITY_CACHE is None:
        _SIMILARITY_CACHE = PhoneSimilarity.default()
    return _SIMILARITY_CACHE


def phone_similarity(a: Phone, b: Phone) -> float:
    """Similarity under the packaged default feature table."""
    return _default_similarity()(a, b)


def labels_from_alignment(
    alignment: Sequence[AlignmentStep],
    n_targets: int,
) -> list[PronLabel]:
    """One label per target position: Match -> Positive, Substitution or
    Deletion -> Negative. Addition steps (speaker-inserted phones) label
    nothing. The alignment must visit every target index exactly once."""
    labels: dict[int, PronLabel] = {}
    for step in alignment:
        if step.kind is StepKind.ADDITION:
            continue
        idx = step.target_index
        if idx is None or idx in labels:
            raise CoverageMismatch("alignment visits a target index twice or not at all")
        if step.kind is StepKind.MATCH:
            labels[idx] = PronLabel.POSITIVE
        else:
            labels[idx] = PronLabel.NEGATIVE
    if sorted(labels) != list(range(n_targets)):
        raise CoverageMismatch(
            f"alignment covers {len(labels)} target symbols, "
            f"but there are {n_targets} target positions"
        )
    return [labels[i] for i in range(n_targets)]


def assign_labels(
    alignment: Sequence[AlignmentStep],
    targets: Sequence[TargetPhoneInstance],
) -> list[LabeledTargetPhone]:
    """Label target instances from an alignment over the full sequence.

    Silence targets are always Ignored, whatever the alignment said.
    """
    labels = labels_from_alignment(alignment, len(targets))
    return [
        LabeledTargetPhone(
            inst, PronLabel.IGNORED if inst.phone.is_silence else lab
        )
        for inst, lab in zip(targets, labels)
    ]


@dataclass
class FrameTargets:
    """Per-frame training targets with an unselected sentinel.

    ``ordinal[t]`` is the inventory index of the phone spanning frame t
    (UNSELECTED outside all spans); ``label[t]`` is LABEL_POSITIVE /
    LABEL_NEGATIVE inside scored spans and LABEL_IGNORED otherwise.
    """

    ordinal: np.ndarray
    label: np.ndarray

    @property
    def n_frames(self) -> int:
        return len(self.ordinal)

    def selected_mask(self) -> np.ndarray:
        """Frames that enter the detection loss."""
        return (self.ordinal != UNSELECTED) & (self.label != LABEL_IGNORED)


_LABEL_CODE = {
    PronLabel.POSITIVE: LABEL_POSITIVE,
    PronLabel.NEGATIVE: LABEL_NEGATIVE,
    PronLabel.IGNORED: LABEL_IGNORED,
}


def expand_to_frames(
    labeled: Sequence[LabeledTargetPhone],
    n_frames: int,
    inventory: PhoneInventory,
) -> FrameTargets:
    """Replicate per-phone label/identity over the frames of each span."""
    ordinal = np.full(n_frames, UNSELECTED, dtype=np.int32)
    label = np.full(n_frames, LABEL_IGNORED, dtype=np.int8)
    for item in labeled:
        inst = item.instance
        if inst.end_frame > n_frames:
            raise SpanOutOfRange(
                f"span [{inst.start_frame}, {inst.end_frame}) exceeds "
                f"{n_frames} frames in {inst.utterance_id or '<utt>'}"
            )
        sl = slice(inst.start_frame, inst.end_frame)
        ordinal[sl] = inventory.index_of(inst.phone.symbol)
        label[sl] = _LABEL_CODE[item.label]
    return FrameTargets(ordinal=ordinal, label=label)


def expand_phone_targets(
    instances: Sequence[TargetPhoneInstance],
    n_frames: int,
    inventory: PhoneInventory,
) -> np.ndarray:
    """Per-frame phone ordinals for recognition training.

    Frames outside every span are filled with the silence class, so every
    frame has a target.
    """
    out = np.full(n_frames, inventory.silence_index, dtype=np.int32)
    for inst in instances:
        if inst.end_frame > n_frames:
            raise SpanOutOfRange(
                f"span [{inst.start_frame}, {inst.end_frame}) exceeds {n_frames} frames"
            )
        out[inst.start_frame : inst.end_frame] = inventory.index_of(inst.phone.symbol)
    return out


# --- file loaders ---


def load_span_file(
    source: Union[str, Path],
    inventory: PhoneInventory,
) -> dict[str, list[TargetPhoneInstance]]:
    """Read `utt_id phone start_frame end_frame` lines into ordered spans.

    Spans of one utterance must be ordered and non-overlapping.
    """
    spans: dict[str, list[TargetPhoneInstance]] = {}
    for lineno, raw in enumerate(Path(source).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DataError(f"{source}:{lineno}: want `utt phone start end`, got {line!r}")
        utt, symbol, start, end = parts
        inst = TargetPhoneInstance(
            phone=inventory.phone(symbol),
            start_frame=int(start),
            end_frame=int(end),
            utterance_id=utt,
        )
        spans.setdefault(utt, []).append(inst)
    for utt, instances in spans.items():
        prev_end = 0
        for inst in instances:
            if inst.start_frame < prev_end:
                raise DataError(
                    f"{source}: spans of {utt} overlap or are out of order "
                    f"at [{inst.start_frame}, {inst.end_frame})"
                )
            prev_end = inst.end_frame
    return spans


def load_annotation_file(
    source: Union[str, Path],
    scheme: SchemeMapping | None,
    inventory: PhoneInventory,
    *,
    skip_unmappable: bool = False,
) -> dict[str, tuple[list[Phone], list[Phone]]]:
    """Read `utt<TAB>target phones<TAB>annotated phones` records."""
    records: dict[str, tuple[list[Phone], list[Phone]]] = {}
    for lineno, raw in enumerate(Path(source).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.rstrip("\n")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(
                f"{source}:{lineno}: want `utt<TAB>targets<TAB>annotations`, got {line!r}"
            )
        utt = parts[0].strip()
        if utt in records:
            raise DataError(f"{source}:{lineno}: duplicate utterance {utt!r}")

        def _norm(tokens: str) -> list[Phone]:
            out = []
            for token in tokens.split():
                try:
                    out.append(normalize_phone(token, scheme, inventory))
                except UnmappableSymbol:
                    if skip_unmappable:
                        continue
                    raise
            return out

        records[utt] = (_norm(parts[1]), _norm(parts[2]))
    return records


def label_utterance(
    instances: Sequence[TargetPhoneInstance],
    target_seq: Sequence[Phone],
    annotation_seq: Sequence[Phone],
    similarity: PhoneSimilarity | None = None,
    gap_penalty: float = DEFAULT_GAP_PENALTY,
) -> list[LabeledTargetPhone]:
    """Align and label one utterance, validating span/sequence agreement.

    The annotation file's target sequence may omit silence; spans often
    carry explicit SIL rows. Both layouts are accepted: the alignment
    runs over what the annotation file lists, and silence instances end
    up Ignored either way.
    """
    inst_syms = [i.phone.symbol for i in instances]
    tgt_syms = [p.symbol for p in target_seq]
    if tgt_syms == inst_syms:
        positions = list(range(len(instances)))
    else:
        nonsil = [k for k, inst in enumerate(instances) if not inst.phone.is_silence]
        if tgt_syms != [inst_syms[k] for k in nonsil]:
            raise CoverageMismatch(
                "span phones and annotation-file target phones disagree for "
                f"{instances[0].utterance_id if instances else '<utt>'}"
            )
        positions = nonsil
    steps = align_sequences(target_seq, annotation_seq, similarity, gap_penalty)
    pos_labels = labels_from_alignment(steps, len(target_seq))
    labels = [PronLabel.IGNORED] * len(instances)
    for tpos, ipos in zip(range(len(target_seq)), positions):
        labels[ipos] = pos_labels[tpos]
    return [
        LabeledTargetPhone(
            inst, PronLabel.IGNORED if inst.phone.is_silence else lab
        )
        for inst, lab in zip(instances, labels)
    ]
