"""Batch extraction: corpus directory in, consumable dataset out.

Expected corpus layout::

    corpus/
      meta.tsv            utt_id <TAB> speaker <TAB> l1   (one row per utt)
      wav/<utt>.wav       16 kHz mono 16-bit PCM
      ctm/<utt>.ctm       phone-level forced alignment, seconds
      annot/<utt>.txt     optional: perceived phone sequence, one line

Output layout::

    out/
      features/<utt>.mpkf
      spans.tsv
      annotations.tsv     only when any annot/ files exist
      manifest.json

One bad utterance never kills a run: its failure is logged on the
report and the utterance is skipped. An empty result does — a manifest
with no utterances is useless downstream.
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

from .align import ctm_to_spans, parse_ctm
from .audio import read_wav
from .errors import AlignmentError, AudioFormatError, BridgeError, CorpusLayoutError
from .formats import (
    SILENCE,
    normalize_phone,
    write_annotations,
    write_manifest,
    write_mpkf,
    write_spans,
)
from .models import ModelTag, extract_features, get_tag, n_output_frames


@dataclass(frozen=True)
class ExtractionJob:
    corpus_root: Path
    model_tag: str
    out_dir: Path
    backend: str = "auto"
    name: str = ""

    def tag(self) -> ModelTag:
        return get_tag(self.model_tag)


@dataclass
class ExtractionReport:
    """What happened: sizes on success, reasons per skipped utterance."""

    name: str
    model_tag: str
    backend: str
    n_utterances: int = 0
    n_speakers: int = 0
    n_spans: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)

    @property
    def n_skipped(self) -> int:
        return len(self.failures)


def read_meta(path: Union[str, Path]) -> list[tuple[str, str, str]]:
    """Read meta.tsv rows (utt_id, speaker, l1), rejecting duplicates."""
    path = Path(path)
    if not path.exists():
        raise CorpusLayoutError(f"no such metadata file: {path}")
    rows: list[tuple[str, str, str]] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.rstrip("\n")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise CorpusLayoutError(
                f"{path}:{lineno}: want `utt<TAB>speaker<TAB>l1`, got {line!r}"
            )
        utt = parts[0].strip()
        if utt in seen:
            raise CorpusLayoutError(f"{path}:{lineno}: duplicate utterance {utt!r}")
        seen.add(utt)
        rows.append((utt, parts[1].strip(), parts[2].strip()))
    if not rows:
        raise CorpusLayoutError(f"{path}: no utterances listed")
    return rows


def _resolve_backend(backend: str) -> str:
    if backend != "auto":
        return backend
    try:
        import torch  # noqa: F401

        return "torch"
    except ImportError:
        return "mock"


def extract(job: ExtractionJob) -> ExtractionReport:
    """Run the whole corpus through one upstream model.

    Every utterance is processed independently; per-utterance failures
    (unreadable audio, malformed or unmappable alignment) are recorded
    on the report and the utterance is dropped from every output file.
    """
    root = Path(job.corpus_root)
    if not root.is_dir():
        raise CorpusLayoutError(f"no such corpus directory: {root}")
    tag = job.tag()
    backend = _resolve_backend(job.backend)
    meta = read_meta(root / "meta.tsv")

    out = Path(job.out_dir)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)

    report = ExtractionReport(
        name=job.name or root.name, model_tag=tag.name, backend=backend
    )
    span_rows: list[tuple[str, str, int, int]] = []
    annot_records: dict[str, tuple[list[str], list[str]]] = {}
    utterances: list[dict[str, str]] = []

    for utt, speaker, l1 in meta:
        try:
            wave = read_wav(root / "wav" / f"{utt}.wav")
            features = extract_features(wave, tag, backend)
            T = features.shape[1]
            assert T == n_output_frames(wave.size)
            spans = ctm_to_spans(parse_ctm(root / "ctm" / f"{utt}.ctm"), T, tag.frame_rate)
            if not any(phone != SILENCE for phone, _, _ in spans):
                raise AlignmentError("alignment holds no scorable phones")
            annot_path = root / "annot" / f"{utt}.txt"
            if annot_path.exists():
                perceived = [
                    normalize_phone(tok)
                    for tok in annot_path.read_text(encoding="utf-8").split()
                ]
                targets = [p for p, _, _ in spans if p != SILENCE]
                annot_records[utt] = (targets, [p for p in perceived if p != SILENCE])
        except (AudioFormatError, AlignmentError) as exc:
            report.failures.append((utt, str(exc)))
            continue

        feat_path = feat_dir / f"{utt}.mpkf"
        write_mpkf(feat_path, features, tag.frame_rate)
        span_rows.extend((utt, p, s, e) for p, s, e in spans)
        report.n_spans += len(spans)
        utterances.append(
            {"utt_id": utt, "speaker": speaker, "features": str(feat_path), "l1": l1}
        )

    if not utterances:
        raise BridgeError(
            f"every utterance of {root} failed extraction "
            f"(first: {report.failures[0][0]}: {report.failures[0][1]})"
        )

    stamp = f"extracted by mdbridge, model={tag.name}, backend={backend}"
    spans_path = out / "spans.tsv"
    write_spans(spans_path, span_rows, header=stamp)
    annotations_path = None
    if annot_records:
        annotations_path = out / "annotations.tsv"
        write_annotations(annotations_path, annot_records, header=stamp)
    write_manifest(
        out / "manifest.json",
        name=report.name,
        frame_rate=tag.frame_rate,
        n_layers=tag.n_layers,
        dim=tag.dim,
        utterances=utterances,
        spans=spans_path,
        annotations=annotations_path,
    )
    report.n_utterances = len(utterances)
    report.n_speakers = len({u["speaker"] for u in utterances})
    return report


def report_as_dict(report: ExtractionReport) -> dict:
    doc = dataclasses.asdict(report)
    doc["n_skipped"] = report.n_skipped
    doc["failures"] = [{"utt_id": u, "reason": r} for u, r in report.failures]
    return doc
