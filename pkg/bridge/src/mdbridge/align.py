"""Forced-aligner output to feature-frame spans.

Aligners report phone intervals in seconds (CTM rows); features tick at
the encoder's nominal 50 Hz. Boundaries are converted by rounding each
endpoint to the nearest feature frame and clamping to [0, T]. Spans
that collapse to zero length under that rounding are dropped — the
interval was shorter than half a frame, so no frame is theirs.
"""

from pathlib import Path
from typing import Union

from .errors import AlignmentError
from .formats import normalize_phone


def parse_ctm(path: Union[str, Path]) -> list[tuple[float, float, str]]:
    """Read one utterance's CTM into (onset, duration, phone) rows.

    Accepts the conventional 5/6-column form ``utt chan tbeg tdur phone
    [conf]``; rows must be ordered by onset.
    """
    path = Path(path)
    if not path.exists():
        raise AlignmentError(f"no such alignment file: {path}")
    rows: list[tuple[float, float, str]] = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith(("#", ";;")):
            continue
        parts = line.split()
        if len(parts) not in (5, 6):
            raise AlignmentError(
                f"{path}:{lineno}: want `utt chan tbeg tdur phone [conf]`, got {line!r}"
            )
        try:
            tbeg, tdur = float(parts[2]), float(parts[3])
        except ValueError as exc:
            raise AlignmentError(f"{path}:{lineno}: bad interval in {line!r}") from exc
        if tbeg < 0 or tdur < 0:
            raise AlignmentError(f"{path}:{lineno}: negative interval in {line!r}")
        if rows and tbeg < rows[-1][0]:
            raise AlignmentError(f"{path}:{lineno}: rows out of order at {line!r}")
        rows.append((tbeg, tdur, parts[4]))
    return rows


def ctm_to_spans(
    rows: list[tuple[float, float, str]],
    n_frames: int,
    frame_rate: float,
) -> list[tuple[str, int, int]]:
    """Convert CTM rows into ordered, non-overlapping frame spans.

    Returns (phone, start, end) with 0 <= start < end <= n_frames.
    Adjacent intervals that round onto the same boundary stay disjoint
    because both sides round identically; a later onset rounding into
    its predecessor is pushed forward to keep the file well-formed.
    """
    spans: list[tuple[str, int, int]] = []
    prev_end = 0
    for tbeg, tdur, token in rows:
        phone = normalize_phone(token)
        start = int(tbeg * frame_rate + 0.5)
        end = int((tbeg + tdur) * frame_rate + 0.5)
        start = max(start, prev_end)  # guard against rounding overlap
        start = min(start, n_frames)
        end = min(end, n_frames)
        if end <= start:
            continue  # shorter than half a frame, or entirely past T
        spans.append((phone, start, end))
        prev_end = end
    return spans
