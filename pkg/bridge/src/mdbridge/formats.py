"""Writers for the downstream toolkit's on-disk formats.

This package deliberately does not import the consumer; the formats
below are the whole contract between the two:

* MPKF feature files — 21-byte header ``<4sBIIIf`` (magic ``MPKF``,
  version 1, n_layers, n_frames, dim, frame_rate) followed by the
  (L, T, d) payload as little-endian float32, C order.
* span files — ``utt phone start end`` whitespace columns, frame units,
  ordered and non-overlapping per utterance, ``#`` comments.
* annotation files — ``utt<TAB>target phones<TAB>annotated phones``.
* dataset manifests — JSON with name/frame_rate/n_layers/dim and one
  record per utterance; feature paths relative to the manifest.

Phone symbols are the 39-phone ARPAbet set plus ``SIL``; aligner output
conventions (lowercase, stress digits, assorted silence markers) are
normalized here.
"""

import json
import os
import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .errors import AlignmentError

MAGIC = b"MPKF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sBIIIf")

ARPABET_39 = frozenset(
    "AA AE AH AO AW AY B CH D DH EH ER EY F G HH IH IY JH K L M N NG "
    "OW OY P R S SH T TH UH UW V W Y Z ZH".split()
)
SILENCE = "SIL"
# markers various aligners use for non-speech
_SILENCE_ALIASES = frozenset({"SIL", "SP", "SPN", "NSN", "PAU", "H#", "<SIL>"})


def normalize_phone(token: str) -> str:
    """Map one aligner phone token onto the target inventory.

    Uppercases, strips a trailing stress digit (``ah0`` -> ``AH``), and
    folds silence markers onto ``SIL``. Raises for anything left over.
    """
    sym = token.strip().upper()
    if sym and sym[-1].isdigit():
        sym = sym[:-1]
    if sym in _SILENCE_ALIASES:
        return SILENCE
    if sym not in ARPABET_39:
        raise AlignmentError(f"phone {token!r} is outside the target inventory")
    return sym


def write_mpkf(
    path: Union[str, Path],
    features: np.ndarray,
    frame_rate: float = 50.0,
) -> None:
    """Write an (L, T, d) array as one feature file (atomic replace)."""
    arr = np.asarray(features)
    if arr.ndim != 3:
        raise ValueError(f"features must be (L, T, d), got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"refusing to write non-finite features to {path}")
    L, T, d = arr.shape
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, L, T, d, frame_rate))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def write_spans(
    path: Union[str, Path],
    rows: Iterable[tuple[str, str, int, int]],
    header: str = "",
) -> None:
    """Write (utt, phone, start, end) rows as a span file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for utt, phone, start, end in rows:
            fh.write(f"{utt} {phone} {start} {end}\n")
    os.replace(tmp, path)


def write_annotations(
    path: Union[str, Path],
    records: Mapping[str, tuple[Sequence[str], Sequence[str]]],
    header: str = "",
) -> None:
    """Write per-utterance (target, annotated) phone sequences."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for utt, (targets, annotated) in records.items():
            fh.write(f"{utt}\t{' '.join(targets)}\t{' '.join(annotated)}\n")
    os.replace(tmp, path)


def write_manifest(
    path: Union[str, Path],
    *,
    name: str,
    frame_rate: float,
    n_layers: int,
    dim: int,
    utterances: Sequence[Mapping[str, str]],
    spans: Union[str, Path, None] = None,
    annotations: Union[str, Path, None] = None,
    split: str = "",
) -> None:
    """Write a dataset manifest; paths are stored relative to it."""
    path = Path(path)
    root = path.parent
    doc: dict = {
        "name": name,
        "frame_rate": frame_rate,
        "n_layers": n_layers,
        "dim": dim,
        "utterances": [
            {
                "utt_id": u["utt_id"],
                "speaker": u["speaker"],
                "features": os.path.relpath(u["features"], root),
                "l1": u.get("l1", ""),
            }
            for u in utterances
        ],
    }
    if split:
        doc["split"] = split
    if spans is not None:
        doc["spans"] = os.path.relpath(spans, root)
    if annotations is not None:
        doc["annotations"] = os.path.relpath(annotations, root)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)
