"""Binary frame-feature container (MPKF) and dataset manifests.

MPKF layout, all little-endian:

    bytes 0..3    magic b"MPKF"
    byte  4       format version (currently 1)
    bytes 5..8    u32 L   number of layers
    bytes 9..12   u32 T   number of frames
    bytes 13..16  u32 d   feature dimension
    bytes 17..20  f32 frame_rate (Hz)
    then          L*T*d f32 payload, layer-major then frame-major

Payloads are float32 on disk; reading returns float64 so downstream math
is done in double precision. Writing float64 arrays quantizes through
float32 (round-trip of an already-float32-representable array is exact).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from mdprobe.errors import (
    BadMagic,
    DataError,
    DimensionMismatch,
    DuplicateUttId,
    MissingFile,
    NonFiniteValue,
    RowNotNormalized,
    TruncatedFile,
    UnsupportedVersion,
)

MAGIC = b"MPKF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sBIIIf")


@dataclass(frozen=True)
class FeatureHeader:
    n_layers: int
    n_frames: int
    dim: int
    frame_rate: float


def write_features(
    path: Union[str, Path],
    features: np.ndarray,
    frame_rate: float = 50.0,
) -> None:
    """Write an (L, T, d) array as one MPKF file (atomic replace)."""
    arr = np.asarray(features)
    if arr.ndim != 3:
        raise DimensionMismatch(f"features must be (L, T, d), got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteValue(f"refusing to write non-finite features to {path}")
    L, T, d = arr.shape
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, L, T, d, frame_rate))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_header(path: Union[str, Path]) -> FeatureHeader:
    """Parse and validate just the 21-byte header."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"no such feature file: {path}")
    with open(path, "rb") as fh:
        blob = fh.read(_HEADER.size)
    if len(blob) < _HEADER.size:
        raise TruncatedFile(f"{path}: {len(blob)} bytes is too short for a header")
    magic, version, L, T, d, rate = _HEADER.unpack(blob)
    if magic != MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"{path}: unsupported format version {version}")
    if L == 0 or T == 0 or d == 0:
        raise DataError(f"{path}: degenerate shape ({L}, {T}, {d})")
    return FeatureHeader(n_layers=L, n_frames=T, dim=d, frame_rate=rate)


def read_features(path: Union[str, Path]) -> tuple[np.ndarray, FeatureHeader]:
    """Read a full MPKF file into a float64 (L, T, d) array."""
    header = read_header(path)
    L, T, d = header.n_layers, header.n_frames, header.dim
    expected = L * T * d
    with open(path, "rb") as fh:
        fh.seek(_HEADER.size)
        payload = np.fromfile(fh, dtype="<f4", count=expected)
    if payload.size != expected:
        raise TruncatedFile(
            f"{path}: payload holds {payload.size} floats, header promises {expected}"
        )
    arr = payload.astype(np.float64).reshape(L, T, d)
    if not np.isfinite(arr).all():
        raise NonFiniteValue(f"{path}: payload contains NaN or inf")
    return arr, header


# --- layer combination ---


def layer_weights(logits: np.ndarray) -> np.ndarray:
    """Softmax over the L layer logits (stable)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def combine_layers(
    features: np.ndarray,
    logits: np.ndarray,
    mode: str = "raw",
) -> np.ndarray:
    """Weighted layer combination: (L, T, d) -> (T, d).

    mode "raw" combines the layers as stored; "layer_norm" standardizes
    each layer's (T, d) block to zero mean / unit variance (per layer,
    over all frames and dims jointly) before combining.
    """
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 3:
        raise DimensionMismatch(f"features must be (L, T, d), got {arr.shape}")
    if arr.shape[0] != len(logits):
        raise DimensionMismatch(
            f"{arr.shape[0]} layers but {len(logits)} layer logits"
        )
    if mode not in ("raw", "layer_norm"):
        raise ValueError(f"unknown combination mode {mode!r}")
    if mode == "layer_norm":
        arr = _standardize_layers(arr)
    w = layer_weights(logits)
    return np.einsum("l,ltd->td", w, arr)


def _standardize_layers(arr: np.ndarray) -> np.ndarray:
    mean = arr.mean(axis=(1, 2), keepdims=True)
    std = arr.std(axis=(1, 2), keepdims=True)
    std = np.where(std < 1e-12, 1.0, std)
    return (arr - mean) / std


def combine_layers_backward(
    features: np.ndarray,
    logits: np.ndarray,
    grad_combined: np.ndarray,
    mode: str = "raw",
) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the layer logits.

    grad_combined is dLoss/dCombined of shape (T, d). Backprops through
    the softmax: with s_l = <grad, X_l> per layer, dLoss/dz = w * (s - <w, s>).
    """
    arr = np.asarray(features, dtype=np.float64)
    if mode == "layer_norm":
        arr = _standardize_layers(arr)
    w = layer_weights(logits)
    s = np.einsum("ltd,td->l", arr, np.asarray(grad_combined, dtype=np.float64))
    return w * (s - float(w @ s))


# --- dataset manifests ---


@dataclass
class ManifestEntry:
    utt_id: str
    speaker: str
    feature_file: Path
    l1: str = ""


@dataclass
class DatasetManifest:
    """A dataset split: utterances, speakers, and where their files live.

    JSON schema::

        {
          "name": "epadb-dev",
          "split": "dev",
          "frame_rate": 50.0,
          "n_layers": 13,
          "dim": 768,
          "spans": "spans.txt",              # optional corpus-level files
          "annotations": "annotations.tsv",  # optional
          "utterances": [
            {"utt_id": "...", "speaker": "...", "features": "rel/path.mpkf",
             "l1": "spanish"},
            ...
          ]
        }

    All paths are resolved relative to the manifest's directory. A
    manifest that names its span/annotation files is self-contained:
    consumers need no extra flags to locate the labels.
    """

    name: str
    frame_rate: float
    n_layers: int
    dim: int
    entries: list[ManifestEntry] = field(default_factory=list)
    split: str = ""
    spans_file: Path | None = None
    annotations_file: Path | None = None

    @property
    def speakers(self) -> list[str]:
        seen: dict[str, None] = {}
        for e in self.entries:
            seen.setdefault(e.speaker)
        return list(seen)

    @property
    def l1s(self) -> list[str]:
        seen: dict[str, None] = {}
        for e in self.entries:
            seen.setdefault(e.l1)
        return list(seen)

    def by_speaker(self) -> dict[str, list[ManifestEntry]]:
        out: dict[str, list[ManifestEntry]] = {}
        for e in self.entries:
            out.setdefault(e.speaker, []).append(e)
        return out


def load_manifest(
    source: Union[str, Path],
    *,
    check_files: bool = True,
) -> DatasetManifest:
    """Load and validate a dataset manifest.

    Validation: required keys, unique utterance ids, at least one
    utterance, and (when check_files) each feature file exists and its
    header agrees with the manifest's (n_layers, dim, frame_rate).
    """
    source = Path(source)
    if not source.exists():
        raise MissingFile(f"no such manifest: {source}")
    try:
        doc = json.loads(source.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{source}: not valid JSON ({exc})") from exc
    for key in ("name", "frame_rate", "n_layers", "dim", "utterances"):
        if key not in doc:
            raise DataError(f"{source}: manifest missing key {key!r}")
    if not doc["utterances"]:
        raise DataError(f"{source}: manifest lists no utterances")

    root = source.parent
    manifest = DatasetManifest(
        name=str(doc["name"]),
        frame_rate=float(doc["frame_rate"]),
        n_layers=int(doc["n_layers"]),
        dim=int(doc["dim"]),
        split=str(doc.get("split", "")),
        spans_file=root / str(doc["spans"]) if doc.get("spans") else None,
        annotations_file=(
            root / str(doc["annotations"]) if doc.get("annotations") else None
        ),
    )
    seen: set[str] = set()
    for i, rec in enumerate(doc["utterances"]):
        for key in ("utt_id", "speaker", "features"):
            if key not in rec:
                raise DataError(f"{source}: utterance #{i} missing key {key!r}")
        utt = str(rec["utt_id"])
        if utt in seen:
            raise DuplicateUttId(f"{source}: duplicate utt_id {utt!r}")
        seen.add(utt)
        manifest.entries.append(
            ManifestEntry(
                utt_id=utt,
                speaker=str(rec["speaker"]),
                feature_file=root / str(rec["features"]),
                l1=str(rec.get("l1", "")),
            )
        )

    if check_files:
        for e in manifest.entries:
            header = read_header(e.feature_file)
            if header.n_layers != manifest.n_layers or header.dim != manifest.dim:
                raise DimensionMismatch(
                    f"{e.feature_file}: header ({header.n_layers}, {header.dim}) "
                    f"!= manifest ({manifest.n_layers}, {manifest.dim})"
                )
            if abs(header.frame_rate - manifest.frame_rate) > 1e-6:
                raise DataError(
                    f"{e.feature_file}: frame rate {header.frame_rate} != "
                    f"manifest {manifest.frame_rate}"
                )
    return manifest


def save_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> None:
    """Serialize a manifest with canonical key order (atomic replace)."""
    path = Path(path)
    root = path.parent
    doc = {
        "name": manifest.name,
        "frame_rate": manifest.frame_rate,
        "n_layers": manifest.n_layers,
        "dim": manifest.dim,
        "utterances": [
            {
                "utt_id": e.utt_id,
                "speaker": e.speaker,
                "features": os.path.relpath(e.feature_file, root),
                "l1": e.l1,
            }
            for e in manifest.entries
        ],
    }
    if manifest.split:
        doc["split"] = manifest.split
    if manifest.spans_file is not None:
        doc["spans"] = os.path.relpath(manifest.spans_file, root)
    if manifest.annotations_file is not None:
        doc["annotations"] = os.path.relpath(manifest.annotations_file, root)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def validate_posterior_rows(rows: np.ndarray, atol: float = 1e-4) -> None:
    """Check that each row is a probability distribution."""
    rows = np.asarray(rows)
    if (rows < 0).any():
        raise RowNotNormalized("posterior rows contain negative entries")
    sums = rows.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=atol):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise RowNotNormalized(f"posterior rows sum to 1 +/- {worst:.3g}")
