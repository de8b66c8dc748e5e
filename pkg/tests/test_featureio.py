import struct

import numpy as np
import pytest

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
from mdprobe.featureio import (
    FORMAT_VERSION,
    MAGIC,
    DatasetManifest,
    ManifestEntry,
    combine_layers,
    combine_layers_backward,
    layer_weights,
    load_manifest,
    read_features,
    read_header,
    save_manifest,
    validate_posterior_rows,
    write_features,
)
from mdprobe.synth import oracle_gradient, relative_error


# --- binary feature files ---


def test_round_trip_bit_exact(tmp_path, rng):
    # float32 payload must survive write -> read with no value drift
    for i in range(300):
        L = int(rng.integers(1, 4))
        T = int(rng.integers(1, 6))
        d = int(rng.integers(1, 5))
        arr = rng.standard_normal((L, T, d)).astype(np.float32)
        path = tmp_path / f"f{i}.mpkf"
        write_features(path, arr, frame_rate=50.0)
        got, header = read_features(path)
        assert got.dtype == np.float64
        assert (got == arr.astype(np.float64)).all()
        assert (header.n_layers, header.n_frames, header.dim) == (L, T, d)
        assert header.frame_rate == 50.0


def test_header_byte_layout(tmp_path):
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    path = tmp_path / "x.mpkf"
    write_features(path, arr, frame_rate=25.0)
    blob = path.read_bytes()
    assert blob[:4] == b"MPKF"
    assert blob[4] == FORMAT_VERSION == 1
    L, T, d = struct.unpack("<III", blob[5:17])
    assert (L, T, d) == (2, 3, 4)
    (rate,) = struct.unpack("<f", blob[17:21])
    assert rate == 25.0
    # payload is little-endian float32, C order
    assert blob[21:] == arr.astype("<f4").tobytes()


def test_write_rejects_bad_shape(tmp_path):
    with pytest.raises(DimensionMismatch):
        write_features(tmp_path / "x.mpkf", np.zeros((3, 4)))


def test_write_rejects_nonfinite(tmp_path):
    arr = np.zeros((1, 2, 2))
    arr[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteValue):
        write_features(tmp_path / "x.mpkf", arr)
    assert not (tmp_path / "x.mpkf").exists()


def test_read_missing_file(tmp_path):
    with pytest.raises(MissingFile):
        read_header(tmp_path / "nope.mpkf")


def test_read_bad_magic(tmp_path):
    path = tmp_path / "x.mpkf"
    write_features(path, np.zeros((1, 1, 1), dtype=np.float32))
    blob = bytearray(path.read_bytes())
    blob[:4] = b"WAVE"
    path.write_bytes(bytes(blob))
    with pytest.raises(BadMagic):
        read_header(path)


def test_read_unsupported_version(tmp_path):
    path = tmp_path / "x.mpkf"
    write_features(path, np.zeros((1, 1, 1), dtype=np.float32))
    blob = bytearray(path.read_bytes())
    blob[4] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(UnsupportedVersion):
        read_header(path)


def test_read_truncated_header(tmp_path):
    path = tmp_path / "x.mpkf"
    path.write_bytes(MAGIC + b"\x01\x00")
    with pytest.raises(TruncatedFile):
        read_header(path)


def test_read_truncated_payload(tmp_path):
    path = tmp_path / "x.mpkf"
    write_features(path, np.ones((2, 3, 4), dtype=np.float32))
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(TruncatedFile):
        read_features(path)


def test_read_degenerate_shape(tmp_path):
    path = tmp_path / "x.mpkf"
    path.write_bytes(struct.pack("<4sBIIIf", MAGIC, FORMAT_VERSION, 0, 3, 4, 50.0))
    with pytest.raises(DataError):
        read_header(path)


def test_read_nonfinite_payload(tmp_path):
    path = tmp_path / "x.mpkf"
    payload = np.array([1.0, np.inf], dtype="<f4")
    path.write_bytes(
        struct.pack("<4sBIIIf", MAGIC, FORMAT_VERSION, 1, 2, 1, 50.0)
        + payload.tobytes()
    )
    with pytest.raises(NonFiniteValue):
        read_features(path)


# --- layer combination ---


def test_layer_weights_softmax(rng):
    z = rng.standard_normal(7)
    w = layer_weights(z)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert (w > 0).all()
    # uniform logits -> uniform weights
    assert layer_weights(np.zeros(5)) == pytest.approx(np.full(5, 0.2), abs=1e-15)
    # shift invariance
    assert layer_weights(z + 100.0) == pytest.approx(w, abs=1e-12)


def test_combine_layers_saturated_logit_picks_one_layer(rng):
    feats = rng.standard_normal((3, 4, 5))
    out = combine_layers(feats, np.array([1e6, 0.0, 0.0]))
    assert np.abs(out - feats[0]).max() < 1e-6


def test_combine_layers_uniform_is_mean(rng):
    feats = rng.standard_normal((4, 3, 2))
    out = combine_layers(feats, np.zeros(4))
    assert out == pytest.approx(feats.mean(axis=0), abs=1e-12)


def test_combine_layers_checks_shapes(rng):
    with pytest.raises(DimensionMismatch):
        combine_layers(rng.standard_normal((3, 4)), np.zeros(3))
    with pytest.raises(DimensionMismatch):
        combine_layers(rng.standard_normal((3, 4, 5)), np.zeros(2))
    with pytest.raises(ValueError):
        combine_layers(rng.standard_normal((2, 3, 4)), np.zeros(2), mode="whiten")


def test_layer_norm_mode_standardizes(rng):
    feats = 3.0 * rng.standard_normal((2, 10, 8)) + 5.0
    # combining a single standardized layer reproduces that layer's z-score
    out = combine_layers(feats, np.array([1e6, 0.0]), mode="layer_norm")
    want = (feats[0] - feats[0].mean()) / feats[0].std()
    assert np.abs(out - want).max() < 1e-6


@pytest.mark.parametrize("mode", ["raw", "layer_norm"])
def test_combine_backward_matches_finite_differences(rng, mode):
    feats = rng.standard_normal((3, 4, 5))
    logits = rng.standard_normal(3)
    grad_out = rng.standard_normal((4, 5))

    def loss(z):
        return float((combine_layers(feats, z, mode=mode) * grad_out).sum())

    analytic = combine_layers_backward(feats, logits, grad_out, mode=mode)
    numeric = oracle_gradient(loss, logits.copy())
    assert relative_error(analytic, numeric) < 1e-7


# --- manifests ---


def _toy_corpus(tmp_path, rng, n_utts=3):
    feats_dir = tmp_path / "features"
    feats_dir.mkdir()
    manifest = DatasetManifest(name="toy", frame_rate=50.0, n_layers=2, dim=4,
                               split="dev")
    for i in range(n_utts):
        path = feats_dir / f"u{i}.mpkf"
        write_features(path, rng.standard_normal((2, 5, 4)).astype(np.float32))
        manifest.entries.append(
            ManifestEntry(utt_id=f"u{i}", speaker=f"spk{i % 2}",
                          feature_file=path, l1="spanish"))
    return manifest


def test_manifest_round_trip(tmp_path, rng):
    manifest = _toy_corpus(tmp_path, rng)
    (tmp_path / "spans.txt").write_text("u0 SIL 0 5\n")
    (tmp_path / "ann.tsv").write_text("u0\tK\tK\n")
    manifest.spans_file = tmp_path / "spans.txt"
    manifest.annotations_file = tmp_path / "ann.tsv"
    save_manifest(manifest, tmp_path / "manifest.json")
    loaded = load_manifest(tmp_path / "manifest.json")
    assert loaded.name == "toy"
    assert loaded.split == "dev"
    assert loaded.spans_file == tmp_path / "spans.txt"
    assert loaded.annotations_file == tmp_path / "ann.tsv"
    assert [e.utt_id for e in loaded.entries] == ["u0", "u1", "u2"]
    assert loaded.speakers == ["spk0", "spk1"]
    assert loaded.l1s == ["spanish"]
    assert loaded.entries[1].feature_file == tmp_path / "features" / "u1.mpkf"


def test_manifest_optional_files_stay_optional(tmp_path, rng):
    manifest = _toy_corpus(tmp_path, rng)
    save_manifest(manifest, tmp_path / "manifest.json")
    loaded = load_manifest(tmp_path / "manifest.json")
    assert loaded.spans_file is None
    assert loaded.annotations_file is None


def test_manifest_duplicate_utt_id(tmp_path, rng):
    manifest = _toy_corpus(tmp_path, rng)
    manifest.entries.append(manifest.entries[0])
    save_manifest(manifest, tmp_path / "manifest.json")
    with pytest.raises(DuplicateUttId):
        load_manifest(tmp_path / "manifest.json")


def test_manifest_header_mismatch(tmp_path, rng):
    manifest = _toy_corpus(tmp_path, rng)
    manifest.dim = 8  # disagrees with the files on disk
    save_manifest(manifest, tmp_path / "manifest.json")
    with pytest.raises(DimensionMismatch):
        load_manifest(tmp_path / "manifest.json")
    # but header checks can be skipped
    loaded = load_manifest(tmp_path / "manifest.json", check_files=False)
    assert loaded.dim == 8


def test_manifest_missing_key(tmp_path):
    (tmp_path / "manifest.json").write_text('{"name": "x"}')
    with pytest.raises(DataError):
        load_manifest(tmp_path / "manifest.json")


# --- posterior validation ---


def test_posterior_rows_accept_small_drift():
    rows = np.array([[0.5, 0.5 + 5e-5], [1.0, 0.0]])
    validate_posterior_rows(rows)  # within the 1e-4 budget


def test_posterior_rows_reject_bad_sum():
    with pytest.raises(RowNotNormalized):
        validate_posterior_rows(np.array([[0.5, 0.51]]))


def test_posterior_rows_reject_negative():
    with pytest.raises(RowNotNormalized):
        validate_posterior_rows(np.array([[1.2, -0.2]]))
