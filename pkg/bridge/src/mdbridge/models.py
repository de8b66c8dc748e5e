"""Upstream encoder registry and the two extraction backends.

Every supported checkpoint shares the wav2vec-family convolutional
front end (seven conv layers, receptive field 400 samples, hop 320 at
16 kHz), which is what pins the nominal 50 Hz frame rate. The number of
frames for a waveform is computed from that conv schedule exactly, so
the mock backend and the real one agree sample-for-sample on T.

Backends:

* ``mock`` — deterministic spectral features seeded by the model tag.
  No heavy dependencies; used by CI and anywhere the real checkpoints
  are unavailable. Shapes, frame counts, and file contents are stable
  across processes and machines.
* ``torch`` — runs the actual pretrained encoder via ``transformers``
  with hidden states enabled: layer 0 is the conv-encoder output, the
  remaining rows are the transformer layers.
"""

import hashlib
from dataclasses import dataclass
from typing import Dict

import numpy as np

from .errors import AudioFormatError, ModelTagError

# (kernel, stride) per conv layer, shared by every registered encoder
_CONV_SCHEDULE = ((10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2))
_WINDOW = 400  # receptive field in samples
_HOP = 320  # 20 ms at 16 kHz


@dataclass(frozen=True)
class ModelTag:
    """One extractable upstream: declared output geometry plus its hub id."""

    name: str
    n_layers: int  # conv encoder output + all transformer layers
    dim: int
    hf_id: str
    frame_rate: float = 50.0


MODEL_TAGS: Dict[str, ModelTag] = {
    t.name: t
    for t in (
        ModelTag("wavlm-base-plus", 13, 768, "microsoft/wavlm-base-plus"),
        ModelTag("wavlm-large", 25, 1024, "microsoft/wavlm-large"),
        ModelTag("hubert-base", 13, 768, "facebook/hubert-base-ls960"),
        ModelTag("lighthubert-small", 13, 384, "mechanicalsea/lighthubert"),
    )
}


def get_tag(name: str) -> ModelTag:
    if name not in MODEL_TAGS:
        known = ", ".join(sorted(MODEL_TAGS))
        raise ModelTagError(f"unknown model tag {name!r} (know: {known})")
    return MODEL_TAGS[name]


def n_output_frames(n_samples: int) -> int:
    """Frame count the conv front end produces for a waveform length."""
    n = n_samples
    for kernel, stride in _CONV_SCHEDULE:
        n = (n - kernel) // stride + 1
        if n < 1:
            raise AudioFormatError(
                f"waveform of {n_samples} samples is shorter than the "
                f"{_WINDOW}-sample receptive field"
            )
    return n


def _tag_rng(tag: ModelTag) -> np.random.Generator:
    # stable across processes: no reliance on salted hash()
    digest = hashlib.sha256(f"mdbridge-mock:{tag.name}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def mock_features(wave: np.ndarray, tag: ModelTag) -> np.ndarray:
    """Deterministic stand-in features with the tag's declared geometry.

    Layer 0 is a seeded linear projection of log-magnitude spectra of
    400-sample windows at hop 320 (the real front end's framing); each
    further layer is a cheap fixed nonlinear mix of the previous one.
    Same audio + same tag always yields bit-identical output.
    """
    wave = np.asarray(wave, dtype=np.float64)
    T = n_output_frames(wave.size)
    windows = np.lib.stride_tricks.sliding_window_view(wave, _WINDOW)[::_HOP]
    windows = windows[:T]  # conv arithmetic never exceeds the window count
    spectra = np.log1p(np.abs(np.fft.rfft(windows * np.hanning(_WINDOW), axis=1)))
    spectra = spectra - spectra.mean()
    scale = spectra.std()
    if scale > 0:
        spectra = spectra / scale

    rng = _tag_rng(tag)
    proj = rng.standard_normal((spectra.shape[1], tag.dim)) / np.sqrt(spectra.shape[1])
    layers = np.empty((tag.n_layers, T, tag.dim))
    layers[0] = spectra @ proj
    for l in range(1, tag.n_layers):
        a, b, c = rng.uniform(0.5, 1.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.1, 0.1)
        layers[l] = np.tanh(a * layers[l - 1] + b * np.roll(layers[l - 1], 1, axis=1) + c)
    return layers


_TORCH_CACHE: dict = {}


def torch_features(wave: np.ndarray, tag: ModelTag) -> np.ndarray:
    """Hidden states of the real pretrained encoder, stacked to (L, T, d)."""
    try:
        import torch
        from transformers import AutoModel
    except ImportError as exc:  # pragma: no cover - depends on extras
        raise ModelTagError(
            "torch backend unavailable; install the [torch] extra or use --backend mock"
        ) from exc
    if tag.name not in _TORCH_CACHE:  # pragma: no cover
        _TORCH_CACHE[tag.name] = AutoModel.from_pretrained(tag.hf_id).eval()
    model = _TORCH_CACHE[tag.name]  # pragma: no cover
    with torch.no_grad():  # pragma: no cover
        out = model(
            torch.from_numpy(np.asarray(wave, dtype=np.float32))[None, :],
            output_hidden_states=True,
        )
    return np.stack(  # pragma: no cover
        [h.squeeze(0).cpu().numpy().astype(np.float64) for h in out.hidden_states]
    )


def extract_features(wave: np.ndarray, tag: ModelTag, backend: str = "auto") -> np.ndarray:
    """Run one waveform through the chosen backend and validate geometry."""
    if backend == "auto":
        try:
            import torch  # noqa: F401

            backend = "torch"
        except ImportError:
            backend = "mock"
    if backend == "mock":
        arr = mock_features(wave, tag)
    elif backend == "torch":
        arr = torch_features(wave, tag)
    else:
        raise ModelTagError(f"unknown backend {backend!r} (want mock, torch, or auto)")
    L, T, d = arr.shape
    if L != tag.n_layers or d != tag.dim:
        raise ModelTagError(
            f"{tag.name}: backend produced ({L}, {d}), tag declares "
            f"({tag.n_layers}, {tag.dim})"
        )
    return arr
