import wave
from pathlib import Path

import numpy as np
import pytest


def write_wav(path: Path, waveform: np.ndarray, rate: int = 16_000) -> None:
    """Write a float waveform in [-1, 1) as 16-bit mono PCM."""
    pcm = np.clip(np.asarray(waveform) * 32768.0, -32768, 32767).astype("<i2")
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(rate)
        fh.writeframes(pcm.tobytes())


def tone(seconds: float, hz: float = 220.0, rate: int = 16_000) -> np.ndarray:
    t = np.arange(int(round(seconds * rate))) / rate
    return 0.4 * np.sin(2 * np.pi * hz * t)


@pytest.fixture
def rng():
    return np.random.default_rng(20250814)


def make_corpus(root: Path, *, with_annot: bool = True, break_utt: str = "") -> Path:
    """Lay out a tiny 2-speaker corpus: 1.00 s utterances, 4-phone CTMs.

    `break_utt` truncates that utterance's CTM to provoke a skip.
    """
    utts = [
        ("spk0_u0", "spk0", "spanish", 200.0),
        ("spk0_u1", "spk0", "spanish", 300.0),
        ("spk1_u0", "spk1", "mandarin", 250.0),
        ("spk1_u1", "spk1", "mandarin", 350.0),
    ]
    meta_lines = ["# utt\tspeaker\tl1"]
    for utt, speaker, l1, hz in utts:
        meta_lines.append(f"{utt}\t{speaker}\t{l1}")
        write_wav(root / "wav" / f"{utt}.wav", tone(1.0, hz))
        ctm = root / "ctm" / f"{utt}.ctm"
        ctm.parent.mkdir(parents=True, exist_ok=True)
        if utt == break_utt:
            ctm.write_text(f"{utt} 1 0.00 0.98 zzz\n")
        else:
            ctm.write_text(
                f"{utt} 1 0.00 0.10 sil\n"
                f"{utt} 1 0.10 0.22 k\n"
                f"{utt} 1 0.32 0.30 ae1\n"
                f"{utt} 1 0.62 0.24 t\n"
                f"{utt} 1 0.86 0.12 sil\n"
            )
        if with_annot:
            annot = root / "annot" / f"{utt}.txt"
            annot.parent.mkdir(parents=True, exist_ok=True)
            # one speaker says it right, the other fronts the vowel
            annot.write_text("k ae t\n" if speaker == "spk0" else "k eh t\n")
    (root / "meta.tsv").write_text("\n".join(meta_lines) + "\n")
    return root
