"""Synthetic corpora with known ground truth, and independent oracles.

Corpora are Gaussian frame-feature clouds with a binary correctness
signal planted in a known direction, so ideal detection performance has
a closed form (bayes_cost). Two signal placements:

* "target-dim": each phone's own identity dimension carries +a when the
  instance is correct and -a when mispronounced. Any scorer that reads
  the target's dimension can find it.
* "shared-dim": phone identity dimensions are intact regardless of
  correctness; a single designated dimension carries the +-a correctness
  signal in non-native data and is exactly zero in native data. A
  recognizer trained only on native speech receives exactly zero
  gradient on that dimension (zero-init weights never move), so only
  label-supervised training can exploit the error structure.

The oracle_* functions are deliberately naive re-implementations
(quadratic pairwise counts, brute-force sweeps, finite differences,
top-down recursion) that share no code with the production paths; the
test suite holds the two against each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from mdprobe.annotate import DEFAULT_GAP_PENALTY, PhoneSimilarity
from mdprobe.errors import ConfigError
from mdprobe.featureio import DatasetManifest, ManifestEntry, save_manifest, write_features
from mdprobe.phoneset import Phone, PhoneInventory

# --- closed-form ideal performance ---


def normal_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def bayes_threshold(separation: float, sigma: float,
                    fn_weight: float = 2.0) -> float:
    """Cost-optimal threshold for N(+a, s^2) positives vs N(-a, s^2)
    negatives under cost = FPR + fn_weight * FNR: -s^2 ln(w) / (2a)."""
    if separation <= 0 or sigma <= 0:
        raise ConfigError("separation and sigma must be positive")
    return -(sigma ** 2) * math.log(fn_weight) / (2.0 * separation)


def bayes_cost(separation: float, sigma: float, fn_weight: float = 2.0,
               n_frames: int = 1) -> float:
    """Lowest achievable cost for the two-Gaussian detection problem.

    Scores are per-instance means of n_frames iid frames, so the
    effective sigma is sigma / sqrt(n_frames).
    """
    s = sigma / math.sqrt(n_frames)
    a = separation
    thr = bayes_threshold(a, s, fn_weight)
    fpr = 1.0 - normal_cdf((thr + a) / s)
    fnr = normal_cdf((thr - a) / s)
    return fpr + fn_weight * fnr


# --- corpus generation ---

SIGNAL_MODES = ("target-dim", "shared-dim")


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one synthetic split; vary `seed` across splits."""

    phones: tuple[str, ...]          # scorable phone symbols to sample
    n_speakers: int = 10
    utts_per_speaker: int = 10
    phones_per_utt: int = 10
    frames_per_phone: int = 4        # span length, lower end
    frames_jitter: int = 0           # span length drawn from [fpp, fpp+jitter]
    dim: int = 48
    n_layers: int = 2
    error_rate: float = 0.35         # P(instance mispronounced)
    separation: float = 2.0          # half-distance between class means
    noise: float = 1.0               # per-frame feature sigma
    identity_amp: float = 2.0        # identity one-hot magnitude (shared-dim)
    speaker_sigma: float = 0.1       # per-speaker bias scale
    signal: str = "target-dim"
    silence_frames: int = 0          # silence gap before each phone
    frame_rate: float = 50.0
    n_l1s: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.signal not in SIGNAL_MODES:
            raise ConfigError(f"signal must be one of {SIGNAL_MODES}")
        if not self.phones:
            raise ConfigError("need at least one phone symbol")
        if not 0.0 <= self.error_rate < 1.0:
            raise ConfigError("error_rate must be in [0, 1)")
        if self.frames_per_phone < 1 or self.frames_jitter < 0:
            raise ConfigError("need frames_per_phone >= 1 and jitter >= 0")


@dataclass(frozen=True)
class CorpusPaths:
    root: Path
    manifest: Path
    spans: Path
    annotations: Path
    truth: Path


def gen_corpus(
    spec: SynthSpec,
    out_dir,
    inventory: PhoneInventory,
    *,
    native: bool = False,
    name: str = "synth",
) -> CorpusPaths:
    """Materialize one split on disk in the package's own file formats.

    `native` forces every instance correct and (in shared-dim mode)
    zeroes the correctness dimension entirely, modeling speech with no
    pronunciation-error structure to learn from.
    """
    out_dir = Path(out_dir)
    ordinals = [inventory.index_of(p) for p in spec.phones]
    shared_idx = len(inventory)
    need = shared_idx + (2 if spec.signal == "shared-dim" else 1)
    if spec.dim < need:
        raise ConfigError(f"dim must be >= {need} for signal {spec.signal!r}")

    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([spec.seed, 0xC0])
    manifest = DatasetManifest(name=name, frame_rate=spec.frame_rate,
                               n_layers=spec.n_layers, dim=spec.dim,
                               split=name,
                               spans_file=out_dir / "spans.txt",
                               annotations_file=out_dir / "annotations.tsv")
    span_lines: list[str] = []
    ann_lines: list[str] = []
    truth_lines: list[str] = []

    others_for = {
        p: [q for q in spec.phones if q != p] or [p] for p in spec.phones
    }
    sil = inventory.phones[inventory.silence_index].symbol
    for s in range(spec.n_speakers):
        speaker = f"spk{s:03d}"
        l1 = f"l1-{s % spec.n_l1s}"
        offset = spec.speaker_sigma * spec.noise * rng.standard_normal(spec.dim)
        for u in range(spec.utts_per_speaker):
            utt = f"{speaker}-u{u:03d}"
            picks = rng.integers(0, len(spec.phones), size=spec.phones_per_utt)
            correct = (
                np.ones(spec.phones_per_utt, dtype=bool)
                if native
                else rng.random(spec.phones_per_utt) >= spec.error_rate
            )
            lengths = spec.frames_per_phone + (
                rng.integers(0, spec.frames_jitter + 1, size=spec.phones_per_utt)
                if spec.frames_jitter
                else np.zeros(spec.phones_per_utt, dtype=np.int64)
            )
            T = int(lengths.sum()) + (spec.phones_per_utt + 1) * spec.silence_frames
            X = spec.noise * rng.standard_normal((spec.n_layers, T, spec.dim))
            X[0] += offset

            target_seq: list[str] = []
            annot_seq: list[str] = []
            cursor = 0
            for k in range(spec.phones_per_utt):
                if spec.silence_frames:
                    span_lines.append(
                        f"{utt} {sil} {cursor} {cursor + spec.silence_frames}"
                    )
                    cursor += spec.silence_frames
                sym = spec.phones[picks[k]]
                t0, t1 = cursor, cursor + int(lengths[k])
                cursor = t1
                sign = 1.0 if correct[k] else -1.0
                if spec.signal == "target-dim":
                    X[0, t0:t1, ordinals[picks[k]]] += sign * spec.separation
                else:
                    X[0, t0:t1, ordinals[picks[k]]] += spec.identity_amp
                    if native:
                        # exactly zero: no gradient can reach this dim
                        X[0, t0:t1, shared_idx] = 0.0
                    else:
                        X[0, t0:t1, shared_idx] += sign * spec.separation
                span_lines.append(f"{utt} {sym} {t0} {t1}")
                target_seq.append(sym)
                if correct[k]:
                    annot_seq.append(sym)
                else:
                    annot_seq.append(
                        others_for[sym][rng.integers(0, len(others_for[sym]))]
                    )
                truth_lines.append(f"{utt}\t{k}\t{sym}\t{int(correct[k])}")
            if spec.silence_frames:
                span_lines.append(f"{utt} {sil} {cursor} {cursor + spec.silence_frames}")
            ann_lines.append(f"{utt}\t{' '.join(target_seq)}\t{' '.join(annot_seq)}")

            rel = Path("features") / f"{utt}.mpkf"
            write_features(out_dir / rel, X, spec.frame_rate)
            manifest.entries.append(
                ManifestEntry(utt_id=utt, speaker=speaker,
                              feature_file=out_dir / rel, l1=l1)
            )

    paths = CorpusPaths(
        root=out_dir,
        manifest=out_dir / "manifest.json",
        spans=out_dir / "spans.txt",
        annotations=out_dir / "annotations.tsv",
        truth=out_dir / "truth.tsv",
    )
    save_manifest(manifest, paths.manifest)
    paths.spans.write_text("\n".join(span_lines) + "\n", encoding="utf-8")
    paths.annotations.write_text("\n".join(ann_lines) + "\n", encoding="utf-8")
    paths.truth.write_text("\n".join(truth_lines) + "\n", encoding="utf-8")
    return paths


# --- oracles (independent, deliberately naive) ---


def oracle_one_minus_auc(pos, neg) -> float:
    """P(neg > pos) + 0.5 P(tie) by counting all n_pos * n_neg pairs."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    gt = (neg[:, None] > pos[None, :]).sum()
    eq = (neg[:, None] == pos[None, :]).sum()
    return float((gt + 0.5 * eq) / (len(pos) * len(neg)))


def oracle_min_cost(pos, neg, fn_weight: float = 2.0) -> tuple[float, float]:
    """Brute-force sweep over every distinct score, just above every
    distinct score, and the two extremes; accepts iff score >= thr."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    cands = [-np.inf, np.inf]
    for s in np.unique(np.concatenate([pos, neg])):
        cands.append(s)
        cands.append(np.nextafter(s, np.inf))
    best_cost, best_thr = np.inf, None
    for thr in sorted(cands):
        fnr = float((pos < thr).mean())
        fpr = float((neg >= thr).mean())
        c = fpr + fn_weight * fnr
        if c < best_cost:
            best_cost, best_thr = c, thr
    return float(best_cost), float(best_thr)


def oracle_gradient(
    fn: Callable[[np.ndarray], float],
    x: np.ndarray,
    eps: float = 1e-6,
) -> np.ndarray:
    """Central finite differences, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    xf = x.ravel()
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + eps
        hi = fn(x)
        xf[i] = orig - eps
        lo = fn(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(approx: np.ndarray, exact: np.ndarray) -> float:
    num = np.linalg.norm(np.asarray(approx) - np.asarray(exact))
    den = max(np.linalg.norm(approx), np.linalg.norm(exact), 1e-12)
    return float(num / den)


def oracle_alignment_score(
    target: Sequence[Phone],
    annotation: Sequence[Phone],
    similarity: PhoneSimilarity,
    gap_penalty: float = DEFAULT_GAP_PENALTY,
) -> float:
    """Optimal global alignment score by memoized top-down recursion."""

    @lru_cache(maxsize=None)
    def best(i: int, j: int) -> float:
        if i == 0 and j == 0:
            return 0.0
        options = []
        if i > 0 and j > 0:
            options.append(best(i - 1, j - 1)
                           + similarity(target[i - 1], annotation[j - 1]))
        if i > 0:
            options.append(best(i - 1, j) - gap_penalty)
        if j > 0:
            options.append(best(i, j - 1) - gap_penalty)
        return max(options)

    return best(len(target), len(annotation))


def enumerate_alignment_scores(
    target: Sequence[Phone],
    annotation: Sequence[Phone],
    similarity: PhoneSimilarity,
    gap_penalty: float = DEFAULT_GAP_PENALTY,
) -> list[float]:
    """Scores of *every* global alignment. Exponential: keep inputs tiny."""
    out: list[float] = []

    def walk(i: int, j: int, acc: float) -> None:
        if i == len(target) and j == len(annotation):
            out.append(acc)
            return
        if i < len(target) and j < len(annotation):
            walk(i + 1, j + 1, acc + similarity(target[i], annotation[j]))
        if i < len(target):
            walk(i + 1, j, acc - gap_penalty)
        if j < len(annotation):
            walk(i, j + 1, acc - gap_penalty)

    walk(0, 0, 0.0)
    return out
