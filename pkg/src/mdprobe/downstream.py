"""Linear downstream probes over frozen frame features, and a GOP baseline.

A probe is W (n_phones, d), b (n_phones,), plus one trainable logit per
feature layer; layers are softmax-combined per frame before the affine
map. Two tasks share the architecture and differ only in the loss:

* recognition ("pr"): softmax cross-entropy against per-frame phone
  ordinals (every frame supervised, silence included);
* detection ("md"): binary cross-entropy, in logit form, of the target
  phone's own pre-activation at each selected frame against the
  correctly/incorrectly-pronounced label.

Either way the score of a phone instance is the mean *pre-activation*
of its node over its frames.

All gradients are computed manually in closed form (this file has no
autodiff dependency); finite-difference agreement is enforced in the
test suite.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from mdprobe.errors import (
    BadMagic,
    CoverageMismatch,
    DataError,
    DimensionMismatch,
    NoSelectedFrames,
    OutOfRange,
    SpanOutOfRange,
    TruncatedFile,
    UnsupportedVersion,
)
from mdprobe.annotate import (
    LABEL_IGNORED,
    UNSELECTED,
    TargetPhoneInstance,
)
from mdprobe.featureio import (
    combine_layers,
    combine_layers_backward,
    validate_posterior_rows,
)
from mdprobe.phoneset import PhoneInventory

GOP_FLOOR = 1e-10


# --- model ---


@dataclass
class LinearProbe:
    weights: np.ndarray        # (n_phones, d)
    bias: np.ndarray           # (n_phones,)
    layer_logits: np.ndarray   # (L,)
    combine_mode: str = "raw"

    @classmethod
    def zeros(cls, n_phones: int, dim: int, n_layers: int, combine_mode: str = "raw"):
        # Zero init: the first optimizer step is then a pure function of
        # the first gradient, which keeps runs easy to reason about.
        return cls(
            weights=np.zeros((n_phones, dim)),
            bias=np.zeros(n_phones),
            layer_logits=np.zeros(n_layers),
            combine_mode=combine_mode,
        )

    @property
    def n_phones(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_logits)

    def copy(self) -> "LinearProbe":
        return LinearProbe(
            self.weights.copy(),
            self.bias.copy(),
            self.layer_logits.copy(),
            self.combine_mode,
        )

    def forward(self, features: np.ndarray) -> np.ndarray:
        """(L, T, d) features -> (T, n_phones) pre-activations."""
        if features.shape[2] != self.dim:
            raise DimensionMismatch(
                f"features have dim {features.shape[2]}, probe wants {self.dim}"
            )
        combined = combine_layers(features, self.layer_logits, self.combine_mode)
        return combined @ self.weights.T + self.bias

    def phone_score(self, features: np.ndarray, instance: TargetPhoneInstance,
                    inventory: PhoneInventory) -> float:
        logits = self.forward(features)
        return score_from_logits(logits, instance, inventory)

    def score_utterance(
        self,
        features: np.ndarray,
        instances: Sequence[TargetPhoneInstance],
        inventory: PhoneInventory,
    ) -> list[float]:
        """Scores for every instance, computing the forward pass once."""
        logits = self.forward(features)
        return [score_from_logits(logits, inst, inventory) for inst in instances]


def score_from_logits(
    logits: np.ndarray,
    instance: TargetPhoneInstance,
    inventory: PhoneInventory,
) -> float:
    """Mean pre-activation of the instance's node over its span."""
    if instance.end_frame > logits.shape[0]:
        raise SpanOutOfRange(
            f"span [{instance.start_frame}, {instance.end_frame}) vs "
            f"{logits.shape[0]} frames"
        )
    node = inventory.index_of(instance.phone.symbol)
    return float(logits[instance.start_frame:instance.end_frame, node].mean())


# --- losses (value + closed-form gradient w.r.t. the (T, n) logit matrix) ---


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softplus(z: np.ndarray) -> np.ndarray:
    # log(1 + e^z), overflow-safe both directions
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


def pr_loss(logits: np.ndarray, ordinals: np.ndarray,
            frame_weights: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Weighted softmax cross-entropy over frames.

    Returns (loss, dLoss/dlogits). Default weights are uniform 1/T.
    """
    T, n = logits.shape
    ordinals = np.asarray(ordinals)
    if (ordinals < 0).any() or (ordinals >= n).any():
        raise OutOfRange("phone ordinal outside [0, n_phones)")
    if frame_weights is None:
        frame_weights = np.full(T, 1.0 / T)
    logp = _log_softmax(logits)
    rows = np.arange(T)
    loss = float(-(frame_weights * logp[rows, ordinals]).sum())
    grad = softmax(logits)
    grad[rows, ordinals] -= 1.0
    grad *= frame_weights[:, None]
    return loss, grad


def md_loss(logits: np.ndarray, ordinals: np.ndarray, labels: np.ndarray,
            frame_weights: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Weighted binary cross-entropy at each frame's own target node.

    Only frames with a valid ordinal and a non-ignored label participate.
    Uses the logit form softplus(z) - y*z, so no probability is ever
    materialized (numerically exact for any z).
    """
    T, n = logits.shape
    ordinals = np.asarray(ordinals)
    labels = np.asarray(labels)
    sel = (ordinals != UNSELECTED) & (labels != LABEL_IGNORED)
    idx = np.flatnonzero(sel)
    if idx.size == 0:
        raise NoSelectedFrames("no frames selected for detection loss")
    if frame_weights is None:
        frame_weights = np.zeros(T)
        frame_weights[idx] = 1.0 / idx.size
    z = logits[idx, ordinals[idx]]
    y = labels[idx].astype(np.float64)
    w = frame_weights[idx]
    loss = float((w * (_softplus(z) - y * z)).sum())
    grad = np.zeros_like(logits)
    sig = np.exp(-_softplus(-z))  # sigmoid via softplus: no overflow either way
    grad[idx, ordinals[idx]] = w * (sig - y)
    return loss, grad


# --- GOP baseline ---


def load_senone_map(
    source: Union[str, Path],
    inventory: PhoneInventory,
    *,
    allow_uncovered: bool = False,
) -> np.ndarray:
    """Read `senone_index phone` lines into a senone->ordinal array.

    Senone indices must form 0..S-1 with no gaps. Unless allow_uncovered,
    every non-silence phone needs at least one senone.
    """
    pairs: dict[int, int] = {}
    for lineno, raw in enumerate(Path(source).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"{source}:{lineno}: want `senone phone`, got {line!r}")
        sen = int(parts[0])
        if sen in pairs:
            raise DataError(f"{source}:{lineno}: duplicate senone {sen}")
        pairs[sen] = inventory.index_of(parts[1])
    if sorted(pairs) != list(range(len(pairs))):
        raise DataError(f"{source}: senone indices are not contiguous from 0")
    mapping = np.array([pairs[s] for s in range(len(pairs))], dtype=np.int32)
    if not allow_uncovered:
        covered = set(mapping.tolist())
        missing = [p.symbol for i, p in enumerate(inventory)
                   if i not in covered and not p.is_silence]
        if missing:
            raise CoverageMismatch(f"phones with no senone: {' '.join(missing)}")
    return mapping


def phone_posteriors(senone_post: np.ndarray, senone_map: np.ndarray,
                     n_phones: int) -> np.ndarray:
    """Collapse (T, S) senone posteriors to (T, n_phones) by summation."""
    senone_post = np.asarray(senone_post, dtype=np.float64)
    if senone_post.shape[1] != len(senone_map):
        raise DimensionMismatch(
            f"{senone_post.shape[1]} posterior columns vs {len(senone_map)} senones"
        )
    validate_posterior_rows(senone_post)
    out = np.zeros((senone_post.shape[0], n_phones))
    np.add.at(out.T, senone_map, senone_post.T)
    return out


def gop_score(
    post: np.ndarray,
    instance: TargetPhoneInstance,
    inventory: PhoneInventory,
    floor: float = GOP_FLOOR,
) -> float:
    """Mean log phone posterior over the span, floored at `floor`."""
    if instance.end_frame > post.shape[0]:
        raise SpanOutOfRange(
            f"span [{instance.start_frame}, {instance.end_frame}) vs "
            f"{post.shape[0]} posterior frames"
        )
    node = inventory.index_of(instance.phone.symbol)
    p = post[instance.start_frame:instance.end_frame, node]
    return float(np.log(np.maximum(p, floor)).mean())


# --- optimizers ---


@dataclass
class AdamW:
    """Adam with decoupled weight decay (decay applied outside the moments)."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self._t += 1
        bc1 = 1.0 - self.beta1 ** self._t
        bc2 = 1.0 - self.beta2 ** self._t
        for key, p in params.items():
            g = grads[key]
            m = self._m.setdefault(key, np.zeros_like(p))
            v = self._v.setdefault(key, np.zeros_like(p))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p
            p -= lr * update


@dataclass
class Adam(AdamW):
    """Plain Adam: AdamW with the decay term removed."""

    weight_decay: float = 0.0


def step_decay_lr(base_lr: float, epoch: int, factor: float = 1.0,
                  every: int = 1) -> float:
    """base_lr * factor^(epoch // every); factor 1 disables the schedule."""
    if every <= 0:
        raise ValueError("schedule interval must be positive")
    return base_lr * factor ** (epoch // every)


# --- training ---


@dataclass(frozen=True)
class TrainConfig:
    task: str = "md"                 # "md" or "pr"
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 20
    weight_decay: float = 0.01
    optimizer: str = "adamw"         # "adamw" or "adam"
    lr_factor: float = 1.0           # step-decay multiplier
    lr_every: int = 10               # epochs between decay steps
    seed: int = 0
    combine_mode: str = "raw"
    batch_mode: str = "utterances"   # batch_size counts utterances or frames

    def __post_init__(self):
        if self.task not in ("md", "pr"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.optimizer not in ("adamw", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_mode not in ("utterances", "frames"):
            raise ValueError(f"unknown batch mode {self.batch_mode!r}")
        if self.lr < 0:  # lr == 0 is legal (and a useful no-op probe)
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class UtteranceData:
    """One utterance ready for training: features plus frame targets."""

    utt_id: str
    speaker: str
    features: np.ndarray    # (L, T, d) float64
    ordinal: np.ndarray     # (T,) int32; UNSELECTED allowed for "md"
    label: np.ndarray = field(default=None)  # (T,) int8; unused for "pr"

    def __post_init__(self):
        if self.label is None:
            self.label = np.full(self.features.shape[1], LABEL_IGNORED, dtype=np.int8)
        if not (self.features.shape[1] == len(self.ordinal) == len(self.label)):
            raise DimensionMismatch(
                f"{self.utt_id}: features/ordinal/label frame counts disagree"
            )


def _selected_counts(utts: Sequence[UtteranceData], task: str) -> list[int]:
    if task == "pr":
        return [len(u.ordinal) for u in utts]
    return [int(((u.ordinal != UNSELECTED) & (u.label != LABEL_IGNORED)).sum())
            for u in utts]


def _batch_value_and_grads(
    model: LinearProbe,
    utts: Sequence[UtteranceData],
    task: str,
    want_grads: bool = True,
):
    """Loss over a batch: mean over utterances of their per-frame mean loss.

    Utterances are concatenated along the frame axis so every numpy op in
    the step is a single call; per-frame weights encode the two-level mean.
    """
    counts = _selected_counts(utts, task)
    live = [(u, c) for u, c in zip(utts, counts) if c > 0]
    if not live:
        raise NoSelectedFrames("batch contains no supervised frames")
    feats = np.concatenate([u.features for u, _ in live], axis=1)
    ordinals = np.concatenate([u.ordinal for u, _ in live])
    labels = np.concatenate([u.label for u, _ in live])
    weights = np.concatenate(
        [np.full(u.features.shape[1], 1.0 / (len(live) * c)) for u, c in live]
    )
    combined = combine_layers(feats, model.layer_logits, "raw")
    logits = combined @ model.weights.T + model.bias
    if task == "pr":
        loss, dlogits = pr_loss(logits, ordinals, weights)
    else:
        loss, dlogits = md_loss(logits, ordinals, labels, weights)
    if not want_grads:
        return loss, None
    grads = {
        "weights": dlogits.T @ combined,
        "bias": dlogits.sum(axis=0),
        "layer_logits": combine_layers_backward(
            feats, model.layer_logits, dlogits @ model.weights, "raw"
        ),
    }
    return loss, grads


def dataset_loss(model: LinearProbe, utts: Sequence[UtteranceData],
                 task: str) -> float:
    loss, _ = _batch_value_and_grads(model, utts, task, want_grads=False)
    return loss


def prepare_utterance(
    utt_id: str,
    speaker: str,
    features: np.ndarray,
    ordinal: np.ndarray,
    label: np.ndarray | None,
    combine_mode: str,
) -> UtteranceData:
    """Apply any per-utterance feature transform once, up front.

    The "layer_norm" combination standardizes each layer over the
    utterance; that transform has no trainable parameters, so it is
    baked in here and the training loop always runs in "raw" mode.
    """
    feats = np.asarray(features, dtype=np.float64)
    if combine_mode == "layer_norm":
        mean = feats.mean(axis=(1, 2), keepdims=True)
        std = feats.std(axis=(1, 2), keepdims=True)
        feats = (feats - mean) / np.where(std < 1e-12, 1.0, std)
    elif combine_mode != "raw":
        raise ValueError(f"unknown combination mode {combine_mode!r}")
    return UtteranceData(utt_id, speaker, feats, np.asarray(ordinal, dtype=np.int32),
                         None if label is None else np.asarray(label, dtype=np.int8))


def _epoch_batches(
    data: Sequence[UtteranceData], order: np.ndarray, config: TrainConfig
) -> list[list[UtteranceData]]:
    """Partition one epoch's shuffled utterances into batches.

    "utterances" mode takes batch_size utterances at a time. "frames"
    mode packs whole utterances greedily until batch_size supervised
    frames are reached (an utterance is never split across batches, so
    a batch can overshoot by up to one utterance).
    """
    if config.batch_mode == "utterances":
        return [
            [data[i] for i in order[lo:lo + config.batch_size]]
            for lo in range(0, len(order), config.batch_size)
        ]
    batches: list[list[UtteranceData]] = []
    current: list[UtteranceData] = []
    filled = 0
    for i in order:
        u = data[int(i)]
        current.append(u)
        filled += _selected_counts([u], config.task)[0]
        if filled >= config.batch_size:
            batches.append(current)
            current, filled = [], 0
    if current:
        batches.append(current)
    return batches


def train(
    data: Sequence[UtteranceData],
    config: TrainConfig,
    n_phones: int,
    epoch_hook: Callable[[int, LinearProbe], None] | None = None,
) -> tuple[LinearProbe, list[float]]:
    """Mini-batch training of a probe from zero init.

    Order is reshuffled every epoch from a seed derived as
    (config.seed, epoch), so identical configs are bitwise
    reproducible. epoch_hook, when given, sees the model after each
    epoch (1-based epoch numbers).

    Returns the trained probe and a per-epoch loss trace (mean of the
    batch losses seen during that epoch, i.e. losses *before* each
    update, so the trace reflects the model the optimizer actually saw).
    """
    if not data:
        raise DataError("empty training set")
    dim = data[0].features.shape[2]
    n_layers = data[0].features.shape[0]
    for u in data:
        if u.features.shape[0] != n_layers or u.features.shape[2] != dim:
            raise DimensionMismatch(f"{u.utt_id}: feature shape differs from the rest")
    model = LinearProbe.zeros(n_phones, dim, n_layers, config.combine_mode)
    opt_cls = AdamW if config.optimizer == "adamw" else Adam
    opt = opt_cls(lr=config.lr, weight_decay=config.weight_decay)
    params = {"weights": model.weights, "bias": model.bias,
              "layer_logits": model.layer_logits}
    trace: list[float] = []
    for epoch in range(config.epochs):
        lr = step_decay_lr(config.lr, epoch, config.lr_factor, config.lr_every)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(data))
        losses: list[float] = []
        for batch in _epoch_batches(data, order, config):
            try:
                loss, grads = _batch_value_and_grads(model, batch, config.task)
            except NoSelectedFrames:
                continue  # all-ignored batch: nothing to learn from
            losses.append(loss)
            opt.step(params, grads, lr=lr)
        trace.append(float(np.mean(losses)) if losses else float("nan"))
        if epoch_hook is not None:
            epoch_hook(epoch + 1, model)
    return model, trace


# --- checkpoints ---

CKPT_MAGIC = b"MPKC"
CKPT_VERSION = 1


def save_checkpoint(path: Union[str, Path], model: LinearProbe,
                    inventory: PhoneInventory | None = None,
                    train_config: TrainConfig | None = None,
                    extra: dict | None = None) -> None:
    """MPKC: magic, version byte, u32 JSON header length, JSON header,
    then weights/bias/layer_logits as little-endian f64 (atomic replace).

    The header records the node order (inventory symbols) and the full
    training configuration, so a checkpoint is scoreable on its own —
    no risk of pairing it with a reordered phone list later.
    """
    header = {
        "n_phones": model.n_phones,
        "dim": model.dim,
        "n_layers": model.n_layers,
        "combine_mode": model.combine_mode,
        "inventory": None if inventory is None else [p.symbol for p in inventory],
        "train_config": None if train_config is None else dict(
            sorted(train_config.__dict__.items())
        ),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(bytes([CKPT_VERSION]))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in (model.weights, model.bias, model.layer_logits):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: Union[str, Path]) -> tuple[LinearProbe, dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise BadMagic(f"{path}: bad checkpoint magic {magic!r}")
        version = fh.read(1)
        if not version or version[0] != CKPT_VERSION:
            raise UnsupportedVersion(f"{path}: checkpoint version {version!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        n, d, L = header["n_phones"], header["dim"], header["n_layers"]
        need = (n * d + n + L) * 8
        payload = fh.read(need)
        if len(payload) != need:
            raise TruncatedFile(f"{path}: checkpoint payload truncated")
    flat = np.frombuffer(payload, dtype="<f8")
    model = LinearProbe(
        weights=flat[: n * d].reshape(n, d).copy(),
        bias=flat[n * d: n * d + n].copy(),
        layer_logits=flat[n * d + n:].copy(),
        combine_mode=header["combine_mode"],
    )
    return model, header
