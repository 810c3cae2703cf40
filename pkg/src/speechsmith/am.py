"""Reference acoustic model: a context-window frame classifier with one
tanh hidden layer, trained by minibatch SGD on frame cross-entropy or CTC.

The hidden layer doubles as the embedding extractor for pseudo-label
clustering; the output head is swappable so a pretrained hidden layer can
be reused under a fresh head.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol

import numpy as np

from . import ctc
from .ctc import PosteriorGrid

log = logging.getLogger(__name__)

MODEL_MAGIC = b"WSAM0001"


class AcousticModel(Protocol):
    def posteriors(self, features) -> PosteriorGrid: ...

    def embed(self, features) -> np.ndarray: ...


@dataclass
class RefModel:
    """One hidden layer over a +-context window of frames.

    w_hidden is ((2c+1)*D + 1) x H (bias in the last row); w_head is
    (H + 1) x K. ``tokens`` names the head outputs for CTC heads (blank
    first) and is None for cluster-target heads.
    """

    context: int
    w_hidden: np.ndarray
    w_head: np.ndarray
    tokens: tuple[str, ...] | None = None

    @property
    def dim_in(self) -> int:
        return (self.w_hidden.shape[0] - 1) // (2 * self.context + 1)

    @property
    def dim_hidden(self) -> int:
        return self.w_hidden.shape[1]

    @property
    def n_out(self) -> int:
        return self.w_head.shape[1]

    @classmethod
    def create(cls, context, dim_in, dim_hidden, n_out, seed, tokens=None) -> "RefModel":
        rng = np.random.default_rng(seed)
        n_stack = (2 * context + 1) * dim_in + 1
        w_hidden = rng.normal(size=(n_stack, dim_hidden)) / np.sqrt(n_stack)
        w_head = rng.normal(size=(dim_hidden + 1, n_out)) / np.sqrt(dim_hidden + 1)
        if tokens is not None and len(tokens) != n_out:
            raise ValueError("token names do not match head size")
        return cls(context, w_hidden, w_head, tokens)

    def head_tokens(self) -> tuple[str, ...]:
        if self.tokens is not None:
            return self.tokens
        return (ctc.BLANK,) + tuple(f"k{i}" for i in range(1, self.n_out))

    def posteriors(self, features) -> PosteriorGrid:
        _, _, logp = _forward(self, np.asarray(features, dtype=np.float64))
        return PosteriorGrid(logp, self.head_tokens())

    def embed(self, features) -> np.ndarray:
        _, hidden, _ = _forward(self, np.asarray(features, dtype=np.float64))
        return hidden


def stack_context(features: np.ndarray, context: int) -> np.ndarray:
    """T x ((2c+1)*D + 1) design matrix; edges padded by frame repetition,
    constant 1 appended for the bias."""
    feats = np.asarray(features, dtype=np.float64)
    t, _ = feats.shape
    cols = []
    for off in range(-context, context + 1):
        idx = np.clip(np.arange(t) + off, 0, t - 1)
        cols.append(feats[idx])
    cols.append(np.ones((t, 1)))
    return np.concatenate(cols, axis=1)


def _forward(model: RefModel, features: np.ndarray):
    x = stack_context(features, model.context)
    hidden = np.tanh(x @ model.w_hidden)
    logits = np.concatenate([hidden, np.ones((hidden.shape[0], 1))], axis=1) @ model.w_head
    m = np.max(logits, axis=1, keepdims=True)
    logp = logits - (m + np.log(np.sum(np.exp(logits - m), axis=1, keepdims=True)))
    return x, hidden, logp


def _backprop(model: RefModel, x, hidden, grad_logits):
    hidden_b = np.concatenate([hidden, np.ones((hidden.shape[0], 1))], axis=1)
    g_head = hidden_b.T @ grad_logits
    d_hidden = grad_logits @ model.w_head[:-1, :].T
    d_act = d_hidden * (1.0 - hidden**2)
    g_hidden = x.T @ d_act
    return g_hidden, g_head


def frame_ce_loss_grads(model: RefModel, features, targets):
    """Summed cross-entropy over all frames plus parameter gradients."""
    targets = np.asarray(targets, dtype=np.int64)
    x, hidden, logp = _forward(model, np.asarray(features, dtype=np.float64))
    if targets.shape[0] != logp.shape[0]:
        raise ValueError("targets must cover every frame")
    if targets.min() < 0 or targets.max() >= model.n_out:
        raise ValueError(f"target out of range [0, {model.n_out})")
    loss = float(-np.sum(logp[np.arange(len(targets)), targets]))
    grad_logits = np.exp(logp)
    grad_logits[np.arange(len(targets)), targets] -= 1.0
    g_hidden, g_head = _backprop(model, x, hidden, grad_logits)
    return loss, g_hidden, g_head


def ctc_loss_grads(model: RefModel, features, target_ids):
    """CTC loss and parameter gradients; None when the target is infeasible."""
    x, hidden, logp = _forward(model, np.asarray(features, dtype=np.float64))
    if ctc.min_frames(target_ids) > logp.shape[0]:
        return None
    loss = ctc.ctc_loss(logp, target_ids)
    grad_logits = ctc.ctc_grad(logp, target_ids)
    g_hidden, g_head = _backprop(model, x, hidden, grad_logits)
    return loss, g_hidden, g_head


def swap_head(model: RefModel, n_out: int, seed, tokens=None) -> RefModel:
    """Fresh seeded Gaussian head; the hidden weights are carried over as-is."""
    rng = np.random.default_rng(seed)
    w_head = rng.normal(size=(model.dim_hidden + 1, n_out)) / np.sqrt(model.dim_hidden + 1)
    return RefModel(model.context, model.w_hidden.copy(), w_head, tokens)


@dataclass(frozen=True)
class InputMaskConfig:
    """Span masking of input frames, filled with a mean vector."""

    mask_prob: float = 0.08
    span: int = 4


@dataclass(frozen=True)
class SpecMaskConfig:
    n_time_masks: int = 1
    max_time_width: int = 4
    n_freq_masks: int = 1
    max_freq_width: int = 2


@dataclass(frozen=True)
class TrainConfig:
    """SGD settings. Large-corpus recipes typically run 40 epochs with
    128-utterance minibatches; these defaults are sized for the synthetic
    corpora in this package."""

    lr: float = 0.2
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    input_mask: InputMaskConfig | None = None
    spec_mask: SpecMaskConfig | None = None

    def validate(self) -> None:
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)  # mean per-frame loss per epoch
    skipped: int = 0


def spec_mask(
    features,
    n_time_masks: int,
    max_time_width: int,
    n_freq_masks: int,
    max_freq_width: int,
    seed,
) -> np.ndarray:
    """Time/frequency masking; masked cells take the per-dimension mean."""
    feats = np.array(features, dtype=np.float64)
    t, d = feats.shape
    rng = np.random.default_rng(seed)
    fill = feats.mean(axis=0)
    for _ in range(n_time_masks):
        width = int(rng.integers(0, max_time_width + 1))
        width = min(width, t)
        start = int(rng.integers(0, t - width + 1))
        feats[start : start + width, :] = fill
    for _ in range(n_freq_masks):
        width = int(rng.integers(0, max_freq_width + 1))
        width = min(width, d)
        start = int(rng.integers(0, d - width + 1))
        feats[:, start : start + width] = fill[start : start + width]
    return feats


def mask_input(features, mask_prob: float, span: int, seed, fill=None):
    """Mask spans of frames: each frame starts a span with mask_prob; masked
    frames are replaced by ``fill`` (corpus mean vector; defaults to the
    utterance mean). Returns (masked features, boolean bitmap)."""
    feats = np.array(features, dtype=np.float64)
    t, _ = feats.shape
    rng = np.random.default_rng(seed)
    starts = rng.random(t) < mask_prob
    bitmap = np.zeros(t, dtype=bool)
    for i in np.nonzero(starts)[0]:
        bitmap[i : i + span] = True
    if fill is None:
        fill = feats.mean(axis=0)
    feats[bitmap] = np.asarray(fill, dtype=np.float64)
    return feats, bitmap


def _corpus_mean(dataset) -> np.ndarray:
    total = None
    frames = 0
    for feats, _ in dataset:
        s = np.asarray(feats, dtype=np.float64).sum(axis=0)
        total = s if total is None else total + s
        frames += np.asarray(feats).shape[0]
    return total / frames


def _corrupt(feats, config: TrainConfig, mean_vec, rng):
    if config.spec_mask is not None:
        sm = config.spec_mask
        feats = spec_mask(
            feats,
            sm.n_time_masks,
            sm.max_time_width,
            sm.n_freq_masks,
            sm.max_freq_width,
            int(rng.integers(1 << 31)),
        )
    if config.input_mask is not None:
        im = config.input_mask
        feats, _ = mask_input(
            feats, im.mask_prob, im.span, int(rng.integers(1 << 31)), fill=mean_vec
        )
    return feats


def _sgd(model: RefModel, dataset, config: TrainConfig, grad_fn) -> TrainResult:
    config.validate()
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    mean_vec = _corpus_mean(dataset) if config.input_mask is not None else None
    result = TrainResult()
    skipped_ids = set()
    for _ in range(config.epochs):
        order = rng.permutation(len(dataset))
        epoch_loss = 0.0
        epoch_frames = 0
        for b0 in range(0, len(order), config.batch_size):
            batch = order[b0 : b0 + config.batch_size]
            g_hidden = np.zeros_like(model.w_hidden)
            g_head = np.zeros_like(model.w_head)
            frames = 0
            for i in batch:
                feats, target = dataset[i]
                feats = _corrupt(feats, config, mean_vec, rng)
                out = grad_fn(model, feats, target)
                if out is None:
                    skipped_ids.add(int(i))
                    continue
                loss, gh, go = out
                g_hidden += gh
                g_head += go
                n = np.asarray(feats).shape[0]
                frames += n
                epoch_loss += loss
                epoch_frames += n
            if frames == 0:
                continue
            model.w_hidden -= config.lr * g_hidden / frames
            model.w_head -= config.lr * g_head / frames
        result.losses.append(epoch_loss / max(1, epoch_frames))
    result.skipped = len(skipped_ids)
    return result


def train_frame_ce(model: RefModel, dataset, config: TrainConfig) -> TrainResult:
    """SGD on per-frame cross-entropy. ``dataset`` is a sequence of
    (features, integer frame targets). The per-utterance loss sums over
    every frame, masked or not."""
    return _sgd(model, dataset, config, frame_ce_loss_grads)


def train_ctc(model: RefModel, dataset, config: TrainConfig) -> TrainResult:
    """SGD on CTC loss over (features, label id sequence) pairs. Utterances
    whose target cannot be aligned are skipped with a warning and counted."""

    def grad_fn(m, feats, target):
        out = ctc_loss_grads(m, feats, target)
        if out is None:
            log.warning("skipping utterance: target length %d infeasible for %d frames",
                        len(target), np.asarray(feats).shape[0])
        return out

    return _sgd(model, dataset, config, grad_fn)


def save_model(model: RefModel, path) -> None:
    """Binary checkpoint: magic, (c, D, H, K) as u32 LE, parameters as f32 LE
    (hidden weights then head weights, row-major)."""
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(
            struct.pack(
                "<IIII", model.context, model.dim_in, model.dim_hidden, model.n_out
            )
        )
        f.write(model.w_hidden.astype("<f4").tobytes(order="C"))
        f.write(model.w_head.astype("<f4").tobytes(order="C"))


def load_model(path, tokens=None) -> RefModel:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MODEL_MAGIC:
            raise ValueError(f"bad magic in {path}: {magic!r}")
        c, d, h, k = struct.unpack("<IIII", f.read(16))
        n_hidden = ((2 * c + 1) * d + 1) * h
        buf = f.read(4 * n_hidden)
        w_hidden = np.frombuffer(buf, dtype="<f4").reshape((2 * c + 1) * d + 1, h)
        buf = f.read(4 * (h + 1) * k)
        w_head = np.frombuffer(buf, dtype="<f4").reshape(h + 1, k)
    return RefModel(c, w_hidden.astype(np.float64), w_head.astype(np.float64), tokens)
