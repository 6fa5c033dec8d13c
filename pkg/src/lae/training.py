"""Language-aware training: target masking, the three-term CTC objective,
SpecAugment, the mini-batch loop and checkpoint averaging."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .ctc import ctc_loss, ctc_loss_batch, min_frames_for
from .data import DataError, Utterance
from .model import EncoderModel
from .nn import checkpoint as ckpt_io
from .nn import tensor as T
from .nn.layers import subsampled_length
from .nn.optim import Adam, LrSchedule, clip_by_global_norm
from .vocab import LANG_A, LANG_B, Vocabulary

log = logging.getLogger(__name__)

PROBE_CLASS = {"mono-A": 0, "mono-B": 1, "code-switched": 2}
METRIC_FIELDS = ("epoch", "step", "J", "J_ori", "J_A", "J_B", "lr", "skipped_count")


class MaskedTargets(NamedTuple):
    y: tuple
    y_a: tuple
    y_b: tuple


def mask_targets(y: Sequence[int], vocab: Vocabulary, utt_id: str = "?") -> MaskedTargets:
    """Replace B tokens by ``mask_B`` in the A view and A tokens by ``mask_A`` in the B view."""
    y_a, y_b = [], []
    for k in y:
        tag = vocab.tag(k) if 0 <= k < vocab.size else None
        if tag == LANG_A:
            y_a.append(k)
            y_b.append(vocab.mask_a)
        elif tag == LANG_B:
            y_a.append(vocab.mask_b)
            y_b.append(k)
        else:
            raise DataError(f"utterance {utt_id}: target id {k} is not a language token")
    return MaskedTargets(tuple(y), tuple(y_a), tuple(y_b))


def unmask(y_a: Sequence[int], y_b: Sequence[int], vocab: Vocabulary) -> tuple:
    masks = {vocab.mask_a, vocab.mask_b}
    return tuple(a if a not in masks else b for a, b in zip(y_a, y_b))


def objective(j_ori, j_a=None, j_b=None):
    """J = J_ori + (J_A + J_B) / 2; with no auxiliary terms J = J_ori."""
    if j_a is None:
        return j_ori
    return j_ori + (j_a + j_b) * 0.5


def total_loss(grid_global, grid_a, grid_b, masked: MaskedTargets, aux: bool = True) -> float:
    j_ori = ctc_loss(grid_global, masked.y)[0]
    if not aux:
        return j_ori
    return objective(j_ori, ctc_loss(grid_a, masked.y_a)[0], ctc_loss(grid_b, masked.y_b)[0])


def spec_augment(features: np.ndarray, rng: np.random.Generator, n_time: int = 2, n_freq: int = 2,
                 max_time: int = 5, max_freq: int = 2) -> np.ndarray:
    """Zero ``n_time`` random time spans and ``n_freq`` random feature bands.

    Widths are uniform in ``[0, max]`` (clipped to the axis length); starts are
    uniform over the positions where the span fits.
    """
    out = np.array(features, copy=True)
    t, f = out.shape
    for _ in range(n_time):
        w = int(rng.integers(0, min(max_time, t) + 1))
        s = int(rng.integers(0, t - w + 1))
        out[s:s + w, :] = 0.0
    for _ in range(n_freq):
        w = int(rng.integers(0, min(max_freq, f) + 1))
        s = int(rng.integers(0, f - w + 1))
        out[:, s:s + w] = 0.0
    return out


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    accum: int = 1
    peak_lr: float = 1e-3
    warmup: int = 500
    aux_loss: bool = True
    probe: bool = False
    n_time_masks: int = 2
    n_freq_masks: int = 2
    max_time_width: int = 5
    max_freq_width: int = 2
    average_last: int = 5
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.accum, self.warmup, self.average_last) < 1:
            raise ValueError("epochs, batch size, accumulation, warmup and K must be positive")
        if self.average_last > self.epochs:
            raise ValueError("cannot average more checkpoints than epochs")


class TrainingDiverged(FloatingPointError):
    pass


def ctc_term(logp: T.Tensor, lengths, targets) -> T.Tensor:
    """Per-utterance CTC losses as a differentiable (B,) tensor."""
    res = ctc_loss_batch(logp.data, lengths, targets)
    if not res.feasible.all():
        raise DataError("infeasible target reached the loss; filter utterances first")

    def bw(g):
        return (res.grads * g[:, None, None],)

    return T.custom(res.losses.astype(logp.dtype), (logp,), bw)


def feasible(utt: Utterance, masked: MaskedTargets, aux: bool) -> bool:
    t_out = subsampled_length(utt.n_frames)
    seqs = (masked.y, masked.y_a, masked.y_b) if aux else (masked.y,)
    return t_out >= 1 and all(min_frames_for(s) <= t_out for s in seqs)


def pad_batch(feats: list[np.ndarray], dtype=np.float32):
    lengths = np.array([f.shape[0] for f in feats])
    out = np.zeros((len(feats), lengths.max(), feats[0].shape[1]), dtype=dtype)
    for i, f in enumerate(feats):
        out[i, :len(f)] = f
    return out, lengths


def make_batches(lengths, batch_size: int, rng: np.random.Generator, bucket: int = 20) -> list:
    """Shuffle, sort each window of ``bucket`` batches by length, then shuffle the batches."""
    order = rng.permutation(len(lengths))
    lengths = np.asarray(lengths)
    window = batch_size * bucket
    batches = []
    for s in range(0, len(order), window):
        chunk = order[s:s + window]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches += [chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


class BatchLoss(NamedTuple):
    loss: T.Tensor  # mean J over the batch, what gets differentiated
    j: np.ndarray
    j_ori: np.ndarray
    j_a: np.ndarray | None
    j_b: np.ndarray | None
    probe: T.Tensor | None


def batch_loss(model: EncoderModel, feats: np.ndarray, lengths, masked: list[MaskedTargets],
               aux: bool = True, probe_labels=None) -> BatchLoss:
    enc = model.encode(T.Tensor(feats.astype(model.dtype)), lengths)
    out_len = enc.lengths
    j_ori = ctc_term(T.log_softmax(model.global_logits(enc.h_bil)), out_len, [m.y for m in masked])
    j_a = j_b = None
    if aux:
        j_a = ctc_term(T.log_softmax(model.aux_logits(enc.h_a)), out_len, [m.y_a for m in masked])
        j_b = ctc_term(T.log_softmax(model.aux_logits(enc.h_b)), out_len, [m.y_b for m in masked])
    j = objective(j_ori, j_a, j_b)
    n = len(masked)
    loss = T.sum_all(j) * (1.0 / n)
    probe_loss = None
    if probe_labels is not None:
        logp = T.log_softmax(model.probe_logits(enc.h_bil, out_len))
        onehot = np.zeros(logp.shape, dtype=logp.dtype)
        onehot[np.arange(n), probe_labels] = 1.0
        probe_loss = T.sum_all(T.mul(logp, onehot)) * (-1.0 / n)
    # logged values are recombined in float64 so J equals its parts to rounding
    parts = [None if x is None else x.data.astype(np.float64) for x in (j_ori, j_a, j_b)]
    return BatchLoss(loss, objective(*parts), *parts, probe_loss)


@dataclass
class EpochMetrics:
    epoch: int
    step: int
    J: float
    J_ori: float
    J_A: float
    J_B: float
    lr: float
    skipped_count: int

    def row(self):
        return [self.epoch, self.step, repr(float(self.J)), repr(float(self.J_ori)), repr(float(self.J_A)),
                repr(float(self.J_B)), repr(float(self.lr)), self.skipped_count]


@dataclass
class TrainResult:
    metrics: list[EpochMetrics]
    checkpoints: list[Path]
    skipped: int


def checkpoint_of(model: EncoderModel, step: int, digest: bytes = bytes(32), meta=None):
    return ckpt_io.Checkpoint(model.state(), step, digest, dict(meta or {}))


def train(model: EncoderModel, corpus: list[Utterance], vocab: Vocabulary, cfg: TrainConfig,
          out_dir=None, digest: bytes = bytes(32), meta=None) -> TrainResult:
    """Shuffled mini-batch training with gradient accumulation.

    Writes ``epochNNN.laec`` and ``metrics.csv`` into ``out_dir`` when given.
    Utterances too short for any of their (up to three) CTC targets are
    skipped and counted.
    """
    if not corpus:
        raise DataError("empty training corpus")
    aux = cfg.aux_loss and model.aux_decoder is not None
    items = []
    skipped = 0
    for idx, utt in enumerate(corpus):
        masked = mask_targets(utt.targets, vocab, utt.utt_id)
        if feasible(utt, masked, aux):
            items.append((idx, utt, masked))
        else:
            skipped += 1
    if not items:
        raise DataError("every utterance is too short for its targets")
    if skipped:
        log.info("skipping %d utterances with CTC-infeasible targets", skipped)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = model.named_parameters()
    probe_names = model.probe_parameter_names()
    enc_params = {k: p for k, p in params.items() if k not in probe_names}
    probe_params = {k: p for k, p in params.items() if k in probe_names}
    if not aux and model.aux_decoder is not None:
        for k in list(enc_params):
            if k.startswith("aux_decoder."):
                del enc_params[k]
    opt = Adam(enc_params, LrSchedule(cfg.peak_lr, cfg.warmup))
    probe_opt = Adam(probe_params, LrSchedule(cfg.peak_lr, cfg.warmup)) if cfg.probe else None

    metrics: list[EpochMetrics] = []
    paths: list[Path] = []
    writer = None
    fh = None
    if out is not None:
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
    model.train()
    lr = 0.0
    micro = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            batches = make_batches([u.n_frames for _, u, _ in items], cfg.batch_size,
                                   np.random.default_rng([cfg.seed, 1, epoch]))
            sums = np.zeros(4)
            count = 0
            micro = 0
            opt.zero_grad()
            if probe_opt:
                probe_opt.zero_grad()
            for batch_idx in batches:
                batch = [items[i] for i in batch_idx]
                feats = [spec_augment(u.features, np.random.default_rng([cfg.seed, 2, epoch, idx]),
                                      cfg.n_time_masks, cfg.n_freq_masks, cfg.max_time_width,
                                      cfg.max_freq_width) for idx, u, _ in batch]
                padded, lengths = pad_batch(feats)
                model.set_dropout_rng(np.random.default_rng([cfg.seed, 3, opt.step_count, micro]))
                labels = [PROBE_CLASS[u.kind] for _, u, _ in batch] if cfg.probe else None
                bl = batch_loss(model, padded, lengths, [m for _, _, m in batch], aux, labels)
                if not np.isfinite(bl.j).all():
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {opt.step_count}")
                scale = 1.0 / cfg.accum
                bl.loss.backward(np.asarray(scale, dtype=bl.loss.dtype))
                if bl.probe is not None:
                    bl.probe.backward(np.asarray(scale, dtype=bl.probe.dtype))
                sums += [bl.j.sum(), bl.j_ori.sum(),
                         0.0 if bl.j_a is None else bl.j_a.sum(), 0.0 if bl.j_b is None else bl.j_b.sum()]
                count += len(batch)
                micro += 1
                if micro % cfg.accum == 0:
                    clip_by_global_norm(enc_params, cfg.clip_norm)
                    lr = opt.step()
                    opt.zero_grad()
                    if probe_opt:
                        probe_opt.step()
                        probe_opt.zero_grad()
                    micro = 0
            means = sums / count
            m = EpochMetrics(epoch, opt.step_count, means[0], means[1], means[2], means[3], lr, skipped)
            metrics.append(m)
            log.info("epoch %d step %d J=%.4f J_ori=%.4f J_A=%.4f J_B=%.4f lr=%.2e",
                     epoch, m.step, m.J, m.J_ori, m.J_A, m.J_B, lr)
            if out is not None:
                path = out / f"epoch{epoch:03d}.laec"
                ckpt_io.save(path, checkpoint_of(model, opt.step_count, digest, meta))
                paths.append(path)
                writer.writerow(m.row())
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
        model.eval()
    return TrainResult(metrics, paths, skipped)


def average_checkpoints(paths: Sequence) -> ckpt_io.Checkpoint:
    return ckpt_io.average([ckpt_io.load(p) for p in paths])


def last_checkpoints(ckpt_dir, k: int) -> list[Path]:
    paths = sorted(Path(ckpt_dir).glob("epoch*.laec"))
    if len(paths) < k:
        raise FileNotFoundError(f"{ckpt_dir}: need {k} epoch checkpoints, found {len(paths)}")
    return paths[-k:]


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("epoch", "step", "skipped_count") else float(v)) for k, v in r.items()}
            for r in rows]
