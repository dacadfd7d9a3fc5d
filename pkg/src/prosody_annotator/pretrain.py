"""Pre-training recipes for the audio encoders: frame-level CE and CTC."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .core import Corpus, ProsodyError
from .data import Batch, bucket_batches, collate
from .encoders import (
    CNNCharEncoder,
    ModelConfig,
    build_audio_encoder,
    ctc_loss_batch,
    greedy_decode,
)
from .nn import ParameterStore, adam_step, backward

log = logging.getLogger(__name__)


class MissingAlignment(ProsodyError, ValueError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    encoder: str = "conformer_char"  # ppg | conformer_char | cnn_char
    objective: str | None = None  # frame_ce | ctc; default by encoder
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0

    def resolved_objective(self) -> str:
        if self.objective:
            return self.objective
        return "frame_ce" if self.encoder == "ppg" else "ctc"

    def replace(self, **changes) -> "PretrainConfig":
        d = asdict(self)
        d.update(changes)
        return PretrainConfig(**d)


def new_encoder(cfg: ModelConfig, kind: str, seed: int):
    # same generator slot ProsodyAnnotator uses, so a fresh encoder equals a random-init one
    gen = torch.Generator().manual_seed(seed * 4 + 1)
    return build_audio_encoder(kind, cfg, gen)


def frame_targets(encoder, batch: Batch, kind: str) -> torch.Tensor:
    """Per-subsampled-frame class targets: phones for PPG, characters (+1, blank=silence) otherwise."""
    full = batch.frame_phones if kind == "ppg" else batch.frame_chars
    layers = 1 if isinstance(encoder, CNNCharEncoder) else encoder.n_sub
    for _ in range(layers):
        full = full[:, ::2]
    return full


def _check_alignment(corpus: Corpus) -> None:
    for u in corpus:
        if len(u.frame_phones) != u.num_frames or len(u.token_spans) != len(u.tokens):
            raise MissingAlignment(f"utterance {u.id!r} lacks frame-level alignment")


def _frame_ce(encoder, batch: Batch, kind: str, dtype) -> tuple[torch.Tensor, int]:
    out = encoder(batch.frames.to(dtype), batch.frame_mask)
    tgt = frame_targets(encoder, batch, kind)
    logp = torch.log_softmax(out.logits, dim=-1)
    nll = -torch.gather(logp, -1, tgt[..., None]).squeeze(-1)
    mask = out.mask
    nll = torch.where(mask, nll, torch.zeros_like(nll))
    return nll.sum(), int(mask.sum())


def _ctc(encoder, batch: Batch, dtype) -> tuple[torch.Tensor, int]:
    out = encoder(batch.frames.to(dtype), batch.frame_mask)
    lengths = out.mask.sum(dim=1).tolist()
    targets = [[t + 1 for t in toks] for toks in batch.token_lists]
    losses = ctc_loss_batch(torch.log_softmax(out.logits, dim=-1), lengths, targets)
    return losses.sum(), sum(len(t) for t in targets)


def pretrain(encoder, corpus: Corpus, config: PretrainConfig, dtype=torch.float32) -> list[dict]:
    """Train ``encoder`` in place; returns one log row per epoch (epoch 0 = before training)."""
    objective = config.resolved_objective()
    if objective == "frame_ce":
        _check_alignment(corpus)
    elif objective != "ctc":
        raise ValueError(f"unknown pre-training objective {objective!r}")
    if objective == "ctc" and config.encoder == "ppg":
        raise ValueError("the PPG encoder is trained with frame-level CE only")
    encoder.to(dtype)
    store = ParameterStore.from_module(encoder)
    rng = np.random.default_rng([config.seed, 0x9E7])

    def loss_of(batch):
        if objective == "ctc":
            return _ctc(encoder, batch, dtype)
        return _frame_ce(encoder, batch, config.encoder, dtype)

    def full_loss() -> float:
        total, count = 0.0, 0
        with torch.no_grad():
            for group in bucket_batches(corpus, config.batch_size):
                loss, n = loss_of(collate(group, dtype))
                total += loss.item()
                count += n
        return total / max(count, 1)

    history = [{"epoch": 0, "loss": full_loss()}]
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for group in bucket_batches(corpus, config.batch_size, rng):
            batch = collate(group, dtype)
            store.zero_grad()
            loss, n = loss_of(batch)
            backward(loss / max(n, 1), store)
            adam_step(store, config.lr)
            total += loss.item()
            count += n
        history.append({"epoch": epoch, "loss": total / max(count, 1)})
        log.info("pretrain %s epoch %d loss %.4f", config.encoder, epoch, history[-1]["loss"])
    history.append({"epoch": config.epochs, "loss": full_loss(), "final": True})
    return history


def pretrain_frame_ce(encoder, corpus: Corpus, config: PretrainConfig, dtype=torch.float32):
    return pretrain(encoder, corpus, config.replace(objective="frame_ce"), dtype)


def pretrain_ctc(encoder, corpus: Corpus, config: PretrainConfig, dtype=torch.float32):
    return pretrain(encoder, corpus, config.replace(objective="ctc"), dtype)


@torch.no_grad()
def frame_accuracy(encoder, corpus: Corpus, kind: str, batch_size: int = 16) -> float:
    """Fraction of (subsampled) frames whose argmax class equals the alignment target."""
    right = total = 0
    dtype = next(encoder.parameters()).dtype
    for group in bucket_batches(corpus, batch_size):
        batch = collate(group, dtype)
        out = encoder(batch.frames, batch.frame_mask)
        tgt = frame_targets(encoder, batch, kind)
        hit = (out.logits.argmax(-1) == tgt) & out.mask
        right += int(hit.sum())
        total += int(out.mask.sum())
    return right / max(total, 1)


@torch.no_grad()
def ctc_decode_corpus(encoder, corpus: Corpus) -> dict[str, list[int]]:
    out = {}
    dtype = next(encoder.parameters()).dtype
    for u in corpus:
        batch = collate([u], dtype)
        o = encoder(batch.frames, batch.frame_mask)
        out[u.id] = [t - 1 for t in greedy_decode(o.logits[0])]
    return out
