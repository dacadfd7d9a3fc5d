"""Joint fine-tuning on triplets and the pre-trained x fixed ablation grid."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .core import Corpus, ProsodyError, REPORTED_LEVELS
from .data import bucket_batches, collate
from .encoders import AUDIO_ENCODERS, ModelConfig, preset
from .evaluation import ConfusionCounts, ReportRow
from .fusion import ProsodyAnnotator, annotate_batch, ce_loss_logits
from .nn import (
    CheckpointError,
    ParameterStore,
    adam_step,
    backward,
    load_checkpoint,
    load_into,
    module_bytes,
    parse_checkpoint,
)

log = logging.getLogger(__name__)


class TrainConfigError(ProsodyError, ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    audio_encoder: str = "conformer_char"
    pretrained: bool = False
    pretrained_path: str | None = None
    fixed: bool = False
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    preset: str = "desk"
    patience: int = 5
    full_train_eval: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.audio_encoder not in AUDIO_ENCODERS:
            raise TrainConfigError(f"audio_encoder must be one of {AUDIO_ENCODERS}, got {self.audio_encoder!r}")
        if self.fixed and self.audio_encoder == "none":
            raise TrainConfigError("fixed=true requires an audio encoder")
        if self.pretrained and self.audio_encoder == "none":
            raise TrainConfigError("pretrained=true requires an audio encoder")
        if self.pretrained and not self.pretrained_path:
            raise TrainConfigError("pretrained=true requires a pre-training checkpoint path")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or self.patience < 1:
            raise TrainConfigError("epochs >= 0, batch_size >= 1, lr >= 0 and patience >= 1 are required")

    def replace(self, **changes) -> "TrainConfig":
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class TrainResult:
    model: ProsodyAnnotator
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    seconds: float = 0.0

    def checkpoint_bytes(self) -> bytes:
        return module_bytes(self.model)

    def log_csv(self) -> str:
        return history_csv(self.history)


def model_config_for(corpus: Corpus, preset_name: str = "desk", **overrides) -> ModelConfig:
    max_tok = max([len(u.tokens) for u in corpus] + [1])
    base = preset(preset_name, vocab_size=corpus.vocab_size, phone_count=corpus.phone_count,
                  feature_dim=corpus.feature_dim, **overrides)
    if max_tok > base.max_tokens:
        base = base.replace(max_tokens=max_tok)
    return base


# ---------------------------------------------------------------------------
# evaluation helpers

@torch.no_grad()
def evaluate(model: ProsodyAnnotator, corpus: Corpus, batch_size: int = 16):
    """Mean per-token CE, confusion counts and hypotheses over ``corpus``."""
    dtype = next(model.parameters()).dtype
    total, count = 0.0, 0
    counts = ConfusionCounts()
    hyps: dict[str, list[int]] = {}
    for group in bucket_batches(corpus, batch_size):
        batch = collate(group, dtype)
        logits = model(batch)
        total += float(ce_loss_logits(logits, batch.labels, batch.token_mask))
        count += int(batch.token_mask.sum())
        pred = logits.argmax(-1)
        for i, u in enumerate(group):
            hyp = pred[i, : len(u.tokens)].tolist()
            hyps[u.id] = hyp
            counts.add(u.labels, hyp)
    return total / max(count, 1), counts, hyps


def token_accuracy(model: ProsodyAnnotator, corpus: Corpus) -> float:
    right = total = 0
    for group in bucket_batches(corpus, 16):
        for u, hyp in zip(group, annotate_batch(model, group)):
            right += sum(int(a == b) for a, b in zip(u.labels, hyp))
            total += len(u.labels)
    return right / max(total, 1)


def _row(epoch: int, split: str, loss: float, counts: ConfusionCounts | None) -> dict:
    row = {"epoch": epoch, "split": split, "loss": loss}
    scores = counts.scores() if counts is not None else None
    for lv in REPORTED_LEVELS:
        for k in ("precision", "recall", "f1"):
            row[f"{lv.name}_{k}"] = scores[lv.name][k] if scores else float("nan")
    return row


def history_csv(history: list[dict]) -> str:
    if not history:
        return ""
    names = list(dict.fromkeys(k for row in history for k in row))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=names, restval="", lineterminator="\n")
    w.writeheader()
    for row in history:
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# training

def build_model(config: TrainConfig, model_cfg: ModelConfig, dtype=torch.float32) -> ProsodyAnnotator:
    model = ProsodyAnnotator(model_cfg, config.audio_encoder, config.seed).to(dtype)
    if config.pretrained:
        try:
            entries = load_checkpoint(config.pretrained_path)
            load_into(model.audio, entries)
        except (OSError, CheckpointError) as exc:
            raise TrainConfigError(f"cannot use pre-trained checkpoint {config.pretrained_path!r}: {exc}") from None
    if config.fixed:
        for p in model.audio.parameters():
            p.requires_grad_(False)
    return model


def train(train_set: Corpus, dev_set: Corpus, config: TrainConfig, model_cfg: ModelConfig | None = None,
          dtype=torch.float32) -> TrainResult:
    """Minimise summed token CE on ``train_set``; keeps the parameters with the best dev loss."""
    config.validate()
    start = time.perf_counter()
    if model_cfg is None:
        model_cfg = model_config_for(train_set, config.preset)
    if (model_cfg.vocab_size, model_cfg.phone_count, model_cfg.feature_dim) != (
            train_set.vocab_size, train_set.phone_count, train_set.feature_dim):
        raise TrainConfigError("model configuration does not match the corpus inventory")
    model = build_model(config, model_cfg, dtype)
    store = ParameterStore.from_module(model)
    rng = np.random.default_rng([config.seed, 0x7A1])

    history: list[dict] = []
    dev_loss, dev_counts, _ = evaluate(model, dev_set)
    history.append(_row(0, "dev", dev_loss, dev_counts))
    if config.full_train_eval:
        tr_loss, tr_counts, _ = evaluate(model, train_set)
        history.append(_row(0, "train", tr_loss, tr_counts))
    best_loss, best_epoch, best_state = dev_loss, 0, module_bytes(model)
    stale = 0
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for group in bucket_batches(train_set, config.batch_size, rng):
            batch = collate(group, dtype)
            store.zero_grad()
            loss = ce_loss_logits(model(batch), batch.labels, batch.token_mask)
            backward(loss, store)
            adam_step(store, config.lr)
            total += loss.item()
            count += int(batch.token_mask.sum())
        if config.full_train_eval:
            tr_loss, tr_counts, _ = evaluate(model, train_set)
            history.append(_row(epoch, "train", tr_loss, tr_counts))
        else:
            history.append(_row(epoch, "train", total / max(count, 1), None))
        dev_loss, dev_counts, _ = evaluate(model, dev_set)
        history.append(_row(epoch, "dev", dev_loss, dev_counts))
        log.info("epoch %d train %.4f dev %.4f", epoch, history[-2]["loss"], dev_loss)
        if dev_loss < best_loss:
            best_loss, best_epoch, best_state = dev_loss, epoch, module_bytes(model)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    load_into(model, parse_checkpoint(best_state))
    return TrainResult(model, history, best_epoch, time.perf_counter() - start)


def audio_encoder_bytes(model: ProsodyAnnotator) -> bytes:
    if model.audio is None:
        return b""
    return module_bytes(model.audio)


# ---------------------------------------------------------------------------
# ablation grid

MODEL_NAMES = {"none": "Text-only", "cnn_char": "CNN-Char", "conformer_char": "Conformer-Char",
               "ppg": "Conformer-PPG"}


@dataclass
class GridCell:
    id: str
    config: TrainConfig


def run_ablation(train_set: Corpus, dev_set: Corpus, test_set: Corpus, grid: list[GridCell],
                 model_cfg: ModelConfig | None = None) -> list[tuple[ReportRow, TrainResult]]:
    """Train and test every cell; rows come back in grid order."""
    for cell in grid:
        cell.config.validate()
    out = []
    for cell in grid:
        res = train(train_set, dev_set, cell.config, model_cfg)
        _, counts, _ = evaluate(res.model, test_set)
        cfg = cell.config
        has_audio = cfg.audio_encoder != "none"
        row = ReportRow(
            cell.id, MODEL_NAMES[cfg.audio_encoder],
            ("yes" if cfg.pretrained else "no") if has_audio else "-",
            ("yes" if cfg.fixed else "no") if has_audio else "-",
            counts.scores())
        out.append((row, res))
    return out
