"""Cross-attention fusion decoder, output head, CE objective and annotation."""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor, nn

from .core import NUM_LABELS, ProsodyError
from .encoders import (
    ModelConfig,
    TextEncoder,
    TransformerLayer,
    audio_feature_width,
    build_audio_encoder,
    decoder_input,
)
from .nn import FeedForward, LayerNorm, Linear, MultiHeadAttention, ShapeError, sinusoid_positions
from .data import collate


class CrossLayer(nn.Module):
    """Text queries attend over audio keys/values, then feed-forward; pre-norm residuals."""

    def __init__(self, d: int, heads: int, d_ff: int, gen: torch.Generator):
        super().__init__()
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, gen)
        self.norm2 = LayerNorm(d)
        self.ff = FeedForward(d, d_ff, gen)

    def forward(self, x: Tensor, memory: Tensor, memory_mask: Tensor | None,
                return_weights: bool = False):
        a, w = self.attn(self.norm1(x), memory, memory_mask, return_weights=True)
        x = x + a
        x = x + self.ff(self.norm2(x))
        return (x, w) if return_weights else x


class FusionDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig, audio_width: int, gen: torch.Generator):
        super().__init__()
        self.audio_width = audio_width
        self.audio_in = Linear(audio_width, cfg.d_model, gen)
        self.audio_layers = nn.ModuleList(
            TransformerLayer(cfg.d_model, cfg.dec_heads, cfg.d_ff, gen) for _ in range(cfg.audio_layers))
        self.audio_norm = LayerNorm(cfg.d_model)
        self.proj = Linear(cfg.d_model, cfg.d_text, gen)
        self.cross_layers = nn.ModuleList(
            CrossLayer(cfg.d_text, cfg.dec_heads, cfg.d_ff, gen) for _ in range(cfg.cross_layers))
        self.norm = LayerNorm(cfg.d_text)

    def forward(self, x: Tensor, o: Tensor, text_mask: Tensor | None = None,
                audio_mask: Tensor | None = None, return_weights: bool = False):
        """x: (B, N, D) text hidden; o: (B, T', D_a) audio hidden -> H: (B, N, D)."""
        if o.shape[-1] != self.audio_width:
            raise ShapeError(f"decoder expects audio width {self.audio_width}, got {o.shape[-1]}")
        if x.shape[0] != o.shape[0]:
            raise ShapeError(f"text batch {x.shape[0]} != audio batch {o.shape[0]}")
        if audio_mask is not None and tuple(audio_mask.shape) != tuple(o.shape[:2]):
            raise ShapeError(f"audio mask {tuple(audio_mask.shape)} does not match audio {tuple(o.shape[:2])}")
        if text_mask is not None and tuple(text_mask.shape) != tuple(x.shape[:2]):
            raise ShapeError(f"text mask {tuple(text_mask.shape)} does not match text {tuple(x.shape[:2])}")
        a = self.audio_in(o)
        a = a + sinusoid_positions(a.shape[1], a.shape[2], a.dtype)
        for layer in self.audio_layers:
            a = layer(a, audio_mask)
        memory = self.proj(self.audio_norm(a))
        weights = []
        for layer in self.cross_layers:
            x, w = layer(x, memory, audio_mask, return_weights=True)
            weights.append(w)
        h = self.norm(x)
        return (h, weights) if return_weights else h


def predict(head: Linear, h: Tensor) -> Tensor:
    """Row-wise softmax(W h + b) over the boundary labels."""
    return torch.softmax(head(h), dim=-1)


def ce_loss(p: Tensor, labels: Tensor, mask: Tensor | None = None) -> Tensor:
    """Summed -log p[k, label_k] over valid tokens."""
    if p.shape[-1] != NUM_LABELS:
        raise ShapeError(f"expected {NUM_LABELS} classes, got {p.shape[-1]}")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= NUM_LABELS):
        raise ProsodyError(f"label outside 0..{NUM_LABELS - 1}")
    nll = -torch.log(torch.gather(p, -1, labels[..., None]).squeeze(-1))
    if mask is not None:
        nll = torch.where(mask, nll, torch.zeros_like(nll))
    return nll.sum()


def ce_loss_logits(logits: Tensor, labels: Tensor, mask: Tensor | None = None) -> Tensor:
    """Same objective computed from logits via log-softmax (numerically safer for training)."""
    nll = -torch.gather(torch.log_softmax(logits, dim=-1), -1, labels[..., None]).squeeze(-1)
    if mask is not None:
        nll = torch.where(mask, nll, torch.zeros_like(nll))
    return nll.sum()


def argmax_low(p: np.ndarray) -> np.ndarray:
    """Argmax along the last axis; ties go to the lowest boundary level."""
    return np.argmax(p, axis=-1)


class ProsodyAnnotator(nn.Module):
    """Text encoder, optional audio encoder + fusion decoder, and the label head.

    With ``audio_kind == "none"`` the head reads the text hidden states
    directly (the text-only baseline).
    """

    def __init__(self, cfg: ModelConfig, audio_kind: str = "conformer_char", seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.audio_kind = audio_kind
        gens = [torch.Generator().manual_seed(seed * 4 + i) for i in range(4)]
        self.text = TextEncoder(cfg, gens[0])
        self.audio = build_audio_encoder(audio_kind, cfg, gens[1])
        self.decoder = (FusionDecoder(cfg, audio_feature_width(audio_kind, cfg), gens[2])
                        if self.audio is not None else None)
        self.head = Linear(cfg.d_text, NUM_LABELS, gens[3])

    def fused(self, batch, return_weights: bool = False):
        x = self.text(batch.tokens, batch.token_mask)
        if self.audio is None:
            return (x, []) if return_weights else x
        out = self.audio(batch.frames.to(x.dtype), batch.frame_mask)
        o = decoder_input(self.audio_kind, self.cfg, out)
        return self.decoder(x, o, batch.token_mask, out.mask, return_weights=return_weights)

    def forward(self, batch) -> Tensor:
        """Label logits, (B, N, 5)."""
        return self.head(self.fused(batch))

    def probabilities(self, batch) -> Tensor:
        return predict(self.head, self.fused(batch))


@torch.no_grad()
def annotate_batch(model: ProsodyAnnotator, utts) -> list[list[int]]:
    dtype = next(model.parameters()).dtype
    batch = collate(utts, dtype=dtype)
    p = model.probabilities(batch).cpu().numpy()
    labels = argmax_low(p)
    return [labels[i, : len(u.tokens)].tolist() for i, u in enumerate(utts)]


def annotate(tokens, frames, model: ProsodyAnnotator) -> list[int]:
    """Boundary labels for one (tokens, frames) pair."""
    from .core import Utterance

    tokens = [int(t) for t in tokens]
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != model.cfg.feature_dim:
        raise ShapeError(f"frames must be T x {model.cfg.feature_dim}, got {frames.shape}")
    u = Utterance("x", tokens, [4] * len(tokens), frames, [], [0] * frames.shape[0])
    return annotate_batch(model, [u])[0]
