"""Text encoder, audio encoders (PPG, CNN-char, conformer-char) and CTC."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
from torch import Tensor, nn

from .core import ProsodyError
from .nn import (
    Conv1d,
    Conv2d,
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    ShapeError,
    depthwise_conv1d,
    relu,
    sinusoid_positions,
)

AUDIO_ENCODERS = ("none", "cnn_char", "conformer_char", "ppg")


class InfeasibleTarget(ProsodyError, ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 60
    phone_count: int = 20
    feature_dim: int = 16
    max_tokens: int = 256
    d_text: int = 64
    text_heads: int = 4
    text_layers: int = 2
    d_audio: int = 64
    audio_heads: int = 4
    conformer_blocks: int = 2
    conv_kernel: int = 7
    subsample_layers: int = 1
    cnn_channels: int = 4
    d_model: int = 64
    dec_heads: int = 4
    audio_layers: int = 2
    cross_layers: int = 2
    d_ff: int = 128
    ppg_feed: str = "posterior"  # or "hidden"

    def __post_init__(self):
        if self.ppg_feed not in ("posterior", "hidden"):
            raise ValueError(f"ppg_feed must be 'posterior' or 'hidden', got {self.ppg_feed!r}")

    @property
    def subsample(self) -> int:
        return 2 ** self.subsample_layers

    def replace(self, **changes) -> "ModelConfig":
        d = asdict(self)
        d.update(changes)
        return ModelConfig(**d)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


PRESETS = {
    "desk": {},
    # sizes as published: BERT-base text side, 12-block conformer with kernel 15,
    # 6 + 6 decoder layers with 8 heads
    "paper": dict(d_text=768, text_heads=12, text_layers=12, max_tokens=512,
                  d_audio=512, audio_heads=8, conformer_blocks=12, conv_kernel=15,
                  subsample_layers=2, d_model=768, dec_heads=8, audio_layers=6,
                  cross_layers=6, d_ff=2048),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


def _zero_pad(x: Tensor, mask: Tensor | None) -> Tensor:
    return x if mask is None else x * mask[..., None].to(x.dtype)


class TransformerLayer(nn.Module):
    """Pre-norm self-attention + feed-forward, residual around both."""

    def __init__(self, d: int, heads: int, d_ff: int, gen: torch.Generator):
        super().__init__()
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, gen)
        self.norm2 = LayerNorm(d)
        self.ff = FeedForward(d, d_ff, gen)

    def forward(self, x: Tensor, mask: Tensor | None) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ff(self.norm2(x))


# ---------------------------------------------------------------------------
# text

class TextEncoder(nn.Module):
    """Token embeddings + learned positions + a small self-attention stack."""

    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        self.vocab_size = cfg.vocab_size
        self.tok = Embedding(cfg.vocab_size, cfg.d_text, gen)
        self.pos = Embedding(cfg.max_tokens, cfg.d_text, gen)
        self.layers = nn.ModuleList(
            TransformerLayer(cfg.d_text, cfg.text_heads, cfg.d_ff, gen) for _ in range(cfg.text_layers))
        self.norm = LayerNorm(cfg.d_text)

    def forward(self, tokens: Tensor, mask: Tensor | None = None) -> Tensor:
        """tokens: (B, N) int64 -> X: (B, N, d_text)."""
        n = tokens.shape[1]
        if n > self.pos.weight.shape[0]:
            raise ShapeError(f"{n} tokens exceed max_tokens={self.pos.weight.shape[0]}")
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.vocab_size):
            raise ShapeError(f"token id outside [0, {self.vocab_size})")
        x = self.tok(tokens) + self.pos.weight[:n]
        for layer in self.layers:
            x = layer(x, mask)
        return self.norm(x)


# ---------------------------------------------------------------------------
# audio

@dataclass
class AudioOutput:
    hidden: Tensor  # (B, T', D) layer below the classification head
    logits: Tensor  # (B, T', C)
    mask: Tensor | None  # (B, T')
    subsample: int

    def posteriors(self) -> Tensor:
        return torch.softmax(self.logits, dim=-1)


def subsample_mask(mask: Tensor | None, layers: int) -> Tensor | None:
    if mask is None:
        return None
    for _ in range(layers):
        mask = mask[:, ::2]
    return mask


class ConvModule(nn.Module):
    def __init__(self, d: int, kernel: int, gen: torch.Generator):
        super().__init__()
        self.pw_in = Conv1d(d, 2 * d, 1, gen)
        self.dw = Conv1d(d, d, kernel, gen, padding=kernel // 2, groups=d)
        self.pw_out = Conv1d(d, d, 1, gen)

    def forward(self, x: Tensor, mask: Tensor | None) -> Tensor:
        h = self.pw_in(x.transpose(1, 2))
        a, b = h.chunk(2, dim=1)
        h = a * torch.sigmoid(b)
        if mask is not None:
            h = h * mask[:, None, :].to(h.dtype)
        h = relu(depthwise_conv1d(h, self.dw.weight, self.dw.bias))
        return self.pw_out(h).transpose(1, 2)


class ConformerBlock(nn.Module):
    def __init__(self, d: int, heads: int, kernel: int, d_ff: int, gen: torch.Generator):
        super().__init__()
        self.norm_attn = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, gen)
        self.norm_conv = LayerNorm(d)
        self.conv = ConvModule(d, kernel, gen)
        self.norm_ff = LayerNorm(d)
        self.ff = FeedForward(d, d_ff, gen)

    def forward(self, x: Tensor, mask: Tensor | None) -> Tensor:
        h = self.norm_attn(x)
        x = x + self.attn(h, h, mask)
        x = x + self.conv(self.norm_conv(x), mask)
        return x + self.ff(self.norm_ff(x))


class ConformerEncoder(nn.Module):
    """Strided conv subsampling, conformer blocks, then a frame classifier.

    ``n_classes`` is phone_count + 1 for the PPG model and vocab_size + 1
    (blank first) for the character model.
    """

    def __init__(self, cfg: ModelConfig, n_classes: int, gen: torch.Generator):
        super().__init__()
        self.feature_dim = cfg.feature_dim
        self.n_sub = cfg.subsample_layers
        chans = [cfg.feature_dim] + [cfg.d_audio] * cfg.subsample_layers
        self.subsample = nn.ModuleList(
            Conv1d(chans[i], chans[i + 1], 3, gen, stride=2, padding=1) for i in range(cfg.subsample_layers))
        self.blocks = nn.ModuleList(
            ConformerBlock(cfg.d_audio, cfg.audio_heads, cfg.conv_kernel, cfg.d_ff, gen)
            for _ in range(cfg.conformer_blocks))
        self.norm = LayerNorm(cfg.d_audio)
        self.head = Linear(cfg.d_audio, n_classes, gen)

    def forward(self, frames: Tensor, mask: Tensor | None = None) -> AudioOutput:
        if frames.shape[-1] != self.feature_dim:
            raise ShapeError(f"expected {self.feature_dim} features per frame, got {frames.shape[-1]}")
        x = _zero_pad(frames, mask).transpose(1, 2)
        for conv in self.subsample:
            x = relu(conv(x))
            mask = subsample_mask(mask, 1)
            if mask is not None:
                x = x * mask[:, None, :].to(x.dtype)
        x = x.transpose(1, 2)
        x = x + sinusoid_positions(x.shape[1], x.shape[2], x.dtype)
        for block in self.blocks:
            x = block(x, mask)
        hidden = self.norm(x)
        return AudioOutput(hidden, self.head(hidden), mask, 2 ** self.n_sub)


class CNNCharEncoder(nn.Module):
    """Two 2D conv layers over (time, feature) and a linear character head.

    The hidden representation is the flattened output of the second conv
    layer, so its width is ``cnn_channels * feature_dim``. The receptive field
    is 7 input frames.
    """

    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        self.feature_dim = cfg.feature_dim
        c = cfg.cnn_channels
        self.conv1 = Conv2d(1, c, 3, gen, stride=(2, 1), padding=1)
        self.conv2 = Conv2d(c, c, 3, gen, stride=1, padding=1)
        self.head = Linear(c * cfg.feature_dim, cfg.vocab_size + 1, gen)

    @property
    def width(self) -> int:
        return self.head.weight.shape[1]

    def forward(self, frames: Tensor, mask: Tensor | None = None) -> AudioOutput:
        if frames.shape[-1] != self.feature_dim:
            raise ShapeError(f"expected {self.feature_dim} features per frame, got {frames.shape[-1]}")
        x = _zero_pad(frames, mask)[:, None]  # (B, 1, T, F)
        x = relu(self.conv1(x))
        mask = subsample_mask(mask, 1)
        if mask is not None:
            x = x * mask[:, None, :, None].to(x.dtype)
        x = relu(self.conv2(x))
        b, c, t, f = x.shape
        hidden = x.permute(0, 2, 1, 3).reshape(b, t, c * f)
        return AudioOutput(hidden, self.head(hidden), mask, 2)


def build_audio_encoder(kind: str, cfg: ModelConfig, gen: torch.Generator) -> nn.Module | None:
    if kind == "none":
        return None
    if kind == "ppg":
        return ConformerEncoder(cfg, cfg.phone_count + 1, gen)
    if kind == "conformer_char":
        return ConformerEncoder(cfg, cfg.vocab_size + 1, gen)
    if kind == "cnn_char":
        return CNNCharEncoder(cfg, gen)
    raise ValueError(f"unknown audio encoder {kind!r}; choose from {AUDIO_ENCODERS}")


def audio_feature_width(kind: str, cfg: ModelConfig) -> int:
    """Width of the rows the fusion decoder receives from the audio encoder."""
    if kind == "ppg" and cfg.ppg_feed == "posterior":
        return cfg.phone_count + 1
    if kind == "cnn_char":
        return cfg.cnn_channels * cfg.feature_dim
    return cfg.d_audio


def decoder_input(kind: str, cfg: ModelConfig, out: AudioOutput) -> Tensor:
    if kind == "ppg" and cfg.ppg_feed == "posterior":
        return out.posteriors()
    return out.hidden


# ---------------------------------------------------------------------------
# CTC

NEG = -1e30


def _check_feasible(target, t_len: int) -> None:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    if len(target) + repeats > t_len:
        raise InfeasibleTarget(
            f"target of length {len(target)} with {repeats} repeats needs at least "
            f"{len(target) + repeats} frames, got {t_len}")


def ctc_loss_batch(log_probs: Tensor, lengths, targets, blank: int = 0) -> Tensor:
    """Per-item CTC negative log-likelihood, shape (B,).

    log_probs: (B, T, C) log-softmax outputs; lengths: valid frames per item;
    targets: list of label sequences (no blanks).
    """
    b, t_max, n_cls = log_probs.shape
    lengths = [int(x) for x in lengths]
    for tgt, tl in zip(targets, lengths):
        if tl < 1 or tl > t_max:
            raise ShapeError(f"sequence length {tl} outside [1, {t_max}]")
        if any(not 0 <= y < n_cls or y == blank for y in tgt):
            raise ShapeError(f"target labels must lie in [0, {n_cls}) and exclude the blank")
        _check_feasible(list(tgt), tl)
    s_max = 2 * max((len(t) for t in targets), default=0) + 1
    ext = torch.full((b, s_max), blank, dtype=torch.long)
    allow_skip = torch.zeros(b, s_max, dtype=torch.bool)
    s_len = []
    for i, tgt in enumerate(targets):
        for j, y in enumerate(tgt):
            ext[i, 2 * j + 1] = int(y)
            if j > 0 and tgt[j] != tgt[j - 1]:
                allow_skip[i, 2 * j + 1] = True
        s_len.append(2 * len(tgt) + 1)
    # emissions for every extended position: (B, T, S)
    emit = torch.gather(log_probs, 2, ext[:, None, :].expand(b, t_max, s_max))
    neg = torch.full((b, 1), NEG, dtype=log_probs.dtype)
    alpha = torch.full((b, s_max), NEG, dtype=log_probs.dtype)
    alpha = torch.cat([emit[:, 0, :2], alpha[:, 2:]], dim=1) if s_max > 1 else emit[:, 0, :1]
    lengths_t = torch.tensor(lengths)
    for t in range(1, t_max):
        prev1 = torch.cat([neg, alpha[:, :-1]], dim=1)
        prev2 = torch.cat([neg, neg, alpha[:, :-2]], dim=1)[:, :s_max]
        prev2 = torch.where(allow_skip, prev2, torch.full_like(prev2, NEG))
        new = torch.logsumexp(torch.stack([alpha, prev1, prev2]), dim=0) + emit[:, t]
        alpha = torch.where((t < lengths_t)[:, None], new, alpha)
    out = []
    for i in range(b):
        s = s_len[i]
        ends = alpha[i, s - 1:s] if s == 1 else alpha[i, s - 2:s]
        out.append(-torch.logsumexp(ends, dim=0))
    return torch.stack(out)


def ctc_loss(logits: Tensor, target, blank: int = 0) -> Tensor:
    """-log P(target | logits) for one sequence; logits: (T, C) with blank at index ``blank``."""
    if logits.dim() != 2:
        raise ShapeError(f"logits must be (T, C), got {tuple(logits.shape)}")
    lp = torch.log_softmax(logits, dim=-1)
    return ctc_loss_batch(lp[None], [logits.shape[0]], [list(target)], blank)[0]


def greedy_decode(logits: Tensor, length: int | None = None, blank: int = 0) -> list[int]:
    """Best-path decode: argmax per frame, merge repeats, drop blanks."""
    ids = logits[:length].argmax(dim=-1).tolist()
    out, prev = [], None
    for i in ids:
        if i != prev and i != blank:
            out.append(i)
        prev = i
    return out
