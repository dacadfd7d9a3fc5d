"""Padding, masks and length-bucketed batching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import Corpus, Utterance


@dataclass
class Batch:
    ids: list[str]
    tokens: torch.Tensor  # (B, N) long
    token_mask: torch.Tensor  # (B, N) bool
    labels: torch.Tensor  # (B, N) long, 0 where padded
    frames: torch.Tensor  # (B, T, F)
    frame_mask: torch.Tensor  # (B, T) bool
    frame_phones: torch.Tensor  # (B, T) long
    frame_chars: torch.Tensor  # (B, T) long: token id + 1 inside spans, 0 elsewhere
    token_lists: list[list[int]]

    def __len__(self) -> int:
        return len(self.ids)


def frame_char_targets(u: Utterance) -> list[int]:
    out = [0] * u.num_frames
    for tok, (s, e) in zip(u.tokens, u.token_spans):
        out[s:e] = [int(tok) + 1] * (e - s)
    return out


def collate(utts: list[Utterance], dtype=torch.float32) -> Batch:
    b = len(utts)
    n = max(len(u.tokens) for u in utts)
    t = max(u.num_frames for u in utts)
    f = utts[0].frames.shape[1]
    tokens = torch.zeros(b, n, dtype=torch.long)
    labels = torch.zeros(b, n, dtype=torch.long)
    tmask = torch.zeros(b, n, dtype=torch.bool)
    frames = torch.zeros(b, t, f, dtype=dtype)
    fmask = torch.zeros(b, t, dtype=torch.bool)
    phones = torch.zeros(b, t, dtype=torch.long)
    chars = torch.zeros(b, t, dtype=torch.long)
    for i, u in enumerate(utts):
        k, m = len(u.tokens), u.num_frames
        tokens[i, :k] = torch.tensor(u.tokens)
        labels[i, :k] = torch.tensor(u.labels)
        tmask[i, :k] = True
        frames[i, :m] = torch.from_numpy(np.asarray(u.frames)).to(dtype)
        fmask[i, :m] = True
        phones[i, :m] = torch.tensor(u.frame_phones)
        chars[i, :m] = torch.tensor(frame_char_targets(u))
    return Batch([u.id for u in utts], tokens, tmask, labels, frames, fmask, phones, chars,
                 [list(u.tokens) for u in utts])


def bucket_batches(corpus: Corpus | list[Utterance], batch_size: int,
                   rng: np.random.Generator | None = None) -> list[list[Utterance]]:
    """Group utterances of similar frame length; shuffle batch order when ``rng`` is given."""
    utts = list(corpus)
    order = sorted(range(len(utts)), key=lambda i: (utts[i].num_frames, utts[i].id))
    if rng is not None:
        # jitter within length neighbourhoods so batches differ between epochs
        keys = np.array([utts[i].num_frames for i in order], dtype=float)
        keys = keys + rng.uniform(0, 8, size=len(keys))
        order = [order[j] for j in np.argsort(keys, kind="stable")]
    groups = [[utts[i] for i in order[s:s + batch_size]] for s in range(0, len(order), batch_size)]
    if rng is not None:
        perm = rng.permutation(len(groups))
        groups = [groups[j] for j in perm]
    return groups
