"""Synthetic {speech, text, prosody} corpora.

Text is a stream of toy "characters" drawn uniformly from ``vocab_size`` ids.
Several characters share one phone (``phone = 1 + token % phone_count``), so
the phone sequence alone never identifies the text. Boundaries are built
bottom-up: characters are grouped into lexicon words, words into prosodic
words, and so on, each group size drawn from a uniform children-count range.
Lexicon-word and intonational-phrase grouping is a fixed function of the
characters (a lexicon / punctuation analogue). Prosodic word and phrase
grouping follow the characters only with probability ``1 - p_ambig``; otherwise
they are drawn at random, so the same text admits several prosodies and only
the audio can tell them apart.

Audio is a sequence of feature frames: each phone has a fixed random template,
feature 0 carries a declining pitch contour reset at phrase boundaries,
characters before a PW-or-stronger boundary are lengthened, and PPH/IPH
boundaries are followed by silence.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, asdict, field, fields
from functools import lru_cache

import numpy as np

from .core import BoundaryLabel, Corpus, ProsodyError, Utterance


class GenConfigError(ProsodyError):
    pass


@dataclass(frozen=True)
class GenConfig:
    vocab_size: int = 60
    phone_count: int = 20
    feature_dim: int = 16
    min_tokens: int = 10
    max_tokens: int = 40
    # children-count ranges (inclusive) per constituent level
    lw_children: tuple[int, int] = (1, 3)   # characters per lexicon word
    pw_children: tuple[int, int] = (1, 3)   # lexicon words per prosodic word
    pph_children: tuple[int, int] = (1, 3)  # prosodic words per prosodic phrase
    iph_children: tuple[int, int] = (1, 3)  # prosodic phrases per intonational phrase
    p_ambig: float = 0.5
    d_base: int = 6
    lengthening: int = 3
    jitter: int = 1
    n_pph: int = 3
    n_iph: int = 6
    pitch_reset: float = 0.5
    pitch_slope: float = 0.01
    noise: float = 0.3
    speaker_scale: float = 0.2
    train_speakers: int = 28
    test_speakers: int = 9
    n_utterances: int = 2100
    dev_fraction: float = 0.05
    n_dev: int | None = None
    n_test: int = 500
    seed: int = 0

    def __post_init__(self):
        # tuples arrive as lists from config files
        for name in ("lw_children", "pw_children", "pph_children", "iph_children"):
            object.__setattr__(self, name, tuple(int(x) for x in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if not 0 < self.phone_count < self.vocab_size:
            raise GenConfigError("need 0 < phone_count < vocab_size so that homophones exist")
        if self.feature_dim < 1:
            raise GenConfigError("feature_dim must be >= 1")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise GenConfigError("need 1 <= min_tokens <= max_tokens")
        for name in ("lw_children", "pw_children", "pph_children", "iph_children"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise GenConfigError(f"{name} must satisfy 1 <= min <= max, got {(lo, hi)}")
        if not 0.0 <= self.p_ambig <= 1.0:
            raise GenConfigError("p_ambig must lie in [0, 1]")
        if self.d_base < 1 or self.lengthening < 0 or self.jitter < 0 or self.jitter >= self.d_base:
            raise GenConfigError("need d_base >= 1, lengthening >= 0 and 0 <= jitter < d_base")
        if not 0 <= self.n_pph <= self.n_iph:
            raise GenConfigError("pause lengths must be non-decreasing in level (0 <= n_pph <= n_iph)")
        if self.noise < 0:
            raise GenConfigError("noise must be >= 0")
        if self.n_utterances < 0 or self.n_test < 0:
            raise GenConfigError("utterance counts must be >= 0")
        if not 0.0 <= self.dev_fraction <= 1.0:
            raise GenConfigError("dev_fraction must lie in [0, 1]")
        if self.n_dev is not None and not 0 <= self.n_dev <= self.n_utterances:
            raise GenConfigError("n_dev must lie in [0, n_utterances]")
        if self.train_speakers < 1 or self.test_speakers < 1:
            raise GenConfigError("need at least one speaker per range")

    def replace(self, **changes) -> "GenConfig":
        d = asdict(self)
        d.update(changes)
        return GenConfig(**d)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------------------
# lexicon

def char_to_phone(token_id: int, config: GenConfig) -> int:
    if not 0 <= token_id < config.vocab_size:
        raise GenConfigError(f"token {token_id} outside [0, {config.vocab_size})")
    return 1 + token_id % config.phone_count


def _seed_words(*parts: int) -> list[int]:
    return [int(p) & 0xFFFFFFFF for p in parts]


@lru_cache(maxsize=32)
def _size_tables(vocab_size: int, seed: int, ranges: tuple) -> tuple[np.ndarray, ...]:
    """Per-level lookup token -> group size, as balanced as the vocabulary allows."""
    tables = []
    for level, (lo, hi) in enumerate(ranges):
        rng = np.random.default_rng(_seed_words(seed, 0x7AB1E, level))
        span = hi - lo + 1
        table = lo + np.arange(vocab_size) % span
        rng.shuffle(table)
        tables.append(table)
    return tuple(tables)


def _tables(config: GenConfig):
    ranges = (config.lw_children, config.pw_children, config.pph_children, config.iph_children)
    return _size_tables(config.vocab_size, config.seed, ranges)


# ---------------------------------------------------------------------------
# prosody

def _group(n_items: int, first_tokens: list[int], size_for) -> list[int]:
    """Partition ``n_items`` consecutive items; returns the index of the last item of each group."""
    ends = []
    start = 0
    while start < n_items:
        size = size_for(first_tokens[start])
        end = min(start + size, n_items) - 1
        ends.append(end)
        start = end + 1
    return ends


def sample_prosody(tokens, config: GenConfig, rng: np.random.Generator) -> list[int]:
    """Draw a boundary label per token; the last one is always IPH."""
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise ValueError("cannot sample prosody for an empty token sequence")
    lw_t, pw_t, pph_t, iph_t = _tables(config)
    p = config.p_ambig

    def ambiguous(table, lo_hi):
        lo, hi = lo_hi

        def size_for(tok):
            if p > 0 and rng.random() < p:
                return int(rng.integers(lo, hi + 1))
            return int(table[tok])
        return size_for

    labels = [int(BoundaryLabel.CC)] * len(tokens)
    # items at each level are identified by the token index of their last character
    item_last = list(range(len(tokens)))
    item_first = list(range(len(tokens)))
    steps = (
        (BoundaryLabel.LW, lambda tok: int(lw_t[tok])),
        (BoundaryLabel.PW, ambiguous(pw_t, config.pw_children)),
        (BoundaryLabel.PPH, ambiguous(pph_t, config.pph_children)),
        (BoundaryLabel.IPH, lambda tok: int(iph_t[tok])),
    )
    for level, size_for in steps:
        firsts = [tokens[i] for i in item_first]
        ends = _group(len(item_last), firsts, size_for)
        starts = [0] + [e + 1 for e in ends[:-1]]
        new_first = [item_first[s] for s in starts]
        item_last = [item_last[e] for e in ends]
        item_first = new_first
        for i in item_last:
            labels[i] = int(level)
    # whatever remains is closed by the utterance end
    labels[-1] = int(BoundaryLabel.IPH)
    return labels


# ---------------------------------------------------------------------------
# audio

@lru_cache(maxsize=32)
def _phone_templates(phone_count: int, feature_dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(_seed_words(seed, 0x7E3F))
    t = rng.standard_normal((phone_count + 1, feature_dim))
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    t.setflags(write=False)
    return t


def phone_templates(config: GenConfig) -> np.ndarray:
    """Row p is the template of phone p; row 0 is silence."""
    return _phone_templates(config.phone_count, config.feature_dim, config.seed)


def speaker_offset(config: GenConfig, speaker: int) -> np.ndarray:
    rng = np.random.default_rng(_seed_words(config.seed, 0x5BEA, speaker))
    return config.speaker_scale * rng.standard_normal(config.feature_dim) / np.sqrt(config.feature_dim)


def render_audio(tokens, labels, config: GenConfig, rng: np.random.Generator,
                 offset: np.ndarray | None = None):
    """Return ``(frames, token_spans, frame_phones)`` for one utterance."""
    templates = phone_templates(config)
    if offset is not None:
        templates = templates + offset[None, :]
    rows: list[np.ndarray] = []
    phones: list[int] = []
    spans: list[tuple[int, int]] = []
    since_reset = 0
    for tok, lab in zip(tokens, labels):
        dur = config.d_base + (config.lengthening if lab >= BoundaryLabel.PW else 0)
        if config.jitter:
            dur += int(rng.integers(-config.jitter, config.jitter + 1))
        ph = char_to_phone(int(tok), config)
        start = len(phones)
        block = np.repeat(templates[ph][None, :], dur, axis=0)
        block[:, 0] += config.pitch_reset - config.pitch_slope * (since_reset + np.arange(dur))
        rows.append(block)
        phones.extend([ph] * dur)
        spans.append((start, start + dur))
        since_reset += dur
        if lab >= BoundaryLabel.PPH:
            pause = config.n_iph if lab == BoundaryLabel.IPH else config.n_pph
            if pause:
                rows.append(np.repeat(templates[0][None, :], pause, axis=0))
                phones.extend([0] * pause)
            since_reset = 0
    frames = np.concatenate(rows, axis=0)
    if config.noise > 0:
        frames = frames + config.noise * rng.standard_normal(frames.shape)
    return frames, spans, phones


# ---------------------------------------------------------------------------
# corpora

TRAIN_STREAM = 0
TEST_STREAM = 1


def utterance_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(_seed_words(seed, stream, index))


def generate_utterance(config: GenConfig, stream: int, index: int) -> Utterance:
    rng = utterance_rng(config.seed, stream, index)
    if stream == TEST_STREAM:
        # unseen speakers: ids above the training range
        speaker = config.train_speakers + int(rng.integers(config.test_speakers))
        prefix = "test"
    else:
        speaker = int(rng.integers(config.train_speakers))
        prefix = "utt"
    n = int(rng.integers(config.min_tokens, config.max_tokens + 1))
    tokens = [int(t) for t in rng.integers(0, config.vocab_size, size=n)]
    labels = sample_prosody(tokens, config, rng)
    frames, spans, phones = render_audio(tokens, labels, config, rng, speaker_offset(config, speaker))
    return Utterance(f"{prefix}{index:06d}", tokens, labels, frames, spans, phones)


@dataclass
class SplitCorpus:
    train: Corpus
    dev: Corpus
    test: Corpus
    splits: dict = field(default_factory=dict)

    def items(self):
        return (("train", self.train), ("dev", self.dev), ("test", self.test))


def _empty(config: GenConfig) -> Corpus:
    return Corpus([], config.vocab_size, config.phone_count, config.feature_dim)


def generate_corpus(config: GenConfig) -> SplitCorpus:
    config.validate()
    n = config.n_utterances
    n_dev = config.n_dev if config.n_dev is not None else int(round(n * config.dev_fraction))
    # dev membership is a fixed pseudo-random choice of indices
    perm = np.random.default_rng(_seed_words(config.seed, 0xDE5)).permutation(n)
    dev_idx = set(int(i) for i in perm[:n_dev])
    out = SplitCorpus(_empty(config), _empty(config), _empty(config))
    for i in range(n):
        u = generate_utterance(config, TRAIN_STREAM, i)
        (out.dev if i in dev_idx else out.train).utterances.append(u)
    for i in range(config.n_test):
        out.test.utterances.append(generate_utterance(config, TEST_STREAM, i))
    out.splits = {name: [u.id for u in c.utterances] for name, c in out.items()}
    return out


def corpus_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
