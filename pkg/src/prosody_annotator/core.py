"""Boundary labels, triplet utterances, prosody trees and the JSONL corpus format."""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1


class ProsodyError(Exception):
    """Base class for all package errors."""


class TreeStructureError(ProsodyError):
    pass


class InvalidLabelSequence(ProsodyError):
    pass


class CorpusParseError(ProsodyError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class CorpusValidationError(ProsodyError):
    def __init__(self, utt_id: str, msg: str):
        super().__init__(f"utterance {utt_id!r}: {msg}")
        self.utt_id = utt_id


class BoundaryLabel(enum.IntEnum):
    """Strength of the break after a character, weakest first."""

    CC = 0
    LW = 1
    PW = 2
    PPH = 3
    IPH = 4


NUM_LABELS = len(BoundaryLabel)
REPORTED_LEVELS = (BoundaryLabel.LW, BoundaryLabel.PW, BoundaryLabel.PPH, BoundaryLabel.IPH)


# ---------------------------------------------------------------------------
# trees

@dataclass
class ProsodyTree:
    """Nested lists IPH -> PPH -> PW -> LW -> token ids.

    ``root`` is the list of intonational phrases; leaves are token ids and
    always sit at depth 5.
    """

    root: list

    def leaves(self) -> list[int]:
        out: list[int] = []
        for iph in self.root:
            for pph in iph:
                for pw in pph:
                    for lw in pw:
                        out.extend(lw)
        return out


def _check_node(node, depth: int) -> None:
    if not isinstance(node, (list, tuple)):
        raise TreeStructureError(f"expected a list at depth {depth}, got {type(node).__name__}")
    if len(node) == 0:
        raise TreeStructureError(f"empty constituent at depth {depth}")
    if depth == 4:
        for leaf in node:
            if isinstance(leaf, (list, tuple)):
                raise TreeStructureError("leaves must sit at uniform depth 5")
        return
    for child in node:
        _check_node(child, depth + 1)


def tree_to_labels(tree: ProsodyTree) -> list[BoundaryLabel]:
    """Flatten a tree: each leaf gets the level of the largest constituent closing after it."""
    _check_node(tree.root, 0)
    labels: list[BoundaryLabel] = []
    # levels indexed so that closing the last child at depth d ends a constituent of level 4 - d
    for i, iph in enumerate(tree.root):
        for j, pph in enumerate(iph):
            for k, pw in enumerate(pph):
                for m, lw in enumerate(pw):
                    for _ in lw[:-1]:
                        labels.append(BoundaryLabel.CC)
                    if m < len(pw) - 1:
                        labels.append(BoundaryLabel.LW)
                    elif k < len(pph) - 1:
                        labels.append(BoundaryLabel.PW)
                    elif j < len(iph) - 1:
                        labels.append(BoundaryLabel.PPH)
                    else:
                        labels.append(BoundaryLabel.IPH)
    return labels


def labels_to_tree(tokens: Sequence[int], labels: Sequence[int]) -> ProsodyTree:
    if len(tokens) != len(labels):
        raise InvalidLabelSequence(f"{len(tokens)} tokens but {len(labels)} labels")
    if len(tokens) == 0:
        raise InvalidLabelSequence("empty sequence")
    labels = [BoundaryLabel(int(x)) for x in labels]
    if labels[-1] != BoundaryLabel.IPH:
        raise InvalidLabelSequence(f"last label must be IPH, got {labels[-1].name}")

    root: list = []
    iph: list = []
    pph: list = []
    pw: list = []
    lw: list = []
    for tok, lab in zip(tokens, labels):
        lw.append(int(tok))
        if lab >= BoundaryLabel.LW:
            pw.append(lw)
            lw = []
        if lab >= BoundaryLabel.PW:
            pph.append(pw)
            pw = []
        if lab >= BoundaryLabel.PPH:
            iph.append(pph)
            pph = []
        if lab >= BoundaryLabel.IPH:
            root.append(iph)
            iph = []
    return ProsodyTree(root)


def validate_labels(labels: Sequence[int]) -> None:
    if len(labels) == 0:
        raise InvalidLabelSequence("empty label sequence")
    for x in labels:
        if not 0 <= int(x) < NUM_LABELS:
            raise InvalidLabelSequence(f"label {x} outside 0..{NUM_LABELS - 1}")
    if int(labels[-1]) != BoundaryLabel.IPH:
        raise InvalidLabelSequence("last label must be IPH")


# ---------------------------------------------------------------------------
# utterances and corpora

@dataclass
class Utterance:
    id: str
    tokens: list[int]
    labels: list[int]
    frames: np.ndarray  # (T, F) float64
    token_spans: list[tuple[int, int]]
    frame_phones: list[int]

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    def validate(self, token_to_phone=None) -> None:
        """Raise CorpusValidationError on the first broken invariant.

        ``token_to_phone`` (optional callable) enables the check that speech
        frames carry the phone of their token.
        """
        uid = self.id
        n = len(self.tokens)
        if n == 0:
            raise CorpusValidationError(uid, "no tokens")
        if len(self.labels) != n:
            raise CorpusValidationError(uid, f"{n} tokens but {len(self.labels)} labels")
        if len(self.token_spans) != n:
            raise CorpusValidationError(uid, f"{n} tokens but {len(self.token_spans)} spans")
        try:
            validate_labels(self.labels)
        except InvalidLabelSequence as exc:
            raise CorpusValidationError(uid, str(exc)) from None
        if self.frames.ndim != 2:
            raise CorpusValidationError(uid, "frames must be a T x F matrix")
        t = self.frames.shape[0]
        if len(self.frame_phones) != t:
            raise CorpusValidationError(uid, f"{t} frames but {len(self.frame_phones)} frame phones")
        covered = np.zeros(t, dtype=bool)
        prev_end = 0
        for i, (s, e) in enumerate(self.token_spans):
            if not (prev_end <= s < e <= t):
                raise CorpusValidationError(uid, f"span {i} = [{s},{e}) is empty, overlapping or out of order")
            covered[s:e] = True
            prev_end = e
            if token_to_phone is not None:
                ph = token_to_phone(self.tokens[i])
                if any(self.frame_phones[f] != ph for f in range(s, e)):
                    raise CorpusValidationError(uid, f"frames of token {i} do not carry its phone")
        phones = np.asarray(self.frame_phones)
        if np.any(phones[~covered] != 0):
            raise CorpusValidationError(uid, "frames outside token spans must be silence (phone 0)")


@dataclass
class Corpus:
    utterances: list[Utterance] = field(default_factory=list)
    vocab_size: int = 0
    phone_count: int = 0
    feature_dim: int = 0

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def subset(self, ids: Iterable[str]) -> "Corpus":
        wanted = set(ids)
        return Corpus([u for u in self.utterances if u.id in wanted],
                      self.vocab_size, self.phone_count, self.feature_dim)

    def validate(self) -> None:
        for u in self.utterances:
            u.validate()
            if u.frames.shape[1] != self.feature_dim:
                raise CorpusValidationError(u.id, f"feature dim {u.frames.shape[1]} != {self.feature_dim}")
            if any(not 0 <= t < self.vocab_size for t in u.tokens):
                raise CorpusValidationError(u.id, f"token id outside [0, {self.vocab_size})")
            # phone ids are 1..phone_count, with 0 reserved for silence
            if any(not 0 <= p <= self.phone_count for p in u.frame_phones):
                raise CorpusValidationError(u.id, f"phone id outside [0, {self.phone_count}]")


def _float_repr(x: float) -> str:
    # repr gives the shortest string that round-trips a double
    return repr(float(x))


def _utterance_line(u: Utterance) -> str:
    frames = "[" + ",".join("[" + ",".join(_float_repr(v) for v in row) + "]" for row in u.frames) + "]"
    head = json.dumps({"id": u.id, "tokens": [int(t) for t in u.tokens],
                       "labels": [int(x) for x in u.labels]}, separators=(",", ":"))
    tail = json.dumps({"token_spans": [[int(s), int(e)] for s, e in u.token_spans],
                       "frame_phones": [int(p) for p in u.frame_phones]}, separators=(",", ":"))
    return head[:-1] + ',"frames":' + frames + "," + tail[1:]


def dumps_corpus(corpus: Corpus) -> str:
    header = json.dumps({"vocab_size": corpus.vocab_size, "phone_count": corpus.phone_count,
                         "feature_dim": corpus.feature_dim, "format_version": FORMAT_VERSION},
                        separators=(",", ":"))
    lines = [header] + [_utterance_line(u) for u in corpus.utterances]
    return "\n".join(lines) + "\n"


def write_corpus(corpus: Corpus, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_corpus(corpus))


_REQUIRED = ("id", "tokens", "labels", "frames", "token_spans", "frame_phones")


def parse_utterance(obj: dict, lineno: int = 0) -> Utterance:
    missing = [k for k in _REQUIRED if k not in obj]
    if missing:
        raise CorpusParseError(lineno, f"missing keys {missing}")
    try:
        frames = np.asarray(obj["frames"], dtype=np.float64)
        if frames.size == 0:
            frames = frames.reshape(0, 0)
        return Utterance(
            id=str(obj["id"]),
            tokens=[int(t) for t in obj["tokens"]],
            labels=[int(x) for x in obj["labels"]],
            frames=frames,
            token_spans=[(int(s), int(e)) for s, e in obj["token_spans"]],
            frame_phones=[int(p) for p in obj["frame_phones"]],
        )
    except (TypeError, ValueError) as exc:
        raise CorpusParseError(lineno, f"bad field value: {exc}") from None


def read_corpus(path: str | os.PathLike) -> Corpus:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    lines = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip()]
    if not lines:
        return Corpus()
    lineno, first = lines[0]
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise CorpusParseError(lineno, f"invalid JSON header: {exc.msg}") from None
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise CorpusParseError(lineno, "header must carry format_version 1")
    try:
        corpus = Corpus([], int(header["vocab_size"]), int(header["phone_count"]), int(header["feature_dim"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusParseError(lineno, f"bad header: {exc}") from None
    for lineno, line in lines[1:]:
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusParseError(lineno, f"invalid JSON: {exc.msg}") from None
        if not isinstance(obj, dict):
            raise CorpusParseError(lineno, "expected a JSON object")
        corpus.utterances.append(parse_utterance(obj, lineno))
    corpus.validate()
    return corpus
