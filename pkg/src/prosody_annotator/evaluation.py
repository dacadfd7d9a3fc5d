"""Per-level precision/recall/F1, kappa statistics, disagreement sampling and reports."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from .core import BoundaryLabel, NUM_LABELS, ProsodyError, REPORTED_LEVELS


class LengthMismatch(ProsodyError, ValueError):
    pass


class UndefinedKappa(ProsodyError, ValueError):
    pass


class MisalignedAnnotations(ProsodyError, ValueError):
    pass


# ---------------------------------------------------------------------------
# precision / recall / f1

@dataclass
class ConfusionCounts:
    tp: np.ndarray = field(default_factory=lambda: np.zeros(NUM_LABELS, dtype=np.int64))
    ref: np.ndarray = field(default_factory=lambda: np.zeros(NUM_LABELS, dtype=np.int64))
    hyp: np.ndarray = field(default_factory=lambda: np.zeros(NUM_LABELS, dtype=np.int64))

    def add(self, ref: Sequence[int], hyp: Sequence[int]) -> "ConfusionCounts":
        if len(ref) != len(hyp):
            raise LengthMismatch(f"reference has {len(ref)} labels, hypothesis {len(hyp)}")
        r = np.asarray(ref, dtype=np.int64)
        h = np.asarray(hyp, dtype=np.int64)
        self.ref += np.bincount(r, minlength=NUM_LABELS)
        self.hyp += np.bincount(h, minlength=NUM_LABELS)
        self.tp += np.bincount(r[r == h], minlength=NUM_LABELS)
        return self

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.ref + other.ref, self.hyp + other.hyp)

    def scores(self) -> dict[str, dict]:
        out = {}
        for level in REPORTED_LEVELS:
            tp, r, h = int(self.tp[level]), int(self.ref[level]), int(self.hyp[level])
            p = tp / h if h else 0.0
            rec = tp / r if r else 0.0
            f1 = 2 * p * rec / (p + rec) if p + rec else 0.0
            out[level.name] = {"precision": p, "recall": rec, "f1": f1, "absent": r == 0 and h == 0}
        return out


def confusion(refs, hyps) -> ConfusionCounts:
    """Counts over aligned corpora (lists of label sequences)."""
    if len(refs) != len(hyps):
        raise LengthMismatch(f"{len(refs)} reference utterances vs {len(hyps)} hypotheses")
    c = ConfusionCounts()
    for r, h in zip(refs, hyps):
        c.add(r, h)
    return c


def prf1(ref: Sequence[int], hyp: Sequence[int]) -> dict[str, dict]:
    """Precision, recall and F1 per reported level (LW, PW, PPH, IPH) on exact label match."""
    return ConfusionCounts().add(ref, hyp).scores()


# ---------------------------------------------------------------------------
# agreement

def binarize(labels: Sequence[int], level: int, at_least: bool = False) -> np.ndarray:
    a = np.asarray(labels, dtype=np.int64)
    return (a >= level) if at_least else (a == level)


def cohen_kappa(a: Sequence[int], b: Sequence[int], level: int, at_least: bool = False) -> float:
    if len(a) != len(b):
        raise LengthMismatch(f"annotations differ in length: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise UndefinedKappa("no items")
    x = binarize(a, level, at_least)
    y = binarize(b, level, at_least)
    p_o = float(np.mean(x == y))
    pa, pb = float(np.mean(x)), float(np.mean(y))
    p_e = pa * pb + (1 - pa) * (1 - pb)
    if p_e == 1.0:
        raise UndefinedKappa("chance agreement is 1 (both annotators use a single category)")
    return (p_o - p_e) / (1 - p_e)


AnnotationSet = Mapping[str, Mapping[str, Sequence[int]]]


def _aligned_matrix(annotations: AnnotationSet, level: int, at_least: bool) -> np.ndarray:
    """(items, raters) boolean matrix; items are token positions across utterances."""
    raters = list(annotations)
    if len(raters) < 2:
        raise MisalignedAnnotations("need at least two annotators")
    utt_ids = sorted(annotations[raters[0]])
    cols = []
    for r in raters:
        ann = annotations[r]
        if sorted(ann) != utt_ids:
            raise MisalignedAnnotations(f"annotator {r!r} covers a different set of utterances")
        seq = []
        for uid in utt_ids:
            if len(ann[uid]) != len(annotations[raters[0]][uid]):
                raise MisalignedAnnotations(f"utterance {uid!r}: annotator {r!r} has a different length")
            seq.extend(ann[uid])
        cols.append(binarize(seq, level, at_least))
    return np.stack(cols, axis=1)


def fleiss_kappa(annotations: AnnotationSet, level: int, at_least: bool = False) -> float:
    """Fleiss' kappa over token positions for the binary category 'label == level'."""
    m = _aligned_matrix(annotations, level, at_least)
    n_items, n_raters = m.shape
    if n_items == 0:
        raise UndefinedKappa("no items")
    counts = np.stack([(~m).sum(axis=1), m.sum(axis=1)], axis=1).astype(float)
    p_i = (np.sum(counts * counts, axis=1) - n_raters) / (n_raters * (n_raters - 1))
    p_bar = p_i.mean()
    p_j = counts.sum(axis=0) / (n_items * n_raters)
    p_e = float(np.sum(p_j * p_j))
    if p_e == 1.0:
        raise UndefinedKappa("every rating falls in one category")
    return float((p_bar - p_e) / (1 - p_e))


def pairwise_cohen(annotations: AnnotationSet, level: int, at_least: bool = False):
    """Symmetric annotator x annotator matrix of Cohen's kappa (NaN where undefined)."""
    raters = list(annotations)
    m = _aligned_matrix(annotations, level, at_least)
    k = np.eye(len(raters))
    for i, j in combinations(range(len(raters)), 2):
        try:
            v = cohen_kappa(m[:, i].astype(int), m[:, j].astype(int), 1)
        except UndefinedKappa:
            v = float("nan")
        k[i, j] = k[j, i] = v
    return raters, k


# ---------------------------------------------------------------------------
# annotation files

def read_annotations(path: str | os.PathLike, key: str = "labels") -> dict[str, list[int]]:
    """Read ``{id: labels}`` from annotation JSONL (or ``ref_labels`` with key=...)."""
    out: dict[str, list[int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if "format_version" in obj and "id" not in obj:
                continue  # corpus header
            if "id" not in obj or key not in obj:
                raise MisalignedAnnotations(f"{path}:{lineno}: missing 'id' or {key!r}")
            if obj["id"] in out:
                raise MisalignedAnnotations(f"{path}:{lineno}: duplicate id {obj['id']!r}")
            out[str(obj["id"])] = [int(x) for x in obj[key]]
    return out


def write_annotations(path, labels: Mapping[str, Sequence[int]],
                      ref: Mapping[str, Sequence[int]] | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for uid, lab in labels.items():
            rec = {"id": uid, "labels": [int(x) for x in lab]}
            if ref is not None:
                rec["ref_labels"] = [int(x) for x in ref[uid]]
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def align(ref: Mapping[str, Sequence[int]], hyp: Mapping[str, Sequence[int]]):
    if set(ref) != set(hyp):
        raise MisalignedAnnotations("reference and hypothesis cover different utterances")
    ids = sorted(ref)
    for uid in ids:
        if len(ref[uid]) != len(hyp[uid]):
            raise MisalignedAnnotations(f"utterance {uid!r}: {len(ref[uid])} vs {len(hyp[uid])} labels")
    return ids


def sample_disagreements(ref: Mapping[str, Sequence[int]], hyp: Mapping[str, Sequence[int]],
                         n: int, seed: int) -> list[str]:
    """Uniform sample (without replacement) of utterances where the annotations differ."""
    ids = align(ref, hyp)
    differing = [uid for uid in ids if list(ref[uid]) != list(hyp[uid])]
    k = min(n, len(differing))
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(differing), size=k, replace=False) if k else []
    return [differing[i] for i in picked]


# ---------------------------------------------------------------------------
# reports

METRIC_KEYS = ("precision", "recall", "f1")
SHORT = {"precision": "pre.", "recall": "rec.", "f1": "f1"}


@dataclass
class ReportRow:
    id: str
    model: str
    pretrained: str
    fixed: str
    scores: dict

    def cells(self) -> list[float]:
        return [self.scores[lv.name][k] for lv in REPORTED_LEVELS for k in METRIC_KEYS]

    def absent(self) -> list[str]:
        return [lv.name for lv in REPORTED_LEVELS if self.scores[lv.name].get("absent")]


def _header() -> list[str]:
    return ["ID", "Model", "Pre-trained", "Fixed"] + [
        f"{lv.name} {SHORT[k]}" for lv in REPORTED_LEVELS for k in METRIC_KEYS]


def report_markdown(rows: Sequence[ReportRow]) -> str:
    head = _header()
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in rows:
        vals = [f"{v:.2f}" for v in r.cells()]
        lines.append("| " + " | ".join([r.id, r.model, r.pretrained, r.fixed] + vals) + " |")
    notes = [f"row {r.id}: {', '.join(r.absent())}" for r in rows if r.absent()]
    if notes:
        lines += ["", "Levels absent from both reference and hypothesis (scored 0): " + "; ".join(notes)]
    return "\n".join(lines) + "\n"


def report_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_header())
    for r in rows:
        w.writerow([r.id, r.model, r.pretrained, r.fixed] + [repr(float(v)) for v in r.cells()])
    return buf.getvalue()


def report(rows: Sequence[ReportRow]) -> tuple[str, str]:
    """Render a results grid as (markdown, csv)."""
    if not rows:
        raise ValueError("report needs at least one row")
    return report_markdown(rows), report_csv(rows)


def kappa_csv(annotations: AnnotationSet, levels=(BoundaryLabel.PW, BoundaryLabel.PPH),
              at_least: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["level", "annotator"] + list(annotations))
    for level in levels:
        raters, k = pairwise_cohen(annotations, level, at_least)
        for name, row in zip(raters, k):
            w.writerow([BoundaryLabel(level).name, name] + [repr(float(v)) for v in row])
        try:
            fk = fleiss_kappa(annotations, level, at_least)
        except UndefinedKappa:
            fk = float("nan")
        w.writerow([BoundaryLabel(level).name, "fleiss"] + [repr(fk)] + [""] * (len(raters) - 1))
    return buf.getvalue()
