import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prosody_annotator.core import (
    BoundaryLabel,
    Corpus,
    CorpusParseError,
    CorpusValidationError,
    InvalidLabelSequence,
    ProsodyTree,
    TreeStructureError,
    Utterance,
    dumps_corpus,
    labels_to_tree,
    read_corpus,
    tree_to_labels,
    write_corpus,
)

CC, LW, PW, PPH, IPH = (BoundaryLabel[n] for n in ("CC", "LW", "PW", "PPH", "IPH"))


def test_label_order_and_size():
    assert list(BoundaryLabel) == [CC, LW, PW, PPH, IPH]
    assert CC < LW < PW < PPH < IPH
    assert len(BoundaryLabel) == 5


@pytest.mark.parametrize("root, expected", [
    # IPH{PPH{PW{LW[c1 c2], LW[c3]}, PW{LW[c4]}}}
    ([[[[[1, 2], [3]], [[4]]]]], [CC, LW, PW, IPH]),
    ([[[[[1]]]]], [IPH]),
    # one IPH with two single-character PPHs
    ([[[[[1]]], [[[2]]]]], [PPH, IPH]),
])
def test_tree_to_labels_examples(root, expected):
    assert tree_to_labels(ProsodyTree(root)) == expected


@pytest.mark.parametrize("root", [
    [],
    [[]],
    [[[[[]]]]],
    [[[[[1, 2], []]]]],
    [[[[1]]]],  # leaf at depth 4
])
def test_malformed_tree(root):
    with pytest.raises(TreeStructureError):
        tree_to_labels(ProsodyTree(root))


def test_labels_to_tree_examples():
    tree = labels_to_tree([1, 2, 3, 4], [CC, LW, PW, IPH])
    assert tree.root == [[[[[1, 2], [3]], [[4]]]]]
    assert labels_to_tree([1], [IPH]).root == [[[[[1]]]]]
    with pytest.raises(InvalidLabelSequence):
        labels_to_tree([1, 2], [CC, LW])
    with pytest.raises(InvalidLabelSequence):
        labels_to_tree([1, 2], [IPH])


label_seqs = st.lists(st.integers(0, 4), min_size=0, max_size=40).map(lambda xs: xs + [4])


@given(label_seqs)
@settings(max_examples=300, deadline=None)
def test_round_trip_labels(labels):
    tokens = list(range(len(labels)))
    tree = labels_to_tree(tokens, labels)
    assert tree_to_labels(tree) == labels
    assert tree.leaves() == tokens


def _utt(uid="u0", f=3, seed=0):
    rng = np.random.default_rng(seed)
    frames = rng.standard_normal((7, f)) * 1e-3 + 1 / 3
    return Utterance(uid, [4, 9], [int(LW), int(IPH)], frames, [(0, 3), (3, 5)], [2, 2, 2, 5, 5, 0, 0])


def test_corpus_round_trip(tmp_path):
    c = Corpus([_utt("a", seed=1), _utt("b", seed=2), _utt("c", seed=3)], 10, 6, 3)
    p = tmp_path / "c.jsonl"
    write_corpus(c, p)
    back = read_corpus(p)
    assert [u.id for u in back] == ["a", "b", "c"]
    for u, v in zip(c, back):
        assert u.tokens == v.tokens and u.labels == v.labels
        assert u.token_spans == v.token_spans and u.frame_phones == v.frame_phones
        assert np.array_equal(u.frames, v.frames)  # bit-exact floats
    assert dumps_corpus(back) == p.read_text()


def test_empty_file_is_empty_corpus(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    assert len(read_corpus(p)) == 0


def test_header_format(tmp_path):
    p = tmp_path / "c.jsonl"
    write_corpus(Corpus([_utt()], 10, 6, 3), p)
    head = json.loads(p.read_text().splitlines()[0])
    assert head == {"vocab_size": 10, "phone_count": 6, "feature_dim": 3, "format_version": 1}


def test_length_mismatch_is_validation_error(tmp_path):
    p = tmp_path / "c.jsonl"
    write_corpus(Corpus([_utt("bad")], 10, 6, 3), p)
    lines = p.read_text().splitlines()
    obj = json.loads(lines[1])
    obj["labels"] = [4]
    p.write_text(lines[0] + "\n" + json.dumps(obj) + "\n")
    with pytest.raises(CorpusValidationError, match="bad"):
        read_corpus(p)


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "c.jsonl"
    write_corpus(Corpus([_utt()], 10, 6, 3), p)
    p.write_text(p.read_text() + "{not json\n")
    with pytest.raises(CorpusParseError) as err:
        read_corpus(p)
    assert err.value.lineno == 3


@pytest.mark.parametrize("mutate", [
    lambda u: setattr(u, "labels", [1, 2]),  # final label not IPH
    lambda u: setattr(u, "token_spans", [(0, 3), (2, 5)]),  # overlap
    lambda u: setattr(u, "frame_phones", [2, 2, 2, 5, 5, 0, 3]),  # speech outside spans
])
def test_utterance_invariants(mutate):
    u = _utt()
    mutate(u)
    with pytest.raises(CorpusValidationError):
        u.validate()
