import numpy as np
import pytest

from prosody_annotator.core import BoundaryLabel, dumps_corpus
from prosody_annotator.synth import (
    GenConfig,
    GenConfigError,
    char_to_phone,
    generate_corpus,
    phone_templates,
    render_audio,
    sample_prosody,
)

CFG = GenConfig()


def test_char_to_phone():
    assert char_to_phone(0, CFG) == 1
    assert char_to_phone(0, CFG) == char_to_phone(CFG.phone_count, CFG)
    assert {char_to_phone(t, CFG) for t in range(CFG.vocab_size)} == set(range(1, CFG.phone_count + 1))
    with pytest.raises(GenConfigError):
        char_to_phone(CFG.vocab_size, CFG)


@pytest.mark.parametrize("changes", [
    dict(phone_count=60), dict(n_pph=7), dict(p_ambig=1.5), dict(pw_children=(0, 2)), dict(noise=-1.0),
])
def test_invalid_config(changes):
    with pytest.raises(GenConfigError):
        CFG.replace(**changes)


def test_prosody_deterministic_without_ambiguity():
    cfg = CFG.replace(p_ambig=0.0)
    toks = list(np.random.default_rng(3).integers(0, cfg.vocab_size, 30))
    a = sample_prosody(toks, cfg, np.random.default_rng(1))
    b = sample_prosody(toks, cfg, np.random.default_rng(2))
    assert a == b
    assert a[-1] == BoundaryLabel.IPH


def test_ambiguous_grouping_is_fair():
    # two lexicon words; the PW grouping is the only free choice:
    # {a}{b} -> [PPH, IPH] (one-PW phrases) or {a b} -> [LW, IPH]
    cfg = CFG.replace(p_ambig=1.0, lw_children=(1, 1), pw_children=(1, 2),
                      pph_children=(1, 1), iph_children=(3, 3))
    rng = np.random.default_rng(0)
    outcomes = [tuple(sample_prosody([5, 7], cfg, rng)) for _ in range(10_000)]
    assert set(outcomes) == {(int(BoundaryLabel.PPH), 4), (int(BoundaryLabel.LW), 4)}
    freq = outcomes.count((int(BoundaryLabel.LW), 4)) / len(outcomes)
    assert 0.48 <= freq <= 0.52


def test_last_label_is_iph():
    rng = np.random.default_rng(0)
    for n in range(1, 30):
        toks = rng.integers(0, CFG.vocab_size, n)
        labs = sample_prosody(toks, CFG, rng)
        assert len(labs) == n and labs[-1] == 4 and all(0 <= x <= 4 for x in labs)
    with pytest.raises(ValueError):
        sample_prosody([], CFG, rng)


def _group_count_matrix(n_max, lo, hi):
    """P[n, k]: probability that n items split into k groups (sizes uniform in [lo, hi], last truncated)."""
    p = np.zeros((n_max + 1, n_max + 1))
    p[0, 0] = 1.0
    w = 1.0 / (hi - lo + 1)
    for n in range(1, n_max + 1):
        for c in range(lo, hi + 1):
            if c >= n:
                p[n, 1] += w
            else:
                p[n, 1:] += w * p[n - c, :-1]
    return p


def _expected_label_frequencies(cfg):
    mats = [_group_count_matrix(cfg.max_tokens, *r)
            for r in (cfg.lw_children, cfg.pw_children, cfg.pph_children, cfg.iph_children)]
    totals = np.zeros(5)
    for n in range(cfg.min_tokens, cfg.max_tokens + 1):
        d = np.zeros(cfg.max_tokens + 1)
        d[n] = 1.0
        groups = [float(n)]
        for m in mats:
            d = d @ m
            groups.append(float(d @ np.arange(cfg.max_tokens + 1)))
        # a token carries label l when a level-l group ends there but no level-(l+1) group does
        totals += [groups[i] - groups[i + 1] for i in range(4)] + [groups[4]]
    return totals / totals.sum()


def test_label_marginals_match_grammar():
    expected = _expected_label_frequencies(CFG)
    counts = np.zeros(5)
    for i in range(10_000):
        rng = np.random.default_rng([11, i])
        n = int(rng.integers(CFG.min_tokens, CFG.max_tokens + 1))
        counts += np.bincount(sample_prosody(rng.integers(0, CFG.vocab_size, n), CFG, rng), minlength=5)
    observed = counts / counts.sum()
    assert np.all(np.abs(observed - expected) <= 0.02), (observed, expected)


def _conflict_rate(p_ambig):
    cfg = CFG.replace(p_ambig=p_ambig)
    rng = np.random.default_rng(5)
    conflicts = 0
    for _ in range(300):
        toks = rng.integers(0, cfg.vocab_size, 20)
        conflicts += sample_prosody(toks, cfg, rng) != sample_prosody(toks, cfg, rng)
    return conflicts / 300


def test_text_ambiguity_grows_with_p_ambig():
    r0, r5, r1 = (_conflict_rate(p) for p in (0.0, 0.5, 1.0))
    assert r0 == 0.0
    assert 0.0 < r5 < r1


def test_noise_free_frames_are_template_plus_pitch():
    cfg = CFG.replace(noise=0.0, jitter=0)
    toks = [3, 23, 4, 10]
    labs = [0, 3, 2, 4]
    frames, spans, phones = render_audio(toks, labs, cfg, np.random.default_rng(0))
    tmpl = phone_templates(cfg)
    since = 0
    for tok, lab, (s, e) in zip(toks, labs, spans):
        expect = np.repeat(tmpl[char_to_phone(tok, cfg)][None], e - s, axis=0)
        expect[:, 0] += cfg.pitch_reset - cfg.pitch_slope * (since + np.arange(e - s))
        assert np.array_equal(frames[s:e], expect)
        since = 0 if lab >= 3 else since + (e - s)
    # durations: base, base + lengthening for label >= PW
    assert [e - s for s, e in spans] == [6, 9, 9, 9]


def test_pauses_follow_phrase_boundaries():
    cfg = CFG.replace(noise=0.0)
    rng = np.random.default_rng(1)
    for _ in range(50):
        toks = rng.integers(0, cfg.vocab_size, 15)
        labs = sample_prosody(toks, cfg, rng)
        _, spans, phones = render_audio(toks, labs, cfg, rng)
        ends = [e for _, e in spans]
        starts = [s for s, _ in spans[1:]] + [len(phones)]
        for lab, e, nxt in zip(labs, ends, starts):
            gap = nxt - e
            want = {3: cfg.n_pph, 4: cfg.n_iph}.get(lab, 0)
            assert gap == want
            assert all(p == 0 for p in phones[e:nxt])


def test_lengthening_effect():
    cfg = CFG
    split = generate_corpus(cfg.replace(n_utterances=1000, n_test=0))
    long_, short = [], []
    for u in split.train.utterances + split.dev.utterances:
        for lab, (s, e) in zip(u.labels, u.token_spans):
            (long_ if lab >= BoundaryLabel.PW else short).append(e - s)
    diff = np.mean(long_) - np.mean(short)
    assert abs(diff - cfg.lengthening) <= 0.2


def _rule_decode(u, cfg):
    """Phrase boundaries from pause lengths alone (noise-free audio)."""
    out = []
    ends = [e for _, e in u.token_spans]
    nexts = [s for s, _ in u.token_spans[1:]] + [u.num_frames]
    for e, n in zip(ends, nexts):
        gap = n - e
        out.append(4 if gap == cfg.n_iph else 3 if gap == cfg.n_pph else None)
    return out


def test_phrase_boundaries_decodable_from_audio():
    cfg = CFG.replace(noise=0.0, n_utterances=200, n_test=0)
    split = generate_corpus(cfg)
    for u in split.train:
        decoded = _rule_decode(u, cfg)
        for lab, d in zip(u.labels, decoded):
            if lab >= 3:
                assert d == lab
            else:
                assert d is None


def test_corpus_determinism_and_splits():
    cfg = CFG.replace(n_utterances=40, n_test=10, seed=7)
    a, b = generate_corpus(cfg), generate_corpus(cfg)
    for (_, ca), (_, cb) in zip(a.items(), b.items()):
        assert dumps_corpus(ca) == dumps_corpus(cb)
    assert len(a.train) == 38 and len(a.dev) == 2 and len(a.test) == 10
    ids = [set(v) for v in a.splits.values()]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2])
    for _, c in a.items():
        c.validate()
        for u in c:
            u.validate(lambda t: char_to_phone(t, cfg))


def test_empty_corpus():
    s = generate_corpus(CFG.replace(n_utterances=0, n_test=0))
    assert len(s.train) == len(s.dev) == len(s.test) == 0
