import math

import numpy as np
import pytest
import torch

from conftest import FD_TOL, fd_max_rel_error
from prosody_annotator.core import Utterance
from prosody_annotator.data import collate
from prosody_annotator.encoders import ModelConfig
from prosody_annotator.fusion import (
    FusionDecoder,
    ProsodyAnnotator,
    annotate,
    argmax_low,
    ce_loss,
    ce_loss_logits,
    predict,
)
from prosody_annotator.nn import Linear, ShapeError
from prosody_annotator.core import ProsodyError

D = torch.float64
TINY = ModelConfig(vocab_size=9, phone_count=3, feature_dim=4, d_text=4, text_heads=1, d_audio=4,
                   audio_heads=1, conformer_blocks=1, conv_kernel=3, cnn_channels=1, d_model=4,
                   dec_heads=1, audio_layers=1, cross_layers=1, d_ff=6, max_tokens=12)


def _gen(seed=0):
    return torch.Generator().manual_seed(seed)


# ---------------------------------------------------------------------------
# scalar-loop reference for the decoder

def _w(p):
    return p.detach().tolist()


def _lin(rows, lin):
    w, b = _w(lin.weight), _w(lin.bias)
    return [[sum(w[o][i] * r[i] for i in range(len(r))) + b[o] for o in range(len(w))] for r in rows]


def _ln(rows, ln, eps=1e-5):
    g, b = _w(ln.weight), _w(ln.bias)
    out = []
    for r in rows:
        mu = sum(r) / len(r)
        var = sum((x - mu) ** 2 for x in r) / len(r)
        out.append([(x - mu) / math.sqrt(var + eps) * g[i] + b[i] for i, x in enumerate(r)])
    return out


def _attend(xq, xkv, mha):
    q, k, v = _lin(xq, mha.q), _lin(xkv, mha.k), _lin(xkv, mha.v)
    d = len(q[0])
    out = []
    for qi in q:
        logits = [sum(qi[c] * kj[c] for c in range(d)) / math.sqrt(d) for kj in k]
        mx = max(logits)
        e = [math.exp(z - mx) for z in logits]
        s = sum(e)
        out.append([sum(e[j] / s * v[j][c] for j in range(len(v))) for c in range(d)])
    return _lin(out, mha.o)


def _ff(rows, ff):
    return _lin([[max(0.0, z) for z in r] for r in _lin(rows, ff.fc1)], ff.fc2)


def _addrows(a, b):
    return [[x + y for x, y in zip(ra, rb)] for ra, rb in zip(a, b)]


def _positions(n, d):
    out = []
    for p in range(n):
        row = []
        for i in range(d):
            angle = p / 10000 ** ((i - i % 2) / d)
            row.append(math.sin(angle) if i % 2 == 0 else math.cos(angle))
        out.append(row)
    return out


def _decoder_loops(dec, x, o):
    a = _addrows(_lin(o, dec.audio_in), _positions(len(o), len(dec.audio_in.weight)))
    layer = dec.audio_layers[0]
    h = _ln(a, layer.norm1)
    a = _addrows(a, _attend(h, h, layer.attn))
    a = _addrows(a, _ff(_ln(a, layer.norm2), layer.ff))
    memory = _lin(_ln(a, dec.audio_norm), dec.proj)
    cross = dec.cross_layers[0]
    x = _addrows(x, _attend(_ln(x, cross.norm1), memory, cross.attn))
    x = _addrows(x, _ff(_ln(x, cross.norm2), cross.ff))
    return _ln(x, dec.norm)


def _randomise(module, g):
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(0.5 * torch.randn(p.shape, dtype=D, generator=g))


def test_fuse_matches_scalar_loops():
    g = _gen(3)
    dec = FusionDecoder(TINY, 3, g).double()
    _randomise(dec, g)
    x = [[0.3, -0.2, 0.8, 0.1], [-0.5, 0.4, 0.0, 0.9]]
    o = [[0.2, 0.7, 0.1], [0.6, 0.3, 0.1], [0.1, 0.1, 0.8]]
    got = dec(torch.tensor([x], dtype=D), torch.tensor([o], dtype=D))[0]
    want = torch.tensor(_decoder_loops(dec, x, o), dtype=D)
    assert torch.allclose(got, want, atol=1e-10, rtol=0)


def test_fuse_output_shape_and_single_frame_weights():
    dec = FusionDecoder(TINY, 5, _gen()).double()
    x = torch.randn(2, 3, 4, dtype=D)
    for t in (1, 7):
        h, weights = dec(x, torch.randn(2, t, 5, dtype=D), return_weights=True)
        assert h.shape == (2, 3, 4)
        if t == 1:
            assert torch.equal(weights[0], torch.ones_like(weights[0]))


def test_fuse_mask_mismatch():
    dec = FusionDecoder(TINY, 5, _gen()).double()
    with pytest.raises(ShapeError):
        dec(torch.randn(1, 3, 4, dtype=D), torch.randn(1, 6, 5, dtype=D), audio_mask=torch.ones(1, 4, dtype=torch.bool))
    with pytest.raises(ShapeError):
        dec(torch.randn(1, 3, 4, dtype=D), torch.randn(1, 6, 7, dtype=D))


def test_fuse_audio_padding_invariance():
    g = _gen(5)
    dec = FusionDecoder(TINY, 5, g).double()
    x = torch.randn(1, 3, 4, dtype=D, generator=g)
    o = torch.randn(1, 6, 5, dtype=D, generator=g)
    base = dec(x, o)
    padded = torch.cat([o, 30 * torch.randn(1, 4, 5, dtype=D, generator=g)], dim=1)
    mask = torch.tensor([[True] * 6 + [False] * 4])
    assert torch.allclose(dec(x, padded, audio_mask=mask), base, atol=1e-6)


# ---------------------------------------------------------------------------
# head and objective

def test_predict_zero_head_is_uniform():
    head = Linear(4, 5, _gen()).double()
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
    p = predict(head, torch.randn(3, 4, dtype=D))
    assert torch.equal(p, torch.full((3, 5), 0.2, dtype=D))


def test_predict_rows_sum_to_one():
    head = Linear(4, 5, _gen()).double()
    p = predict(head, 10 * torch.randn(6, 4, dtype=D))
    assert torch.allclose(p.sum(-1), torch.ones(6, dtype=D), atol=1e-9)


def test_predict_matches_direct_softmax():
    head = Linear(2, 5, _gen()).double()
    w = [[0.5, -1.0], [0.25, 0.75], [-0.3, 0.2], [1.1, 0.0], [0.0, -0.4]]
    b = [0.1, -0.2, 0.3, 0.0, 0.05]
    with torch.no_grad():
        head.weight.copy_(torch.tensor(w, dtype=D))
        head.bias.copy_(torch.tensor(b, dtype=D))
    h = [0.8, -0.6]
    z = [sum(w[k][i] * h[i] for i in range(2)) + b[k] for k in range(5)]
    e = [math.exp(v) for v in z]
    want = [v / sum(e) for v in e]
    got = predict(head, torch.tensor([h], dtype=D))[0].tolist()
    assert max(abs(a - c) for a, c in zip(got, want)) < 1e-12


def test_ce_loss_values():
    labels = torch.tensor([2, 0])
    one_hot = torch.nn.functional.one_hot(labels, 5).double()
    assert ce_loss(one_hot, labels).item() == 0.0
    uniform = torch.full((2, 5), 0.2, dtype=D)
    assert abs(ce_loss(uniform, labels).item() / 2 - math.log(5)) < 1e-12
    p = torch.tensor([[0.1, 0.1, 0.7, 0.05, 0.05], [0.1, 0.2, 0.3, 0.3, 0.1]], dtype=D)
    assert abs(ce_loss(p, labels).item() - (-math.log(0.7) - math.log(0.1))) < 1e-12
    assert abs(ce_loss(p, labels, torch.tensor([True, False])).item() + math.log(0.7)) < 1e-12
    with pytest.raises(ProsodyError):
        ce_loss(uniform, torch.tensor([5, 0]))


def test_ce_loss_logits_agrees():
    z = torch.randn(3, 5, dtype=D)
    labels = torch.tensor([4, 1, 0])
    assert abs(ce_loss(torch.softmax(z, -1), labels).item() - ce_loss_logits(z, labels).item()) < 1e-12


def test_ce_loss_monotone_in_true_mass():
    labels = torch.tensor([1])
    lo = torch.tensor([[0.3, 0.2, 0.2, 0.2, 0.1]], dtype=D)
    hi = torch.tensor([[0.2, 0.3, 0.2, 0.2, 0.1]], dtype=D)
    assert ce_loss(hi, labels) < ce_loss(lo, labels)


def test_argmax_ties_go_low():
    p = np.array([[0.1, 0.4, 0.4, 0.05, 0.05], [0.2, 0.2, 0.2, 0.2, 0.2]])
    assert argmax_low(p).tolist() == [1, 0]


# ---------------------------------------------------------------------------
# full model

def _toy_utts(n=3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        k = int(rng.integers(2, 5))
        toks = [int(t) for t in rng.integers(0, TINY.vocab_size, k)]
        spans, phones, pos = [], [], 0
        for t in toks:
            d = int(rng.integers(2, 4))
            spans.append((pos, pos + d))
            phones += [1 + t % TINY.phone_count] * d
            pos += d
        labels = [int(x) for x in rng.integers(0, 5, k - 1)] + [4]
        frames = rng.standard_normal((pos, TINY.feature_dim))
        out.append(Utterance(f"u{i}", toks, labels, frames, spans, phones))
    return out


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("kind", ["conformer_char", "ppg", "cnn_char", "none"])
def test_end_to_end_gradient(kind, seed):
    model = ProsodyAnnotator(TINY, kind, seed).double()
    batch = collate(_toy_utts(2, seed), dtype=D)

    def loss():
        return ce_loss(model.probabilities(batch), batch.labels, batch.token_mask)

    assert fd_max_rel_error(loss, list(model.parameters()), samples_per_tensor=3, seed=seed) < FD_TOL


@pytest.mark.parametrize("kind", ["conformer_char", "ppg", "cnn_char"])
def test_model_padding_invariance(kind):
    model = ProsodyAnnotator(TINY, kind, 1).double()
    utts = _toy_utts(3, 4)
    together = model.probabilities(collate(utts, dtype=D))
    for i, u in enumerate(utts):
        alone = model.probabilities(collate([u], dtype=D))[0]
        assert torch.allclose(together[i, : len(u.tokens)], alone, atol=1e-6)


def test_annotate_contract():
    model = ProsodyAnnotator(TINY, "conformer_char", 0)
    u = _toy_utts(1, 2)[0]
    a = annotate(u.tokens, u.frames, model)
    assert len(a) == len(u.tokens) and all(0 <= x <= 4 for x in a)
    assert annotate(u.tokens, u.frames, model) == a
    with pytest.raises(ShapeError):
        annotate(u.tokens, u.frames[:, :2], model)
